use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;

use super::layers::{
    avgpool2, avgpool2_backward, global_avg, global_avg_backward, silu, silu_backward, spatial_moments,
    spatial_moments_backward, upsample2, upsample2_backward, ChannelBias, Conv3x3, Linear,
};
use super::params::{Gradients, ParamStore};
use super::{DisplacementScoreNet, HomographyScoreNet, NetConfig};

/// Settings of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckOptions {
    /// Entries checked per layer type (all entries when fewer exist).
    pub samples: usize,
    pub fd_step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Layer whose analytic gradient is deliberately perturbed; used to
    /// confirm that the checker detects errors.
    #[serde(skip)]
    pub corrupt: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            samples: 200,
            fd_step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub layer: String,
    pub checked: usize,
    pub worst_relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn worst(&self) -> Option<&GradCheckRow> {
        self.rows
            .iter()
            .max_by(|a, b| a.worst_relative_error.total_cmp(&b.worst_relative_error))
    }
}

/// Relative error with a floor on the magnitude, so that entries whose true
/// gradient is essentially zero are judged on an absolute scale.
fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Checks an input-gradient of a parameter-free map.
fn check_input(
    name: &str,
    opts: &GradCheckOptions,
    rng: &mut ChaCha8Rng,
    len: usize,
    amplitude: f64,
    f: impl Fn(&[f64]) -> Vec<f64>,
    back: impl Fn(&[f64], &[f64]) -> Vec<f64>,
) -> GradCheckRow {
    let x: Vec<f64> = rand_vec(rng, len).iter().map(|v| amplitude * v).collect();
    let y = f(&x);
    let r = rand_vec(rng, y.len());
    let mut analytic = back(&x, &r);
    corrupt(name, opts, &mut analytic);
    let idx = sample(rng, x.len(), opts.samples.min(x.len()));
    let mut worst: f64 = 0.0;
    for i in idx.iter() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += opts.fd_step;
        xm[i] -= opts.fd_step;
        let num = (dot(&f(&xp), &r) - dot(&f(&xm), &r)) / (2.0 * opts.fd_step);
        worst = worst.max(relative_error(analytic[i], num));
    }
    row(name, idx.len(), worst, opts)
}

fn corrupt(name: &str, opts: &GradCheckOptions, g: &mut [f64]) {
    if opts.corrupt.as_deref() == Some(name) {
        g.iter_mut().for_each(|v| *v *= 1.01);
    }
}

fn row(name: &str, checked: usize, worst: f64, opts: &GradCheckOptions) -> GradCheckRow {
    GradCheckRow {
        layer: name.to_string(),
        checked,
        worst_relative_error: worst,
        passed: worst < opts.tolerance,
    }
}

/// Checks parameter gradients. `loss` evaluates the scalar objective for a
/// parameter store and `grads` returns its analytic gradient.
fn check_params(
    name: &str,
    opts: &GradCheckOptions,
    rng: &mut ChaCha8Rng,
    store: &ParamStore,
    loss: impl Fn(&ParamStore) -> f64,
    grads: impl Fn(&ParamStore) -> Gradients,
) -> GradCheckRow {
    let mut analytic = grads(store);
    for g in analytic.data.iter_mut() {
        corrupt(name, opts, g);
    }
    let flat: Vec<(usize, usize)> = store
        .tensors()
        .iter()
        .enumerate()
        .flat_map(|(k, t)| (0..t.value.len()).map(move |i| (k, i)))
        .collect();
    let idx = sample(rng, flat.len(), opts.samples.min(flat.len()));
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for j in idx.iter() {
        let (k, i) = flat[j];
        let orig = probe.tensors()[k].value[i];
        probe.tensors_mut()[k].value[i] = orig + opts.fd_step;
        let lp = loss(&probe);
        probe.tensors_mut()[k].value[i] = orig - opts.fd_step;
        let lm = loss(&probe);
        probe.tensors_mut()[k].value[i] = orig;
        let num = (lp - lm) / (2.0 * opts.fd_step);
        worst = worst.max(relative_error(analytic.data[k][i], num));
    }
    row(name, idx.len(), worst, opts)
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for t in store.tensors_mut() {
        t.value.iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
    }
}

/// Finite-difference check of every layer type and of both networks.
pub fn run_gradcheck(opts: &GradCheckOptions) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut rows = Vec::new();

    // Linear
    {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", 210, 12, false, &mut rng);
        randomize(&mut store, &mut rng, 0.5);
        let x = rand_vec(&mut rng, 210);
        let r = rand_vec(&mut rng, 12);
        rows.push(check_params(
            "linear",
            opts,
            &mut rng,
            &store,
            |p| dot(&lin.forward(p, &x), &r),
            |p| {
                let mut g = p.zeros_like();
                lin.backward(p, &x, &r, &mut g);
                g
            },
        ));
        let s2 = store.clone();
        rows.push(check_input(
            "linear_input",
            opts,
            &mut rng,
            210, 1.0,
            |x| lin.forward(&s2, x),
            |x, gy| {
                let mut g = s2.zeros_like();
                lin.backward(&s2, x, gy, &mut g)
            },
        ));
    }

    // Conv3x3
    {
        let mut store = ParamStore::new();
        let (h, w) = (8, 8);
        let conv = Conv3x3::new(&mut store, "conv", 4, 6, false, &mut rng);
        randomize(&mut store, &mut rng, 0.5);
        let x = rand_vec(&mut rng, 4 * h * w);
        let r = rand_vec(&mut rng, 6 * h * w);
        rows.push(check_params(
            "conv3x3",
            opts,
            &mut rng,
            &store,
            |p| dot(&conv.forward(p, &x, h, w), &r),
            |p| {
                let mut g = p.zeros_like();
                conv.backward(p, &x, h, w, &r, &mut g);
                g
            },
        ));
        let s2 = store.clone();
        rows.push(check_input(
            "conv3x3_input",
            opts,
            &mut rng,
            4 * h * w, 1.0,
            |x| conv.forward(&s2, x, h, w),
            |x, gy| {
                let mut g = s2.zeros_like();
                conv.backward(&s2, x, h, w, gy, &mut g)
            },
        ));
    }

    // Time-conditioned channel bias
    {
        let mut store = ParamStore::new();
        let hw = 4;
        let tb = ChannelBias::new(&mut store, "tb", 16, 14, &mut rng);
        randomize(&mut store, &mut rng, 0.5);
        let x = rand_vec(&mut rng, 14 * hw);
        let e = rand_vec(&mut rng, 16);
        let r = rand_vec(&mut rng, 14 * hw);
        rows.push(check_params(
            "channel_bias",
            opts,
            &mut rng,
            &store,
            |p| dot(&tb.forward(p, &x, &e, hw), &r),
            |p| {
                let mut g = p.zeros_like();
                tb.backward(p, &e, &r, hw, &mut g);
                g
            },
        ));
    }

    rows.push(check_input("silu", opts, &mut rng, 300, 3.0, silu, silu_backward));
    rows.push(check_input(
        "avgpool2",
        opts,
        &mut rng,
        3 * 8 * 10, 1.0,
        |x| avgpool2(x, 3, 8, 10),
        |_, gy| avgpool2_backward(gy, 3, 8, 10),
    ));
    rows.push(check_input(
        "upsample2",
        opts,
        &mut rng,
        4 * 6 * 9, 1.0,
        |x| upsample2(x, 4, 6, 9),
        |_, gy| upsample2_backward(gy, 4, 6, 9),
    ));
    rows.push(check_input(
        "spatial_moments",
        opts,
        &mut rng,
        3 * 9 * 9, 2.0,
        |x| spatial_moments(x, 3, 9, 9).0,
        |x, gy| {
            let (out, probs) = spatial_moments(x, 3, 9, 9);
            spatial_moments_backward(&probs, &out, gy, 3, 9, 9)
        },
    ));
    rows.push(check_input(
        "global_avg",
        opts,
        &mut rng,
        5 * 49, 1.0,
        |x| global_avg(x, 5, 49),
        |_, gy| global_avg_backward(gy, 5, 49),
    ));

    let sched = NoiseSchedule::linear(10, 1e-4, 0.02).expect("valid schedule");
    let cfg = NetConfig::tiny();

    // Homography network, end to end
    {
        let mut net = HomographyScoreNet::new(cfg.clone(), opts.seed.wrapping_add(1));
        randomize(&mut net.params, &mut rng, 0.4);
        let n = cfg.enc_size * cfg.enc_size;
        let (a, b, x) = (rand_vec(&mut rng, n), rand_vec(&mut rng, n), rand_vec(&mut rng, 9));
        let r = rand_vec(&mut rng, 9);
        let probe = net.clone();
        let store = net.params.clone();
        rows.push(check_params(
            "homography_net",
            opts,
            &mut rng,
            &store,
            |p| {
                let mut m = probe.clone();
                m.params = p.clone();
                dot(&m.forward(&a, &b, &x, 6, &sched).expect("shapes"), &r)
            },
            |p| {
                let mut m = probe.clone();
                m.params = p.clone();
                let (_, pass) = m.forward_recorded(&a, &b, &x, 6, &sched).expect("shapes");
                m.backward(&pass, &r).expect("recorded")
            },
        ));
    }

    // Displacement network, end to end
    {
        let mut net = DisplacementScoreNet::new(cfg.clone(), opts.seed.wrapping_add(2));
        randomize(&mut net.params, &mut rng, 0.4);
        let m2 = cfg.v_input_size * cfg.v_input_size;
        let (a, b) = (rand_vec(&mut rng, m2), rand_vec(&mut rng, m2));
        let x = rand_vec(&mut rng, net.state_len());
        let r = rand_vec(&mut rng, net.state_len());
        let probe = net.clone();
        let store = net.params.clone();
        rows.push(check_params(
            "displacement_net",
            opts,
            &mut rng,
            &store,
            |p| {
                let mut m = probe.clone();
                m.params = p.clone();
                dot(&m.forward(&a, &b, &x, 3, &sched).expect("shapes"), &r)
            },
            |p| {
                let mut m = probe.clone();
                m.params = p.clone();
                let (_, pass) = m.forward_recorded(&a, &b, &x, 3, &sched).expect("shapes");
                m.backward(&pass, &r).expect("recorded")
            },
        ));
    }

    GradCheckReport { rows }
}
