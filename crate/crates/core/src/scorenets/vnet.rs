use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::NoiseSchedule;
use crate::error::{AdmError, Result};

use super::layers::{
    avgpool2, avgpool2_backward, silu, silu_backward, time_embedding, upsample2, upsample2_backward, ChannelBias,
    Conv3x3,
};
use super::params::{Gradients, ParamStore};
use super::{NetConfig, RecordedPass};

/// Score network for the displacement chain: a two-level encoder-decoder
/// with skip connections over the two structure maps and the noisy field.
#[derive(Debug, Clone)]
pub struct DisplacementScoreNet {
    pub config: NetConfig,
    pub params: ParamStore,
    stem: Conv3x3,
    enc1: Conv3x3,
    tb1: ChannelBias,
    enc2: Conv3x3,
    tb2: ChannelBias,
    mid: Conv3x3,
    tb3: ChannelBias,
    dec2: Conv3x3,
    dec1: Conv3x3,
    head: Conv3x3,
}

#[derive(Debug, Clone)]
pub struct VRecord {
    s0: Vec<f64>,
    zs: Vec<f64>,
    x1: Vec<f64>,
    z1: Vec<f64>,
    q1: Vec<f64>,
    z2: Vec<f64>,
    q2: Vec<f64>,
    z3: Vec<f64>,
    c2: Vec<f64>,
    z4: Vec<f64>,
    c1: Vec<f64>,
    z5: Vec<f64>,
    a5: Vec<f64>,
    temb: Vec<f64>,
    out_scale: f64,
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

impl DisplacementScoreNet {
    pub fn new(config: NetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (c0, c) = (config.v_stem, config.v_channels);
        let te = config.temb_dim;
        let stem = Conv3x3::new(&mut p, "stem", 2, c0, false, &mut rng);
        let enc1 = Conv3x3::new(&mut p, "enc1", c0 + 2, c, false, &mut rng);
        let tb1 = ChannelBias::new(&mut p, "enc1.time", te, c, &mut rng);
        let enc2 = Conv3x3::new(&mut p, "enc2", c, 2 * c, false, &mut rng);
        let tb2 = ChannelBias::new(&mut p, "enc2.time", te, 2 * c, &mut rng);
        let mid = Conv3x3::new(&mut p, "mid", 2 * c, 2 * c, false, &mut rng);
        let tb3 = ChannelBias::new(&mut p, "mid.time", te, 2 * c, &mut rng);
        let dec2 = Conv3x3::new(&mut p, "dec2", 4 * c, 2 * c, false, &mut rng);
        let dec1 = Conv3x3::new(&mut p, "dec1", 3 * c, c, false, &mut rng);
        let head = Conv3x3::new(&mut p, "head", c, 2, true, &mut rng);
        Self {
            config,
            params: p,
            stem,
            enc1,
            tb1,
            enc2,
            tb2,
            mid,
            tb3,
            dec2,
            dec1,
            head,
        }
    }

    /// Number of entries of the field state (`2 x f x f`).
    pub fn state_len(&self) -> usize {
        2 * self.config.field_size * self.config.field_size
    }

    fn run(
        &self,
        in_warp: &[f64],
        in_dest: &[f64],
        x_v: &[f64],
        t: usize,
        sched: &NoiseSchedule,
    ) -> Result<(Vec<f64>, VRecord)> {
        let s = self.config.v_input_size;
        let f = self.config.field_size;
        if in_warp.len() != s * s {
            return Err(AdmError::shape(s * s, in_warp.len()));
        }
        if in_dest.len() != s * s {
            return Err(AdmError::shape(s * s, in_dest.len()));
        }
        if x_v.len() != self.state_len() {
            return Err(AdmError::shape(self.state_len(), x_v.len()));
        }
        if t == 0 || t > sched.steps() {
            return Err(AdmError::InvalidParameter(format!("step {t} outside 1..={}", sched.steps())));
        }
        let p = &self.params;
        let (c0, c) = (self.config.v_stem, self.config.v_channels);
        let (f2, f4) = (f / 2, f / 4);
        let temb = time_embedding(t, sched.steps(), self.config.temb_dim);

        let s0 = concat(in_warp, in_dest);
        let zs = self.stem.forward(p, &s0, s, s);
        let ps = avgpool2(&silu(&zs), c0, s, s);
        let x1 = concat(&ps, x_v);
        let z1 = self.tb1.forward(p, &self.enc1.forward(p, &x1, f, f), &temb, f * f);
        let a1 = silu(&z1);
        let q1 = avgpool2(&a1, c, f, f);
        let z2 = self.tb2.forward(p, &self.enc2.forward(p, &q1, f2, f2), &temb, f2 * f2);
        let a2 = silu(&z2);
        let q2 = avgpool2(&a2, 2 * c, f2, f2);
        let z3 = self.tb3.forward(p, &self.mid.forward(p, &q2, f4, f4), &temb, f4 * f4);
        let a3 = silu(&z3);
        let c2 = concat(&upsample2(&a3, 2 * c, f4, f4), &a2);
        let z4 = self.dec2.forward(p, &c2, f2, f2);
        let a4 = silu(&z4);
        let c1 = concat(&upsample2(&a4, 2 * c, f2, f2), &a1);
        let z5 = self.dec1.forward(p, &c1, f, f);
        let a5 = silu(&z5);
        let eps = self.head.forward(p, &a5, f, f);
        let out_scale = -1.0 / (1.0 - sched.alpha_bar(t)).sqrt();
        let score = eps.into_iter().map(|e| out_scale * e).collect();
        Ok((
            score,
            VRecord {
                s0,
                zs,
                x1,
                z1,
                q1,
                z2,
                q2,
                z3,
                c2,
                z4,
                c1,
                z5,
                a5,
                temb,
                out_scale,
            },
        ))
    }

    /// Score of the coarse field state given the structure maps of the
    /// warped source and the destination at the network input size.
    pub fn forward(&self, in_warp: &[f64], in_dest: &[f64], x_v: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        Ok(self.run(in_warp, in_dest, x_v, t, sched)?.0)
    }

    pub fn forward_recorded(
        &self,
        in_warp: &[f64],
        in_dest: &[f64],
        x_v: &[f64],
        t: usize,
        sched: &NoiseSchedule,
    ) -> Result<(Vec<f64>, RecordedPass<VRecord>)> {
        let (score, rec) = self.run(in_warp, in_dest, x_v, t, sched)?;
        Ok((score, RecordedPass::new(rec)))
    }

    pub fn backward(&self, pass: &RecordedPass<VRecord>, g_score: &[f64]) -> Result<Gradients> {
        let r = pass.get()?;
        if g_score.len() != self.state_len() {
            return Err(AdmError::shape(self.state_len(), g_score.len()));
        }
        let p = &self.params;
        let mut g = p.zeros_like();
        let s = self.config.v_input_size;
        let f = self.config.field_size;
        let (f2, f4) = (f / 2, f / 4);
        let (c0, c) = (self.config.v_stem, self.config.v_channels);

        let g_eps: Vec<f64> = g_score.iter().map(|v| v * r.out_scale).collect();
        let ga5 = self.head.backward(p, &r.a5, f, f, &g_eps, &mut g);
        let gz5 = silu_backward(&r.z5, &ga5);
        let gc1 = self.dec1.backward(p, &r.c1, f, f, &gz5, &mut g);
        let split1 = 2 * c * f * f;
        let mut ga1 = gc1[split1..].to_vec();
        let ga4 = upsample2_backward(&gc1[..split1], 2 * c, f2, f2);
        let gz4 = silu_backward(&r.z4, &ga4);
        let gc2 = self.dec2.backward(p, &r.c2, f2, f2, &gz4, &mut g);
        let split2 = 2 * c * f2 * f2;
        let mut ga2 = gc2[split2..].to_vec();
        let ga3 = upsample2_backward(&gc2[..split2], 2 * c, f4, f4);
        let gz3 = silu_backward(&r.z3, &ga3);
        self.tb3.backward(p, &r.temb, &gz3, f4 * f4, &mut g);
        let gq2 = self.mid.backward(p, &r.q2, f4, f4, &gz3, &mut g);
        add_into(&mut ga2, &avgpool2_backward(&gq2, 2 * c, f2, f2));
        let gz2 = silu_backward(&r.z2, &ga2);
        self.tb2.backward(p, &r.temb, &gz2, f2 * f2, &mut g);
        let gq1 = self.enc2.backward(p, &r.q1, f2, f2, &gz2, &mut g);
        add_into(&mut ga1, &avgpool2_backward(&gq1, c, f, f));
        let gz1 = silu_backward(&r.z1, &ga1);
        self.tb1.backward(p, &r.temb, &gz1, f * f, &mut g);
        let gx1 = self.enc1.backward(p, &r.x1, f, f, &gz1, &mut g);
        let gps = &gx1[..c0 * f * f];
        let gas = avgpool2_backward(gps, c0, s, s);
        let gzs = silu_backward(&r.zs, &gas);
        self.stem.backward(p, &r.s0, s, s, &gzs, &mut g);
        Ok(g)
    }
}
