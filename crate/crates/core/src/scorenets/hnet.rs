use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::NoiseSchedule;
use crate::error::{AdmError, Result};

use super::layers::{
    avgpool2, avgpool2_backward, global_avg, global_avg_backward, silu, silu_backward, spatial_moments,
    spatial_moments_backward, time_embedding, Conv3x3, Linear,
};
use super::params::{Gradients, ParamStore};
use super::{NetConfig, RecordedPass};

/// Score network for the homography chain: a shared convolutional encoder
/// applied to both images, followed by an MLP over the two embeddings, the
/// noisy state and the time embedding.
#[derive(Debug, Clone)]
pub struct HomographyScoreNet {
    pub config: NetConfig,
    pub params: ParamStore,
    conv1: Conv3x3,
    conv2: Conv3x3,
    conv3: Conv3x3,
    proj: Linear,
    fc1: Linear,
    fc2: Linear,
    out: Linear,
}

/// Intermediate values of one encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderRecord {
    x0: Vec<f64>,
    z1: Vec<f64>,
    p1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    probs: Vec<f64>,
    moments: Vec<f64>,
    feat: Vec<f64>,
}

/// Intermediate values of one full forward pass.
#[derive(Debug, Clone)]
pub struct HRecord {
    enc_s: EncoderRecord,
    enc_d: EncoderRecord,
    u: Vec<f64>,
    z1: Vec<f64>,
    h1: Vec<f64>,
    z2: Vec<f64>,
    h2: Vec<f64>,
    out_scale: f64,
}

fn output_scale(t: usize, sched: &NoiseSchedule) -> f64 {
    -1.0 / (1.0 - sched.alpha_bar(t)).sqrt()
}

impl HomographyScoreNet {
    pub fn new(config: NetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let [c1, c2] = config.enc_channels;
        let k = config.keypoints;
        let conv1 = Conv3x3::new(&mut p, "enc.conv1", 1, c1, false, &mut rng);
        let conv2 = Conv3x3::new(&mut p, "enc.conv2", c1, c2, false, &mut rng);
        let conv3 = Conv3x3::new(&mut p, "enc.keypoints", c2, k, false, &mut rng);
        let proj = Linear::new(&mut p, "enc.proj", 5 * k + c2, config.embed_dim, false, &mut rng);
        let trunk_in = 2 * config.embed_dim + 9 + config.temb_dim;
        let fc1 = Linear::new(&mut p, "trunk.fc1", trunk_in, config.hidden, false, &mut rng);
        let fc2 = Linear::new(&mut p, "trunk.fc2", config.hidden, config.hidden, false, &mut rng);
        let out = Linear::new(&mut p, "trunk.out", config.hidden, 9, true, &mut rng);
        Self {
            config,
            params: p,
            conv1,
            conv2,
            conv3,
            proj,
            fc1,
            fc2,
            out,
        }
    }

    fn input_len(&self) -> usize {
        self.config.enc_size * self.config.enc_size
    }

    fn encode_inner(&self, x0: &[f64]) -> Result<EncoderRecord> {
        if x0.len() != self.input_len() {
            return Err(AdmError::shape(self.input_len(), x0.len()));
        }
        let p = &self.params;
        let s = self.config.enc_size;
        let [c1, c2] = self.config.enc_channels;
        let k = self.config.keypoints;
        let z1 = self.conv1.forward(p, x0, s, s);
        let p1 = avgpool2(&silu(&z1), c1, s, s);
        let h = s / 2;
        let z2 = self.conv2.forward(p, &p1, h, h);
        let a2 = silu(&z2);
        let z3 = self.conv3.forward(p, &a2, h, h);
        let (moments, probs) = spatial_moments(&z3, k, h, h);
        let mut feat = moments.clone();
        feat.extend(global_avg(&a2, c2, h * h));
        Ok(EncoderRecord {
            x0: x0.to_vec(),
            z1,
            p1,
            z2,
            a2,
            probs,
            moments,
            feat,
        })
    }

    /// Embedding of one preprocessed image.
    pub fn encode(&self, input: &[f64]) -> Result<Vec<f64>> {
        let rec = self.encode_inner(input)?;
        Ok(self.proj.forward(&self.params, &rec.feat))
    }

    fn encoder_backward(&self, rec: &EncoderRecord, ge: &[f64], g: &mut Gradients) {
        let p = &self.params;
        let s = self.config.enc_size;
        let h = s / 2;
        let [c1, c2] = self.config.enc_channels;
        let k = self.config.keypoints;
        let gfeat = self.proj.backward(p, &rec.feat, ge, g);
        let gz3 = spatial_moments_backward(&rec.probs, &rec.moments, &gfeat[..5 * k], k, h, h);
        let mut ga2 = self.conv3.backward(p, &rec.a2, h, h, &gz3, g);
        for (a, b) in ga2.iter_mut().zip(global_avg_backward(&gfeat[5 * k..], c2, h * h)) {
            *a += b;
        }
        let gz2 = silu_backward(&rec.z2, &ga2);
        let gp1 = self.conv2.backward(p, &rec.p1, h, h, &gz2, g);
        let ga1 = avgpool2_backward(&gp1, c1, s, s);
        let gz1 = silu_backward(&rec.z1, &ga1);
        self.conv1.backward(p, &rec.x0, s, s, &gz1, g);
    }

    fn trunk_input(&self, e_s: &[f64], e_d: &[f64], x_h: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        if x_h.len() != 9 {
            return Err(AdmError::shape(9, x_h.len()));
        }
        if t == 0 || t > sched.steps() {
            return Err(AdmError::InvalidParameter(format!("step {t} outside 1..={}", sched.steps())));
        }
        let mut u = Vec::with_capacity(self.fc1.inp);
        u.extend_from_slice(e_s);
        u.extend_from_slice(e_d);
        u.extend_from_slice(x_h);
        u.extend(time_embedding(t, sched.steps(), self.config.temb_dim));
        if u.len() != self.fc1.inp {
            return Err(AdmError::shape(self.fc1.inp, u.len()));
        }
        Ok(u)
    }

    /// Score from precomputed embeddings (image features are fixed during a
    /// sampling run).
    pub fn forward_cached(&self, e_s: &[f64], e_d: &[f64], x_h: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        let p = &self.params;
        let u = self.trunk_input(e_s, e_d, x_h, t, sched)?;
        let h1 = silu(&self.fc1.forward(p, &u));
        let h2 = silu(&self.fc2.forward(p, &h1));
        let scale = output_scale(t, sched);
        Ok(self.out.forward(p, &h2).into_iter().map(|e| scale * e).collect())
    }

    pub fn forward(&self, in_s: &[f64], in_d: &[f64], x_h: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        let e_s = self.encode(in_s)?;
        let e_d = self.encode(in_d)?;
        self.forward_cached(&e_s, &e_d, x_h, t, sched)
    }

    pub fn forward_recorded(
        &self,
        in_s: &[f64],
        in_d: &[f64],
        x_h: &[f64],
        t: usize,
        sched: &NoiseSchedule,
    ) -> Result<(Vec<f64>, RecordedPass<HRecord>)> {
        let p = &self.params;
        let enc_s = self.encode_inner(in_s)?;
        let enc_d = self.encode_inner(in_d)?;
        let e_s = self.proj.forward(p, &enc_s.feat);
        let e_d = self.proj.forward(p, &enc_d.feat);
        let u = self.trunk_input(&e_s, &e_d, x_h, t, sched)?;
        let z1 = self.fc1.forward(p, &u);
        let h1 = silu(&z1);
        let z2 = self.fc2.forward(p, &h1);
        let h2 = silu(&z2);
        let out_scale = output_scale(t, sched);
        let score = self.out.forward(p, &h2).into_iter().map(|e| out_scale * e).collect();
        Ok((
            score,
            RecordedPass::new(HRecord {
                enc_s,
                enc_d,
                u,
                z1,
                h1,
                z2,
                h2,
                out_scale,
            }),
        ))
    }

    /// Parameter gradients for a gradient on the output score.
    pub fn backward(&self, pass: &RecordedPass<HRecord>, g_score: &[f64]) -> Result<Gradients> {
        let rec = pass.get()?;
        if g_score.len() != 9 {
            return Err(AdmError::shape(9, g_score.len()));
        }
        let p = &self.params;
        let mut g = p.zeros_like();
        let g_eps: Vec<f64> = g_score.iter().map(|v| v * rec.out_scale).collect();
        let gh2 = self.out.backward(p, &rec.h2, &g_eps, &mut g);
        let gz2 = silu_backward(&rec.z2, &gh2);
        let gh1 = self.fc2.backward(p, &rec.h1, &gz2, &mut g);
        let gz1 = silu_backward(&rec.z1, &gh1);
        let gu = self.fc1.backward(p, &rec.u, &gz1, &mut g);
        let d = self.config.embed_dim;
        self.encoder_backward(&rec.enc_s, &gu[..d], &mut g);
        self.encoder_backward(&rec.enc_d, &gu[d..2 * d], &mut g);
        Ok(g)
    }
}
