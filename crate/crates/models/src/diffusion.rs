//! Action-conditioned motion diffusion: linear-beta noise schedule,
//! closed-form forward noising, a clean-sample-predicting attention
//! generator, reconstruction training, and ancestral reverse sampling.

use crate::nets::{pos_enc_rows, periodic_pos_enc, EncoderStack, Linear, Mlp};
use crate::{Binder, ModelError};
use mfp_motion::{pose_devectorize, ActionLabel, MotionSequence, NormStats, POSE_DIM};
use mfp_tensor::{load_checkpoint, save_checkpoint, Graph, ParamStore, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Linear-beta schedule; alpha_bar is the running product of alphas.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    /// 1-indexed per the step convention; `alpha_bar(0)` is 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }
}

pub fn make_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule, ModelError> {
    if t == 0 {
        return Err(ModelError::BadConfig("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(ModelError::BadConfig(format!(
            "betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let mut beta = Vec::with_capacity(t);
    for i in 0..t {
        let frac = if t == 1 { 0.0 } else { i as f64 / (t - 1) as f64 };
        beta.push(beta_start + (beta_end - beta_start) * frac);
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t);
    let mut prod = 1.0;
    for a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule {
        alpha,
        alpha_bar,
        beta,
    })
}

/// Closed-form marginal of t noising steps:
/// y_t = sqrt(abar_t) y_0 + sqrt(1 - abar_t) eps.
pub fn diffuse_to_t(y0: &Tensor, t: usize, sched: &NoiseSchedule, eps: &Tensor) -> Tensor {
    assert!(t >= 1 && t <= sched.len(), "t = {t} outside schedule");
    assert_eq!(y0.shape(), eps.shape(), "diffuse: noise shape mismatch");
    let ab = sched.alpha_bar(t);
    let (ca, cb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = y0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(y, e)| ca * y + cb * e)
        .collect();
    Tensor::new(y0.shape().to_vec(), data)
}

/// Anything that recovers a clean sample from a noised one; the trained
/// generator implements it, and tests substitute fixed oracles.
pub trait CleanPredictor {
    fn predict_clean(&self, y_t: &Tensor, t: usize, label: &ActionLabel) -> Tensor;
    fn frame_count(&self) -> usize;
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    pub ffn: usize,
    pub t_frames: usize,
    pub num_actions: usize,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            width: 64,
            heads: 4,
            depth: 2,
            ffn: 128,
            t_frames: 60,
            num_actions: 4,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Self-attention generator over frame tokens plus a timestep token and an
/// action token; predicts the clean sample directly.
pub struct MotionGenerator {
    pub config: DiffusionConfig,
    pub norm: NormStats,
    pub store: ParamStore,
    embed: Linear,
    time_proj: Linear,
    action_mlp: Mlp,
    stack: EncoderStack,
    out_head: Linear,
}

impl MotionGenerator {
    pub fn init(config: DiffusionConfig, norm: NormStats, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.width;
        let embed = Linear::init(&mut store, "embed", POSE_DIM, d, &mut rng);
        let time_proj = Linear::init(&mut store, "time", d, d, &mut rng);
        let action_mlp = Mlp::init(&mut store, "action", &[config.num_actions, d, d], &mut rng);
        let stack = EncoderStack::init(&mut store, "gen", d, config.heads, config.ffn, config.depth, &mut rng);
        let out_head = Linear::init_scaled(&mut store, "out", d, POSE_DIM, 0.02, &mut rng);
        MotionGenerator {
            config,
            norm,
            store,
            embed,
            time_proj,
            action_mlp,
            stack,
            out_head,
        }
    }

    pub fn schedule(&self) -> NoiseSchedule {
        make_schedule(self.config.steps, self.config.beta_start, self.config.beta_end)
            .expect("config betas validated at build time")
    }

    pub(crate) fn build_predict(
        &self,
        g: &mut Graph,
        b: &Binder,
        y_t: mfp_tensor::ValueId,
        t: usize,
        label: &ActionLabel,
    ) -> mfp_tensor::ValueId {
        let d = self.config.width;
        let tf = self.config.t_frames;
        let time_enc = g.constant(Tensor::matrix(
            1,
            d,
            periodic_pos_enc(t, self.config.steps + 1, d),
        ));
        let time_tok = self.time_proj.forward(g, b, time_enc);
        let onehot = g.constant(Tensor::matrix(1, label.num_classes, label.one_hot()));
        let action_tok = self.action_mlp.forward(g, b, onehot);
        let frames = self.embed.forward(g, b, y_t);
        let pos = g.constant(pos_enc_rows(0, tf, tf, d));
        let frames = g.add(frames, pos);
        let seq = g.concat_rows(&[time_tok, action_tok, frames]);
        let out = self.stack.forward(g, b, seq, None);
        let frames_out = g.slice_rows(out, 2, tf);
        self.out_head.forward(g, b, frames_out)
    }

    /// One training step over (clean normalized motion, label) pairs:
    /// uniform timestep per item, closed-form noising, reconstruct.
    pub fn train_step(
        &mut self,
        batch: &[(Tensor, ActionLabel)],
        sched: &NoiseSchedule,
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut total = 0.0;
        for (y0, label) in batch {
            let t = rng.gen_range(1..=sched.len());
            let eps = randn_like(y0, rng);
            let y_t = diffuse_to_t(y0, t, sched, &eps);
            let store = std::mem::take(&mut self.store);
            let mut g = Graph::new();
            let binder = Binder::trainable(&store);
            let y_t_node = g.constant(y_t);
            let pred = self.build_predict(&mut g, &binder, y_t_node, t, label);
            let target = g.constant(y0.clone());
            let diff = g.sub(pred, target);
            let sq = g.mul(diff, diff);
            let loss = g.sum(sq);
            let loss_v = g.value(loss).data()[0];
            if !loss_v.is_finite() {
                let detail = match g.assert_all_finite() {
                    Err(e) => e.to_string(),
                    Ok(()) => "loss non-finite".into(),
                };
                self.store = store;
                return Err(ModelError::NanLoss {
                    step: self.store.step_count(),
                    detail,
                });
            }
            total += loss_v;
            g.backward(loss)?;
            self.store = store;
            g.accumulate_grads(&mut self.store);
        }
        self.store.scale_grads(1.0 / batch.len() as f64);
        self.store.adam_step(lr)?;
        Ok(total / batch.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        save_checkpoint(&self.store, path)?;
        let sidecar = GenSidecar {
            config: self.config.clone(),
            norm: self.norm.clone(),
        };
        std::fs::write(crate::vae::sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let json = std::fs::read_to_string(crate::vae::sidecar_path(path))?;
        let sidecar: GenSidecar = serde_json::from_str(&json)?;
        let store = load_checkpoint(path)?;
        let mut model = MotionGenerator::init(sidecar.config, sidecar.norm, 0);
        for name in model.store.names().map(str::to_string).collect::<Vec<_>>() {
            model.store.set(&name, store.get(&name).clone());
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct GenSidecar {
    config: DiffusionConfig,
    norm: NormStats,
}

impl CleanPredictor for MotionGenerator {
    fn predict_clean(&self, y_t: &Tensor, t: usize, label: &ActionLabel) -> Tensor {
        let mut g = Graph::new();
        let b = Binder::frozen(&self.store);
        let y = g.constant(y_t.clone());
        let out = self.build_predict(&mut g, &b, y, t, label);
        g.value(out).clone()
    }

    fn frame_count(&self) -> usize {
        self.config.t_frames
    }
}

fn randn_like(t: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..t.len())
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(t.shape().to_vec(), data)
}

/// Mean squared reconstruction over a batch with uniformly drawn
/// timesteps; evaluation-only counterpart of the training objective.
pub fn mdm_loss(
    gen: &impl CleanPredictor,
    batch: &[(Tensor, ActionLabel)],
    sched: &NoiseSchedule,
    seed: u64,
) -> f64 {
    assert!(!batch.is_empty(), "mdm_loss: empty batch");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for (y0, label) in batch {
        let t = rng.gen_range(1..=sched.len());
        let eps = randn_like(y0, &mut rng);
        let y_t = diffuse_to_t(y0, t, sched, &eps);
        let pred = gen.predict_clean(&y_t, t, label);
        total += pred
            .data()
            .iter()
            .zip(y0.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    total / batch.len() as f64
}

/// Ancestral reverse sampling in normalized feature space: start from
/// standard normal noise and repeatedly re-sample from the clean-sample
/// posterior q(y_{t-1} | y_t, y0_hat).
pub fn reverse_sample_vec(
    gen: &impl CleanPredictor,
    label: &ActionLabel,
    sched: &NoiseSchedule,
    seed: u64,
) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = vec![gen.frame_count(), POSE_DIM];
    let mut y = Tensor::new(
        shape.clone(),
        (0..shape[0] * shape[1])
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect(),
    );
    for t in (1..=sched.len()).rev() {
        let clean = gen.predict_clean(&y, t, label);
        if t == 1 {
            y = clean;
            break;
        }
        let ab_t = sched.alpha_bar(t);
        let ab_prev = sched.alpha_bar(t - 1);
        let beta = sched.beta(t);
        let c_clean = ab_prev.sqrt() * beta / (1.0 - ab_t);
        let c_noisy = sched.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let var = (1.0 - ab_prev) * beta / (1.0 - ab_t);
        let sd = var.sqrt();
        let data = clean
            .data()
            .iter()
            .zip(y.data())
            .map(|(c, n)| c_clean * c + c_noisy * n + sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        y = Tensor::new(shape.clone(), data);
    }
    y
}

/// Reverse sampling straight to a world-space motion sequence.
pub fn reverse_sample(
    gen: &impl CleanPredictor,
    label: &ActionLabel,
    sched: &NoiseSchedule,
    norm: &NormStats,
    fps: f64,
    seed: u64,
) -> Result<MotionSequence, ModelError> {
    let vecs = reverse_sample_vec(gen, label, sched, seed);
    let mut frames = Vec::with_capacity(vecs.rows());
    for r in 0..vecs.rows() {
        frames.push(pose_devectorize(vecs.row(r), Some(norm))?);
    }
    Ok(MotionSequence::new(
        format!("target-{}-{seed}", label.index),
        fps,
        *label,
        frames,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_decays_below_1e_3() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bar(1000) < 1e-3, "abar_T = {}", s.alpha_bar(1000));
        assert!((s.alpha_bar(1) - s.alpha(1)).abs() < 1e-15);
        for t in 2..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn degenerate_betas_rejected() {
        assert!(make_schedule(100, 0.0, 0.0).is_err());
        assert!(make_schedule(100, 0.5, 0.4).is_err());
        assert!(make_schedule(100, 0.1, 1.0).is_err());
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
    }

    #[test]
    fn tiny_beta_keeps_sample_near_clean() {
        let s = make_schedule(10, 1e-9, 1e-9).unwrap();
        let y0 = Tensor::matrix(2, 3, vec![0.3, -0.8, 1.2, 0.0, 2.0, -1.0]);
        let eps = Tensor::matrix(2, 3, vec![1.0; 6]);
        let y1 = diffuse_to_t(&y0, 1, &s, &eps);
        for (a, b) in y1.data().iter().zip(y0.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }
}
