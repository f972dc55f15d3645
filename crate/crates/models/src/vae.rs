//! Action-conditioned in-betweening VAE: prefix-token context encoders, a
//! learnable conditional prior, an orientation-warping module feeding the
//! cross-attention decoder, weighted ELBO training, and stochastic
//! sampling. Three decoder wirings cover the ablation grid.

use crate::nets::{pos_enc_rows, CrossStack, EncoderStack, Linear, Mlp, SeqEncoder};
use crate::{Binder, ModelError};
use mfp_motion::{
    pose_devectorize, pose_vectorize, ActionLabel, DatasetSplit, GroundFrame, MotionSequence,
    NormStats, UnitQuat, JOINT_COUNT, POSE_DIM,
};
use mfp_tensor::{load_checkpoint, save_checkpoint, Graph, ParamStore, Tensor, ValueId};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

const LOG_SIGMA_MIN: f64 = -13.815510557964274; // ln 1e-6
const LOG_SIGMA_MAX: f64 = 13.815510557964274; // ln 1e6

/// Decoder wiring variants of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationMode {
    /// Orientation features through two extractors plus offset regressor.
    Full,
    /// Offset regressor fed the raw orientation difference.
    NoOfe,
    /// Self-attention decoding over the condition tokens, no orientation
    /// module at all.
    PlainAttention,
}

impl AblationMode {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        match s {
            "full" => Ok(AblationMode::Full),
            "no-ofe" => Ok(AblationMode::NoOfe),
            "mhsa" => Ok(AblationMode::PlainAttention),
            other => Err(ModelError::BadConfig(format!(
                "unknown ablation mode '{other}' (full | no-ofe | mhsa)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VaeConfig {
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    pub ffn: usize,
    pub latent: usize,
    pub t_start: usize,
    pub t_end: usize,
    pub t_between: usize,
    pub period: usize,
    pub num_actions: usize,
    pub mode: AblationMode,
    /// temporal coefficient count of the decoder's sine basis
    #[serde(default = "default_coeffs")]
    pub coeffs: usize,
}

fn default_coeffs() -> usize {
    10
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            width: 64,
            heads: 4,
            depth: 2,
            ffn: 128,
            latent: 32,
            t_start: 5,
            t_end: 5,
            t_between: 20,
            period: 25,
            num_actions: 4,
            mode: AblationMode::Full,
            coeffs: 10,
        }
    }
}

/// Diagonal Gaussian (mu, sigma); sigma is clamped to [1e-6, 1e6].
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// z = mu + sigma ⊙ eps.
pub fn reparameterize(g: &GaussianParams, eps: &[f64]) -> Vec<f64> {
    assert_eq!(g.mu.len(), eps.len(), "reparameterize: dim mismatch");
    g.mu
        .iter()
        .zip(&g.sigma)
        .zip(eps)
        .map(|((m, s), e)| m + s * e)
        .collect()
}

/// Closed-form KL between diagonal Gaussians:
/// sum_i [ log(sp_i/sq_i) + (sq_i^2 + (mq_i - mp_i)^2) / (2 sp_i^2) - 1/2 ].
pub fn kl_diag_gaussians(q: &GaussianParams, p: &GaussianParams) -> Result<f64, ModelError> {
    if q.mu.len() != p.mu.len() {
        return Err(ModelError::Invalid("kl: dimension mismatch".into()));
    }
    if q.sigma.iter().chain(&p.sigma).any(|&s| s <= 0.0) {
        return Err(ModelError::Invalid("kl: non-positive sigma".into()));
    }
    let mut kl = 0.0;
    for i in 0..q.mu.len() {
        let (mq, sq, mp, sp) = (q.mu[i], q.sigma[i], p.mu[i], p.sigma[i]);
        kl += (sp / sq).ln() + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5;
    }
    Ok(kl)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct VaeLossWeights {
    pub w_mse: f64,
    pub w_kl: f64,
}

impl Default for VaeLossWeights {
    fn default() -> Self {
        VaeLossWeights {
            w_mse: 100.0,
            w_kl: 0.001,
        }
    }
}

pub fn elbo_scalar(mse: f64, kl: f64, w: &VaeLossWeights) -> f64 {
    w.w_mse * mse + w.w_kl * kl
}

/// Start/end observation pair conditioning an in-betweening, world coords.
#[derive(Clone, Debug)]
pub struct ContextPair {
    pub start: MotionSequence,
    pub end: MotionSequence,
}

#[derive(Clone, Copy, Debug)]
pub enum ContextSide {
    Start,
    End,
}

/// One training example, already canonicalized (anchored at the last start
/// frame) and normalized. The in-between window shares its first frame
/// with the end of the start context and its last frame with the start of
/// the end context, which is what lets boundary gaps train to zero.
#[derive(Clone, Debug)]
pub struct TrainWindow {
    pub start: Tensor,
    pub end: Tensor,
    pub between: Tensor,
    pub orient_start6: [f64; 6],
    pub orient_end6: [f64; 6],
    pub label: ActionLabel,
}

/// Frames needed in a source sequence to cut one window.
pub fn window_span(t_start: usize, t_between: usize, t_end: usize) -> usize {
    t_start + t_between + t_end - 2
}

/// Cut and canonicalize a training window beginning at frame `s0`.
pub fn extract_window(
    seq: &MotionSequence,
    s0: usize,
    cfg: &VaeConfig,
    norm: &NormStats,
) -> TrainWindow {
    let span = window_span(cfg.t_start, cfg.t_between, cfg.t_end);
    assert!(
        s0 + span <= seq.len(),
        "window [{s0}, {}) out of {} frames",
        s0 + span,
        seq.len()
    );
    let anchor = &seq.frames[s0 + cfg.t_start - 1];
    let frame = GroundFrame::from_anchor(anchor);
    let slice_mat = |from: usize, len: usize| {
        let mut data = Vec::with_capacity(len * POSE_DIM);
        for k in from..from + len {
            let local = frame.to_local(&seq.frames[k]);
            data.extend(pose_vectorize(&local, Some(norm)));
        }
        Tensor::matrix(len, POSE_DIM, data)
    };
    let start = slice_mat(s0, cfg.t_start);
    let between = slice_mat(s0 + cfg.t_start - 1, cfg.t_between);
    let end_from = s0 + cfg.t_start + cfg.t_between - 2;
    let end = slice_mat(end_from, cfg.t_end);
    let orient_start6 = frame
        .to_local(&seq.frames[s0 + cfg.t_start - 1])
        .root_orientation
        .to_rot6();
    let orient_end6 = frame
        .to_local(&seq.frames[end_from])
        .root_orientation
        .to_rot6();
    TrainWindow {
        start,
        end,
        between,
        orient_start6,
        orient_end6,
        label: seq.label,
    }
}

pub struct InbetweenVae {
    pub config: VaeConfig,
    pub norm: NormStats,
    pub store: ParamStore,
    enc_start: SeqEncoder,
    enc_end: SeqEncoder,
    enc_between: SeqEncoder,
    action_mlp: Mlp,
    posterior_head: Mlp,
    prior_head: Mlp,
    ofe_start: Option<Mlp>,
    ofe_end: Option<Mlp>,
    offset_reg: Option<Mlp>,
    orient_proj: Option<Linear>,
    z_proj: Linear,
    summary_proj: Linear,
    decoder_cross: Option<CrossStack>,
    decoder_self: Option<EncoderStack>,
    out_head: Linear,
}

impl InbetweenVae {
    pub fn init(config: VaeConfig, norm: NormStats, seed: u64) -> Self {
        let mut config = config;
        config.coeffs = config.coeffs.clamp(1, config.t_between.saturating_sub(1).max(1));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.width;
        let (h, ffn, depth, p) = (config.heads, config.ffn, config.depth, config.period);
        let enc_start = SeqEncoder::init(
            &mut store, "enc_s", POSE_DIM, d, h, ffn, depth, p, false, &mut rng,
        );
        let enc_end = SeqEncoder::init(
            &mut store, "enc_e", POSE_DIM, d, h, ffn, depth, p, false, &mut rng,
        );
        let enc_between = SeqEncoder::init(
            &mut store, "enc_b", POSE_DIM, d, h, ffn, depth, p, true, &mut rng,
        );
        let action_mlp = Mlp::init(&mut store, "enc_a", &[config.num_actions, d, d], &mut rng);
        let posterior_head = Mlp::init(
            &mut store,
            "posterior",
            &[4 * d, d, 2 * config.latent],
            &mut rng,
        );
        let prior_head = Mlp::init(&mut store, "prior", &[3 * d, d, 2 * config.latent], &mut rng);

        let (ofe_start, ofe_end, offset_reg, orient_proj) = match config.mode {
            AblationMode::Full => (
                Some(Mlp::init(&mut store, "ofe_s", &[6, d, d], &mut rng)),
                Some(Mlp::init(&mut store, "ofe_e", &[6, d, d], &mut rng)),
                Some(Mlp::init(&mut store, "offset_reg", &[d, d, d], &mut rng)),
                Some(Linear::init(&mut store, "orient_proj", d, d, &mut rng)),
            ),
            AblationMode::NoOfe => (
                None,
                None,
                Some(Mlp::init(&mut store, "offset_reg", &[6, d, d], &mut rng)),
                Some(Linear::init(&mut store, "orient_proj", d, d, &mut rng)),
            ),
            AblationMode::PlainAttention => (None, None, None, None),
        };
        let z_proj = Linear::init(&mut store, "z_proj", config.latent, d, &mut rng);
        let summary_proj = Linear::init(&mut store, "summary_proj", d, d, &mut rng);
        let (decoder_cross, decoder_self) = match config.mode {
            AblationMode::PlainAttention => (
                None,
                Some(EncoderStack::init(
                    &mut store, "dec", d, h, ffn, depth, &mut rng,
                )),
            ),
            _ => (
                Some(CrossStack::init(&mut store, "dec", d, h, ffn, depth, &mut rng)),
                None,
            ),
        };
        let out_head = Linear::init_scaled(&mut store, "out", d, POSE_DIM, 0.02, &mut rng);
        InbetweenVae {
            config,
            norm,
            store,
            enc_start,
            enc_end,
            enc_between,
            action_mlp,
            posterior_head,
            prior_head,
            ofe_start,
            ofe_end,
            offset_reg,
            orient_proj,
            z_proj,
            summary_proj,
            decoder_cross,
            decoder_self,
            out_head,
        }
    }

    // ---- graph builders (shared by training, sampling, and the sampler
    // crate which binds this model frozen) ----

    pub fn build_context(
        &self,
        g: &mut Graph,
        b: &Binder,
        frames: ValueId,
        side: ContextSide,
    ) -> ValueId {
        match side {
            ContextSide::Start => self.enc_start.encode(g, b, frames),
            ContextSide::End => self.enc_end.encode(g, b, frames),
        }
    }

    pub fn build_between(&self, g: &mut Graph, b: &Binder, frames: ValueId) -> ValueId {
        self.enc_between.encode(g, b, frames)
    }

    pub fn build_action(&self, g: &mut Graph, b: &Binder, label: &ActionLabel) -> ValueId {
        let onehot = g.constant(Tensor::matrix(1, label.num_classes, label.one_hot()));
        self.action_mlp.forward(g, b, onehot)
    }

    /// Orientation offset feature; `None` under plain-attention decoding.
    pub fn build_owm(
        &self,
        g: &mut Graph,
        b: &Binder,
        orient_start6: &[f64; 6],
        orient_end6: &[f64; 6],
    ) -> Option<ValueId> {
        let os = g.constant(Tensor::matrix(1, 6, orient_start6.to_vec()));
        let oe = g.constant(Tensor::matrix(1, 6, orient_end6.to_vec()));
        match self.config.mode {
            AblationMode::Full => {
                let fps = self.ofe_start.as_ref().unwrap().forward(g, b, os);
                let fpe = self.ofe_end.as_ref().unwrap().forward(g, b, oe);
                let disp = g.sub(fpe, fps);
                Some(self.offset_reg.as_ref().unwrap().forward(g, b, disp))
            }
            AblationMode::NoOfe => {
                let disp = g.sub(oe, os);
                Some(self.offset_reg.as_ref().unwrap().forward(g, b, disp))
            }
            AblationMode::PlainAttention => None,
        }
    }

    fn split_gaussian(&self, g: &mut Graph, packed: ValueId) -> (ValueId, ValueId) {
        let dz = self.config.latent;
        let mu = g.slice_cols(packed, 0, dz);
        let ls = g.slice_cols(packed, dz, dz);
        let ls = g.clamp(ls, LOG_SIGMA_MIN, LOG_SIGMA_MAX);
        (mu, ls)
    }

    /// (mu, log sigma) of the approximate posterior from all four features.
    pub fn build_posterior(
        &self,
        g: &mut Graph,
        b: &Binder,
        fs: ValueId,
        fe: ValueId,
        fb: ValueId,
        fa: ValueId,
    ) -> (ValueId, ValueId) {
        let cat = g.concat_cols(&[fs, fe, fb, fa]);
        let packed = self.posterior_head.forward(g, b, cat);
        self.split_gaussian(g, packed)
    }

    pub fn build_prior(
        &self,
        g: &mut Graph,
        b: &Binder,
        fs: ValueId,
        fe: ValueId,
        fa: ValueId,
    ) -> (ValueId, ValueId) {
        let cat = g.concat_cols(&[fs, fe, fa]);
        let packed = self.prior_head.forward(g, b, cat);
        self.split_gaussian(g, packed)
    }

    /// Non-autoregressive decoding. Condition tokens (z, action, start,
    /// end) form the key/value set; queries are positional codes plus the
    /// pooled condition summary and the projected orientation offset. The
    /// decoded tokens parameterize a sine series that vanishes at both
    /// window ends, added onto the straight interpolation between the
    /// pinned boundary frames, so outputs are temporally bandlimited and
    /// boundary-exact by construction. `start_last` and `end_first` are
    /// the normalized boundary frames, [1, N] each.
    #[allow(clippy::too_many_arguments)]
    pub fn build_decoder(
        &self,
        g: &mut Graph,
        b: &Binder,
        fs: ValueId,
        fe: ValueId,
        fa: ValueId,
        z: ValueId,
        f_orient: Option<ValueId>,
        start_last: ValueId,
        end_first: ValueId,
    ) -> ValueId {
        let d = self.config.width;
        let tb = self.config.t_between;
        let k = self.config.coeffs;
        let zr = {
            let dz = self.config.latent;
            let z2 = g.reshape(z, vec![1, dz]);
            self.z_proj.forward(g, b, z2)
        };
        let kv = g.concat_rows(&[zr, fa, fs, fe]);
        let quarter = g.constant(Tensor::matrix(1, 4, vec![0.25; 4]));
        let pooled = g.matmul(quarter, kv);
        let pooled = self.summary_proj.forward(g, b, pooled);
        let pooled = g.reshape(pooled, vec![d]);
        let pos = g.constant(pos_enc_rows(0, k, self.config.period, d));
        let mut q = g.add_row(pos, pooled);
        if let Some(fo) = f_orient {
            let proj = self.orient_proj.as_ref().unwrap().forward(g, b, fo);
            let proj = g.reshape(proj, vec![d]);
            q = g.add_row(q, proj);
        }
        let decoded = match (&self.decoder_cross, &self.decoder_self) {
            (Some(cross), _) => cross.forward(g, b, q, kv),
            (None, Some(stack)) => {
                let seq = g.concat_rows(&[kv, q]);
                let out = stack.forward(g, b, seq, None);
                g.slice_rows(out, 4, k)
            }
            _ => unreachable!("decoder not initialized"),
        };
        let coeffs = self.out_head.forward(g, b, decoded); // [k, N]

        // base: straight interpolation between the boundary frames
        let mut ramp_up = Vec::with_capacity(tb);
        let mut basis = Vec::with_capacity(tb * k);
        for t in 0..tb {
            let u = if tb > 1 { t as f64 / (tb - 1) as f64 } else { 0.0 };
            ramp_up.push(u);
            for ki in 1..=k {
                basis.push((std::f64::consts::PI * ki as f64 * u).sin());
            }
        }
        let down = g.constant(Tensor::matrix(
            tb,
            1,
            ramp_up.iter().map(|u| 1.0 - u).collect(),
        ));
        let up = g.constant(Tensor::matrix(tb, 1, ramp_up));
        let from = g.matmul(down, start_last);
        let to = g.matmul(up, end_first);
        let base = g.add(from, to);
        let basis = g.constant(Tensor::matrix(tb, k, basis));
        let series = g.matmul(basis, coeffs);
        g.add(base, series)
    }

    /// Scalar KL between two diagonal Gaussians given as (mu, log sigma)
    /// node pairs.
    pub fn build_kl(
        &self,
        g: &mut Graph,
        mu_q: ValueId,
        ls_q: ValueId,
        mu_p: ValueId,
        ls_p: ValueId,
    ) -> ValueId {
        build_kl_nodes(g, mu_q, ls_q, mu_p, ls_p)
    }

    /// Full per-item ELBO loss graph from a prepared window. Returns
    /// (loss, mse, kl) nodes.
    pub fn build_item_loss(
        &self,
        g: &mut Graph,
        b: &Binder,
        w: &TrainWindow,
        eps: &[f64],
        weights: &VaeLossWeights,
    ) -> (ValueId, ValueId, ValueId) {
        let start = g.constant(w.start.clone());
        let end = g.constant(w.end.clone());
        let between = g.constant(w.between.clone());
        let fs = self.build_context(g, b, start, ContextSide::Start);
        let fe = self.build_context(g, b, end, ContextSide::End);
        let fb = self.build_between(g, b, between);
        let fa = self.build_action(g, b, &w.label);
        let (mu_q, ls_q) = self.build_posterior(g, b, fs, fe, fb, fa);
        let (mu_p, ls_p) = self.build_prior(g, b, fs, fe, fa);
        let sigma_q = g.exp(ls_q);
        let eps_node = g.constant(Tensor::matrix(1, eps.len(), eps.to_vec()));
        let noise = g.mul(sigma_q, eps_node);
        let z = g.add(mu_q, noise);
        let dz = self.config.latent;
        let z = g.reshape(z, vec![dz]);
        let f_orient = self.build_owm(g, b, &w.orient_start6, &w.orient_end6);
        let start_last = g.slice_rows(start, self.config.t_start - 1, 1);
        let end_first = g.slice_rows(end, 0, 1);
        let decoded = self.build_decoder(g, b, fs, fe, fa, z, f_orient, start_last, end_first);
        let diff = g.sub(decoded, between);
        let sq = g.mul(diff, diff);
        let mse = g.mean(sq);
        let kl = self.build_kl(g, mu_q, ls_q, mu_p, ls_p);
        let wm = g.mul_scalar(mse, weights.w_mse);
        let wk = g.mul_scalar(kl, weights.w_kl);
        let loss = g.add(wm, wk);
        (loss, mse, kl)
    }

    // ---- public ops ----

    fn frames_tensor(&self, seq: &MotionSequence) -> Tensor {
        let mut data = Vec::with_capacity(seq.len() * POSE_DIM);
        for f in &seq.frames {
            data.extend(pose_vectorize(f, Some(&self.norm)));
        }
        Tensor::matrix(seq.len(), POSE_DIM, data)
    }

    pub fn encode_context(&self, seq: &MotionSequence, side: ContextSide) -> Vec<f64> {
        let mut g = Graph::new();
        let b = Binder::frozen(&self.store);
        let frames = g.constant(self.frames_tensor(seq));
        let out = self.build_context(&mut g, &b, frames, side);
        g.value(out).data().to_vec()
    }

    pub fn encode_inbetween(&self, seq: &MotionSequence) -> Vec<f64> {
        let mut g = Graph::new();
        let b = Binder::frozen(&self.store);
        let frames = g.constant(self.frames_tensor(seq));
        let out = self.build_between(&mut g, &b, frames);
        g.value(out).data().to_vec()
    }

    pub fn encode_action(&self, label: &ActionLabel) -> Result<Vec<f64>, ModelError> {
        self.check_label(label)?;
        let mut g = Graph::new();
        let b = Binder::frozen(&self.store);
        let out = self.build_action(&mut g, &b, label);
        Ok(g.value(out).data().to_vec())
    }

    fn check_label(&self, label: &ActionLabel) -> Result<(), ModelError> {
        if label.index >= self.config.num_actions {
            return Err(ModelError::LabelOutOfRange {
                index: label.index,
                num_classes: self.config.num_actions,
            });
        }
        Ok(())
    }

    /// Orientation offset for a pair of global orientations.
    pub fn owm_offset(&self, o_start: &UnitQuat, o_end: &UnitQuat) -> Option<Vec<f64>> {
        let mut g = Graph::new();
        let b = Binder::frozen(&self.store);
        let out = self.build_owm(&mut g, &b, &o_start.to_rot6(), &o_end.to_rot6())?;
        Some(g.value(out).data().to_vec())
    }

    /// The displacement fed to the offset regressor (extractor outputs
    /// differenced); exposed so the zero-displacement invariant is
    /// checkable. `None` unless both extractors exist.
    pub fn owm_feature_displacement(&self, o_start: &UnitQuat, o_end: &UnitQuat) -> Option<Vec<f64>> {
        let (ofe_s, ofe_e) = (self.ofe_start.as_ref()?, self.ofe_end.as_ref()?);
        let mut g = Graph::new();
        let b = Binder::frozen(&self.store);
        let os = g.constant(Tensor::matrix(1, 6, o_start.to_rot6().to_vec()));
        let oe = g.constant(Tensor::matrix(1, 6, o_end.to_rot6().to_vec()));
        let fps = ofe_s.forward(&mut g, &b, os);
        let fpe = ofe_e.forward(&mut g, &b, oe);
        let disp = g.sub(fpe, fps);
        Some(g.value(disp).data().to_vec())
    }

    fn gaussian_from_nodes(&self, g: &Graph, mu: ValueId, ls: ValueId) -> GaussianParams {
        GaussianParams {
            mu: g.value(mu).data().to_vec(),
            sigma: g.value(ls).data().iter().map(|v| v.exp()).collect(),
        }
    }

    /// Learnable prior for a world-space context pair.
    pub fn prior_params(
        &self,
        ctx: &ContextPair,
        label: &ActionLabel,
    ) -> Result<GaussianParams, ModelError> {
        self.check_label(label)?;
        let (w, _) = self.canonical_context(ctx)?;
        let mut g = Graph::new();
        let b = Binder::frozen(&self.store);
        let start = g.constant(w.0);
        let end = g.constant(w.1);
        let fs = self.build_context(&mut g, &b, start, ContextSide::Start);
        let fe = self.build_context(&mut g, &b, end, ContextSide::End);
        let fa = self.build_action(&mut g, &b, label);
        let (mu, ls) = self.build_prior(&mut g, &b, fs, fe, fa);
        Ok(self.gaussian_from_nodes(&g, mu, ls))
    }

    /// Approximate posterior from a prepared training window.
    pub fn posterior_params(&self, w: &TrainWindow) -> GaussianParams {
        let mut g = Graph::new();
        let b = Binder::frozen(&self.store);
        let start = g.constant(w.start.clone());
        let end = g.constant(w.end.clone());
        let between = g.constant(w.between.clone());
        let fs = self.build_context(&mut g, &b, start, ContextSide::Start);
        let fe = self.build_context(&mut g, &b, end, ContextSide::End);
        let fb = self.build_between(&mut g, &b, between);
        let fa = self.build_action(&mut g, &b, &w.label);
        let (mu, ls) = self.build_posterior(&mut g, &b, fs, fe, fb, fa);
        self.gaussian_from_nodes(&g, mu, ls)
    }

    /// Canonicalized, normalized context matrices plus the anchor frame
    /// and orientation 6-vectors: ((start, end, o_s6, o_e6), anchor).
    #[allow(clippy::type_complexity)]
    fn canonical_context(
        &self,
        ctx: &ContextPair,
    ) -> Result<((Tensor, Tensor, [f64; 6], [f64; 6]), GroundFrame), ModelError> {
        if ctx.start.is_empty() || ctx.end.is_empty() {
            return Err(ModelError::Invalid("empty context sequence".into()));
        }
        if ctx.start.frames[0].joint_count() != JOINT_COUNT
            || ctx.end.frames[0].joint_count() != JOINT_COUNT
        {
            return Err(ModelError::Invalid(format!(
                "context skeleton must have {JOINT_COUNT} joints"
            )));
        }
        let anchor = GroundFrame::from_anchor(ctx.start.frames.last().unwrap());
        let mat = |frames: &[mfp_motion::Pose]| {
            let mut data = Vec::with_capacity(frames.len() * POSE_DIM);
            for f in frames {
                data.extend(pose_vectorize(&anchor.to_local(f), Some(&self.norm)));
            }
            Tensor::matrix(frames.len(), POSE_DIM, data)
        };
        let start = mat(&ctx.start.frames);
        let end = mat(&ctx.end.frames);
        let o_s6 = anchor
            .to_local(ctx.start.frames.last().unwrap())
            .root_orientation
            .to_rot6();
        let o_e6 = anchor.to_local(&ctx.end.frames[0]).root_orientation.to_rot6();
        Ok(((start, end, o_s6, o_e6), anchor))
    }

    /// Concatenated (start, end, action) condition embeddings for a
    /// world-space context; the conditioning input of the diversity
    /// sampler.
    pub fn context_features(
        &self,
        ctx: &ContextPair,
        label: &ActionLabel,
    ) -> Result<Vec<f64>, ModelError> {
        self.check_label(label)?;
        let ((start, end, _, _), _) = self.canonical_context(ctx)?;
        let mut g = Graph::new();
        let b = Binder::frozen(&self.store);
        let start = g.constant(start);
        let end = g.constant(end);
        let fs = self.build_context(&mut g, &b, start, ContextSide::Start);
        let fe = self.build_context(&mut g, &b, end, ContextSide::End);
        let fa = self.build_action(&mut g, &b, label);
        let mut out = g.value(fs).data().to_vec();
        out.extend_from_slice(g.value(fe).data());
        out.extend_from_slice(g.value(fa).data());
        Ok(out)
    }

    /// Decode an in-betweening for a world-space context; output is in
    /// world coordinates. `t_between` must equal the trained length.
    pub fn decode(
        &self,
        ctx: &ContextPair,
        label: &ActionLabel,
        z: &[f64],
        t_between: usize,
    ) -> Result<MotionSequence, ModelError> {
        self.check_label(label)?;
        if t_between != self.config.t_between {
            return Err(ModelError::LengthMismatch {
                requested: t_between,
                available: vec![self.config.t_between],
            });
        }
        if z.len() != self.config.latent {
            return Err(ModelError::Invalid(format!(
                "latent length {} != {}",
                z.len(),
                self.config.latent
            )));
        }
        let ((start, end, o_s6, o_e6), anchor) = self.canonical_context(ctx)?;
        let mut g = Graph::new();
        let b = Binder::frozen(&self.store);
        let start = g.constant(start);
        let end = g.constant(end);
        let fs = self.build_context(&mut g, &b, start, ContextSide::Start);
        let fe = self.build_context(&mut g, &b, end, ContextSide::End);
        let fa = self.build_action(&mut g, &b, label);
        let z_node = g.constant(Tensor::vector(z.to_vec()));
        let f_orient = self.build_owm(&mut g, &b, &o_s6, &o_e6);
        let n_start = g.value(start).rows();
        let start_last = g.slice_rows(start, n_start - 1, 1);
        let end_first = g.slice_rows(end, 0, 1);
        let out = self.build_decoder(&mut g, &b, fs, fe, fa, z_node, f_orient, start_last, end_first);
        let out = g.value(out);
        let mut frames = Vec::with_capacity(t_between);
        for r in 0..t_between {
            let local = pose_devectorize(out.row(r), Some(&self.norm))?;
            frames.push(anchor.to_world(&local));
        }
        mfp_motion::stabilize_foot_contacts(&mut frames);
        Ok(MotionSequence::new(
            format!("inbetween-{}", ctx.start.id),
            ctx.start.fps,
            *label,
            frames,
        ))
    }

    /// Draw z from the learnable prior and decode.
    pub fn sample_inbetween(
        &self,
        ctx: &ContextPair,
        label: &ActionLabel,
        seed: u64,
    ) -> Result<MotionSequence, ModelError> {
        let prior = self.prior_params(ctx, label)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps: Vec<f64> = (0..self.config.latent)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let z = reparameterize(&prior, &eps);
        self.decode(ctx, label, &z, self.config.t_between)
    }

    // ---- training ----

    /// One optimizer step over a batch of windows; returns the mean loss.
    pub fn train_step(
        &mut self,
        batch: &[TrainWindow],
        weights: &VaeLossWeights,
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut total = 0.0;
        for w in batch {
            let eps: Vec<f64> = (0..self.config.latent)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let store = std::mem::take(&mut self.store);
            let mut g = Graph::new();
            let binder = Binder::trainable(&store);
            let (loss, _, _) = self.build_item_loss(&mut g, &binder, w, &eps, weights);
            let loss_v = g.value(loss).data()[0];
            if !loss_v.is_finite() {
                let detail = match g.assert_all_finite() {
                    Err(e) => e.to_string(),
                    Ok(()) => "loss non-finite".to_string(),
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

    /// Epoch loop over random windows from the training split.
    pub fn train(
        &mut self,
        split: &DatasetSplit,
        weights: &VaeLossWeights,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        seed: u64,
    ) -> Result<Vec<f64>, ModelError> {
        let span = window_span(self.config.t_start, self.config.t_between, self.config.t_end);
        let usable: Vec<&MotionSequence> =
            split.train.iter().filter(|s| s.len() >= span).collect();
        if usable.is_empty() {
            return Err(ModelError::Invalid(format!(
                "no training sequence has the {span} frames a window needs"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut losses = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let mut windows: Vec<TrainWindow> = usable
                .iter()
                .map(|s| {
                    let s0 = rng.gen_range(0..=s.len() - span);
                    extract_window(s, s0, &self.config, &self.norm)
                })
                .collect();
            windows.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0;
            for chunk in windows.chunks(batch_size) {
                epoch_loss += self.train_step(chunk, weights, lr, &mut rng)?;
                batches += 1;
            }
            losses.push(epoch_loss / batches as f64);
        }
        Ok(losses)
    }

    /// Mean reconstruction MSE (posterior mean latent) over windows, in
    /// normalized feature space.
    pub fn reconstruction_mse(&self, windows: &[TrainWindow]) -> f64 {
        let weights = VaeLossWeights::default();
        let eps = vec![0.0; self.config.latent];
        let b_store = &self.store;
        let mut total = 0.0;
        for w in windows {
            let mut g = Graph::new();
            let binder = Binder::frozen(b_store);
            let (_, mse, _) = self.build_item_loss(&mut g, &binder, w, &eps, &weights);
            total += g.value(mse).data()[0];
        }
        total / windows.len() as f64
    }

    // ---- persistence ----

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        save_checkpoint(&self.store, path)?;
        let sidecar = VaeSidecar {
            config: self.config.clone(),
            norm: self.norm.clone(),
        };
        let json = serde_json::to_string_pretty(&sidecar)?;
        std::fs::write(sidecar_path(path), json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let json = std::fs::read_to_string(sidecar_path(path))?;
        let sidecar: VaeSidecar = serde_json::from_str(&json)?;
        let store = load_checkpoint(path)?;
        let mut model = InbetweenVae::init(sidecar.config, sidecar.norm, 0);
        for name in model.store.names().map(str::to_string).collect::<Vec<_>>() {
            model.store.set(&name, store.get(&name).clone());
        }
        Ok(model)
    }
}

/// In-graph closed-form KL between diagonal Gaussians parameterized as
/// (mu, log sigma) rows.
pub fn build_kl_nodes(
    g: &mut Graph,
    mu_q: ValueId,
    ls_q: ValueId,
    mu_p: ValueId,
    ls_p: ValueId,
) -> ValueId {
    let d_ls = g.sub(ls_p, ls_q);
    let two_lsq = g.mul_scalar(ls_q, 2.0);
    let var_q = g.exp(two_lsq);
    let diff = g.sub(mu_q, mu_p);
    let diff2 = g.mul(diff, diff);
    let num = g.add(var_q, diff2);
    let neg_two_lsp = g.mul_scalar(ls_p, -2.0);
    let inv_var_p = g.exp(neg_two_lsp);
    let frac = g.mul(num, inv_var_p);
    let frac = g.mul_scalar(frac, 0.5);
    let terms = g.add(d_ls, frac);
    let terms = g.add_scalar(terms, -0.5);
    g.sum(terms)
}

#[derive(Serialize, Deserialize)]
struct VaeSidecar {
    config: VaeConfig,
    norm: NormStats,
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    std::path::PathBuf::from(p)
}
