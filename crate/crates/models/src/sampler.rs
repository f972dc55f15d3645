//! Post-hoc diversity sampler: a conditioning network maps one latent draw
//! through per-branch affine transforms, trained against the frozen
//! in-betweening decoder to spread the decoded set while each branch stays
//! close to the learnable prior.

use crate::nets::Linear;
use crate::vae::{GaussianParams, InbetweenVae, TrainWindow};
use crate::{Binder, ModelError};
use mfp_tensor::{load_checkpoint, save_checkpoint, Graph, ParamStore, Tensor, ValueId};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Per-dimension log-det floor when a branch covariance collapses.
const LOGDET_FLOOR_PER_DIM: f64 = -60.0;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub branches: usize,
    pub latent: usize,
    /// width of each condition feature (start, end, action embeddings)
    pub cond_width: usize,
    pub hidden: usize,
    pub w_div: f64,
    pub w_kl: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            branches: 5,
            latent: 32,
            cond_width: 64,
            hidden: 128,
            w_div: 200.0,
            w_kl: 1.0,
        }
    }
}

/// The affine maps per branch, materialized for one conditioning context.
#[derive(Clone, Debug)]
pub struct BranchMaps {
    /// row-major latent x latent matrices
    pub mats: Vec<Vec<f64>>,
    pub offsets: Vec<Vec<f64>>,
}

pub struct DiversitySampler {
    pub config: SamplerConfig,
    pub store: ParamStore,
    l0: Linear,
    l1: Linear,
}

impl DiversitySampler {
    pub fn init(config: SamplerConfig, seed: u64) -> Result<Self, ModelError> {
        if config.branches < 2 {
            return Err(ModelError::BadConfig(
                "sampler needs at least 2 branches".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dz = config.latent;
        let out = config.branches * (dz * dz + dz);
        let l0 = Linear::init(&mut store, "cond.l0", 3 * config.cond_width, config.hidden, &mut rng);
        // near-zero head: branches start close to the identity map but not
        // exactly equal, otherwise the symmetric start is a saddle the
        // diversity term can never leave
        let l1 = Linear::init_scaled(&mut store, "cond.l1", config.hidden, out, 1e-2, &mut rng);
        Ok(DiversitySampler {
            config,
            store,
            l0,
            l1,
        })
    }

    /// Branch parameter nodes (A_l [dz, dz], b_l [1, dz]) from a [1, 3w]
    /// conditioning row. A_l is the identity plus the learned residual.
    pub fn build_branches(
        &self,
        g: &mut Graph,
        b: &Binder,
        cond: ValueId,
    ) -> Vec<(ValueId, ValueId)> {
        let dz = self.config.latent;
        let h = self.l0.forward(g, b, cond);
        let h = g.gelu(h);
        let packed = self.l1.forward(g, b, h);
        let eye = g.constant(Tensor::eye(dz));
        (0..self.config.branches)
            .map(|l| {
                let base = l * (dz * dz + dz);
                let a_flat = g.slice_cols(packed, base, dz * dz);
                let a = g.reshape(a_flat, vec![dz, dz]);
                let a = g.add(a, eye);
                let off = g.slice_cols(packed, base + dz * dz, dz);
                (a, off)
            })
            .collect()
    }

    /// Materialize the affine maps for a conditioning context.
    pub fn branch_maps(&self, cond: &[f64]) -> BranchMaps {
        let mut g = Graph::new();
        let b = Binder::frozen(&self.store);
        let c = g.constant(Tensor::matrix(1, cond.len(), cond.to_vec()));
        let nodes = self.build_branches(&mut g, &b, c);
        BranchMaps {
            mats: nodes.iter().map(|(a, _)| g.value(*a).data().to_vec()).collect(),
            offsets: nodes.iter().map(|(_, o)| g.value(*o).data().to_vec()).collect(),
        }
    }

    /// z_l = A_l z + b_l for every branch.
    pub fn map_latents(&self, z: &[f64], cond: &[f64]) -> Vec<Vec<f64>> {
        let maps = self.branch_maps(cond);
        map_with(&maps, z)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        save_checkpoint(&self.store, path)?;
        std::fs::write(
            crate::vae::sidecar_path(path),
            serde_json::to_string_pretty(&self.config)?,
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let json = std::fs::read_to_string(crate::vae::sidecar_path(path))?;
        let config: SamplerConfig = serde_json::from_str(&json)?;
        let store = load_checkpoint(path)?;
        let mut model = DiversitySampler::init(config, 0)?;
        for name in model.store.names().map(str::to_string).collect::<Vec<_>>() {
            model.store.set(&name, store.get(&name).clone());
        }
        Ok(model)
    }
}

pub fn map_with(maps: &BranchMaps, z: &[f64]) -> Vec<Vec<f64>> {
    let dz = z.len();
    maps.mats
        .iter()
        .zip(&maps.offsets)
        .map(|(a, off)| {
            let mut out = off.clone();
            for (r, o) in out.iter_mut().enumerate() {
                for c in 0..dz {
                    *o += a[r * dz + c] * z[c];
                }
            }
            out
        })
        .collect()
}

fn log_abs_det(a: &[f64], n: usize) -> Option<f64> {
    let mut lu = a.to_vec();
    let mut acc = 0.0;
    for col in 0..n {
        let mut pivot = col;
        let mut best = lu[col * n + col].abs();
        for r in col + 1..n {
            if lu[r * n + col].abs() > best {
                best = lu[r * n + col].abs();
                pivot = r;
            }
        }
        if best < 1e-300 {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                lu.swap(col * n + j, pivot * n + j);
            }
        }
        let d = lu[col * n + col];
        acc += d.abs().ln();
        for r in col + 1..n {
            let f = lu[r * n + col] / d;
            for j in col + 1..n {
                lu[r * n + j] -= f * lu[col * n + j];
            }
        }
    }
    Some(acc)
}

/// Closed-form KL( N(b, A Aᵀ) || N(mu_p, diag sigma_p²) ). The second value
/// flags a clamped (near-singular) log determinant.
pub fn branch_kl(a: &[f64], b: &[f64], prior: &GaussianParams) -> Result<(f64, bool), ModelError> {
    let dz = prior.mu.len();
    if a.len() != dz * dz || b.len() != dz {
        return Err(ModelError::Invalid("branch_kl: dimension mismatch".into()));
    }
    if prior.sigma.iter().any(|&s| s <= 0.0) {
        return Err(ModelError::Invalid("branch_kl: non-positive prior sigma".into()));
    }
    let mut trace = 0.0;
    for i in 0..dz {
        let mut cov_ii = 0.0;
        for k in 0..dz {
            cov_ii += a[i * dz + k] * a[i * dz + k];
        }
        trace += cov_ii / (prior.sigma[i] * prior.sigma[i]);
    }
    let mut quad = 0.0;
    let mut log_det_prior = 0.0;
    for i in 0..dz {
        let d = b[i] - prior.mu[i];
        quad += d * d / (prior.sigma[i] * prior.sigma[i]);
        log_det_prior += (prior.sigma[i] * prior.sigma[i]).ln();
    }
    let floor = LOGDET_FLOOR_PER_DIM * dz as f64;
    let (log_det_branch, clamped) = match log_abs_det(a, dz) {
        Some(l) => {
            let ld = 2.0 * l;
            (ld.max(floor), ld < floor)
        }
        None => (floor, true),
    };
    let kl = 0.5 * (trace + quad - dz as f64 + log_det_prior - log_det_branch);
    Ok((kl, clamped))
}

/// Minimum pairwise squared distance over a decoded set, brute force.
pub fn min_pairwise_sq(set: &[Vec<f64>]) -> f64 {
    assert!(set.len() >= 2, "need at least two branches");
    let mut best = f64::INFINITY;
    for i in 0..set.len() {
        for j in i + 1..set.len() {
            let d: f64 = set[i]
                .iter()
                .zip(&set[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            best = best.min(d);
        }
    }
    best
}

/// Sampler objective: reward the minimum pairwise decoded distance, keep
/// every branch close to the prior.
pub fn sampler_loss(decoded: &[Vec<f64>], branch_kls: &[f64], w_div: f64, w_kl: f64) -> f64 {
    -w_div * min_pairwise_sq(decoded) + w_kl * branch_kls.iter().sum::<f64>()
}

/// Everything the training loop needs per context, precomputed once since
/// the in-betweening model is frozen.
pub struct PreparedContext {
    pub cond: Vec<f64>,        // concat(F^s, F^e, F^a)
    pub f_start: Tensor,       // [1, d]
    pub f_end: Tensor,
    pub f_action: Tensor,
    pub f_orient: Option<Tensor>,
    pub start_last: Tensor,    // [1, N] normalized boundary frames
    pub end_first: Tensor,
    pub prior: GaussianParams,
}

pub fn prepare_context(vae: &InbetweenVae, w: &TrainWindow) -> PreparedContext {
    let mut g = Graph::new();
    let b = Binder::frozen(&vae.store);
    let start = g.constant(w.start.clone());
    let end = g.constant(w.end.clone());
    let fs = vae.build_context(&mut g, &b, start, crate::vae::ContextSide::Start);
    let fe = vae.build_context(&mut g, &b, end, crate::vae::ContextSide::End);
    let fa = vae.build_action(&mut g, &b, &w.label);
    let fo = vae.build_owm(&mut g, &b, &w.orient_start6, &w.orient_end6);
    let (mu, ls) = vae.build_prior(&mut g, &b, fs, fe, fa);
    let mut cond = g.value(fs).data().to_vec();
    cond.extend_from_slice(g.value(fe).data());
    cond.extend_from_slice(g.value(fa).data());
    let t_start = w.start.rows();
    let n_dim = w.start.cols();
    let start_last = Tensor::matrix(1, n_dim, w.start.row(t_start - 1).to_vec());
    let end_first = Tensor::matrix(1, n_dim, w.end.row(0).to_vec());
    PreparedContext {
        cond,
        f_start: g.value(fs).clone(),
        f_end: g.value(fe).clone(),
        f_action: g.value(fa).clone(),
        f_orient: fo.map(|n| g.value(n).clone()),
        start_last,
        end_first,
        prior: GaussianParams {
            mu: g.value(mu).data().to_vec(),
            sigma: g.value(ls).data().iter().map(|v| v.exp()).collect(),
        },
    }
}

impl DiversitySampler {
    /// Train against the frozen decoder. Aborts if the decoder parameters
    /// change. Returns the per-epoch mean loss.
    pub fn train(
        &mut self,
        vae: &InbetweenVae,
        contexts: &[PreparedContext],
        epochs: usize,
        lr: f64,
        seed: u64,
    ) -> Result<Vec<f64>, ModelError> {
        if contexts.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let decoder_before = vae.store.fingerprint();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut losses = Vec::with_capacity(epochs);
        let mut order: Vec<usize> = (0..contexts.len()).collect();
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for &ci in &order {
                epoch_loss += self.train_one(vae, &contexts[ci], lr, &mut rng)?;
            }
            losses.push(epoch_loss / contexts.len() as f64);
        }
        if vae.store.fingerprint() != decoder_before {
            return Err(ModelError::DecoderChanged);
        }
        Ok(losses)
    }

    fn train_one(
        &mut self,
        vae: &InbetweenVae,
        ctx: &PreparedContext,
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64, ModelError> {
        let dz = self.config.latent;
        let z: Vec<f64> = (0..dz).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();

        let store = std::mem::take(&mut self.store);
        let mut g = Graph::new();
        let sampler_b = Binder::trainable(&store);
        let vae_b = Binder::frozen(&vae.store);

        let cond = g.constant(Tensor::matrix(1, ctx.cond.len(), ctx.cond.clone()));
        let branches = self.build_branches(&mut g, &sampler_b, cond);
        let fs = g.constant(ctx.f_start.clone());
        let fe = g.constant(ctx.f_end.clone());
        let fa = g.constant(ctx.f_action.clone());
        let z_col = g.constant(Tensor::matrix(dz, 1, z.clone()));

        let mut decoded = Vec::with_capacity(branches.len());
        let mut kls = Vec::with_capacity(branches.len());
        for (a, off) in &branches {
            let az = g.matmul(*a, z_col);
            let az = g.reshape(az, vec![dz]);
            let off_flat = g.reshape(*off, vec![dz]);
            let zl = g.add(az, off_flat);
            let fo = ctx.f_orient.as_ref().map(|t| g.constant(t.clone()));
            let sl = g.constant(ctx.start_last.clone());
            let ef = g.constant(ctx.end_first.clone());
            let y = vae.build_decoder(&mut g, &vae_b, fs, fe, fa, zl, fo, sl, ef);
            decoded.push(y);
            kls.push(self.build_branch_kl(&mut g, *a, *off, &ctx.prior));
        }

        // min over pairwise squared distances; values are eager so the
        // argmin pair is known at build time (subgradient through it)
        let mut min_node = None;
        let mut min_val = f64::INFINITY;
        for i in 0..decoded.len() {
            for j in i + 1..decoded.len() {
                let d = g.sub(decoded[i], decoded[j]);
                let sq = g.mul(d, d);
                let s = g.sum(sq);
                let v = g.value(s).data()[0];
                if v < min_val {
                    min_val = v;
                    min_node = Some(s);
                }
            }
        }
        let min_node = min_node.expect("at least two branches");
        let div = g.mul_scalar(min_node, -self.config.w_div);
        let mut kl_sum = kls[0];
        for k in &kls[1..] {
            kl_sum = g.add(kl_sum, *k);
        }
        let kl_term = g.mul_scalar(kl_sum, self.config.w_kl);
        let loss = g.add(div, kl_term);
        let loss_v = g.value(loss).data()[0];
        if !loss_v.is_finite() {
            self.store = store;
            return Err(ModelError::NanLoss {
                step: self.store.step_count(),
                detail: "sampler loss non-finite".into(),
            });
        }
        g.backward(loss)?;
        self.store = store;
        g.accumulate_grads(&mut self.store);
        self.store.adam_step(lr)?;
        Ok(loss_v)
    }

    /// In-graph KL( N(b, A Aᵀ) || diag prior ), differentiable in A and b.
    pub fn build_branch_kl(
        &self,
        g: &mut Graph,
        a: ValueId,
        off: ValueId,
        prior: &GaussianParams,
    ) -> ValueId {
        let dz = self.config.latent;
        let mut w_diag = vec![0.0; dz * dz];
        let mut inv_var = vec![0.0; dz];
        let mut log_det_prior = 0.0;
        for i in 0..dz {
            let v = prior.sigma[i] * prior.sigma[i];
            w_diag[i * dz + i] = 1.0 / v;
            inv_var[i] = 1.0 / v;
            log_det_prior += v.ln();
        }
        let at = g.transpose(a);
        let aat = g.matmul(a, at);
        let wd = g.constant(Tensor::matrix(dz, dz, w_diag));
        let weighted = g.mul(aat, wd);
        let trace = g.sum(weighted);
        let mu_p = g.constant(Tensor::matrix(1, dz, prior.mu.clone()));
        let diff = g.sub(off, mu_p);
        let diff2 = g.mul(diff, diff);
        let ivar = g.constant(Tensor::matrix(1, dz, inv_var));
        let quad_terms = g.mul(diff2, ivar);
        let quad = g.sum(quad_terms);
        let ld = g.log_det(a, LOGDET_FLOOR_PER_DIM * dz as f64 / 2.0);
        let ld2 = g.mul_scalar(ld, -2.0);
        let s = g.add(trace, quad);
        let s = g.add(s, ld2);
        let s = g.add_scalar(s, log_det_prior - dz as f64);
        g.mul_scalar(s, 0.5)
    }
}
