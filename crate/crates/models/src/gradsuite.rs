//! Finite-difference audit of every shipped layer and composite loss on
//! width-8 instances. Backs both the `grad-check` subcommand and the
//! acceptance gate.

use crate::diffusion::{diffuse_to_t, make_schedule, DiffusionConfig, MotionGenerator};
use crate::nets::{periodic_causal_mask, EncoderStack, Mlp, MultiHeadAttention};
use crate::sampler::{prepare_context, DiversitySampler, SamplerConfig};
use crate::vae::{
    build_kl_nodes, extract_window, AblationMode, InbetweenVae, VaeConfig, VaeLossWeights,
};
use crate::Binder;
use mfp_motion::{generate_gait, ActionLabel, DatasetSplit, GaitStart, POSE_DIM};
use mfp_tensor::{grad_check, ParamStore, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
}

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect(),
    )
}

fn tiny_split() -> DatasetSplit {
    let train = vec![
        generate_gait(ActionLabel::new(0, 4), 12, 0.2, 1, GaitStart::default()).unwrap(),
        generate_gait(ActionLabel::new(2, 4), 12, -0.3, 2, GaitStart::default()).unwrap(),
    ];
    DatasetSplit::new(train, vec![]).unwrap()
}

fn width8_vae_config() -> VaeConfig {
    VaeConfig {
        width: 8,
        heads: 4,
        depth: 1,
        ffn: 16,
        latent: 4,
        t_start: 2,
        t_end: 2,
        t_between: 3,
        period: 25,
        num_actions: 4,
        mode: AblationMode::Full,
        coeffs: 2,
    }
}

/// Run the whole audit over `seeds` randomized instances per item.
pub fn gradient_suite(seeds: u64) -> Vec<SuiteEntry> {
    let split = tiny_split();
    let mut out = Vec::new();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(0xA0 + seed);

        // self-attention block behind the periodic causal mask
        {
            let mut store = ParamStore::new();
            let stack = EncoderStack::init(&mut store, "s", 8, 4, 16, 1, &mut rng);
            let x = randn(&mut rng, vec![3, 8], 1.0);
            let mask = periodic_causal_mask(3, 2);
            let report = grad_check(&mut store, 1e-6, |g, s| {
                let b = Binder::trainable(s);
                let xi = g.constant(x.clone());
                let out = stack.forward(g, &b, xi, Some(&mask));
                let sq = g.mul(out, out);
                g.mean(sq)
            });
            out.push(SuiteEntry {
                name: "mhsa-block".into(),
                seed,
                max_rel_err: report.max_rel_err(),
            });
        }

        // cross attention
        {
            let mut store = ParamStore::new();
            let attn = MultiHeadAttention::init(&mut store, "x", 8, 4, &mut rng);
            let q = randn(&mut rng, vec![3, 8], 1.0);
            let kv = randn(&mut rng, vec![4, 8], 1.0);
            let report = grad_check(&mut store, 1e-6, |g, s| {
                let b = Binder::trainable(s);
                let qi = g.constant(q.clone());
                let ki = g.constant(kv.clone());
                let out = attn.forward(g, &b, qi, ki, None);
                let sq = g.mul(out, out);
                g.mean(sq)
            });
            out.push(SuiteEntry {
                name: "mhca".into(),
                seed,
                max_rel_err: report.max_rel_err(),
            });
        }

        // plain mlp
        {
            let mut store = ParamStore::new();
            let mlp = Mlp::init(&mut store, "m", &[5, 8, 3], &mut rng);
            let x = randn(&mut rng, vec![2, 5], 1.0);
            let report = grad_check(&mut store, 1e-6, |g, s| {
                let b = Binder::trainable(s);
                let xi = g.constant(x.clone());
                let y = mlp.forward(g, &b, xi);
                let sq = g.mul(y, y);
                g.mean(sq)
            });
            out.push(SuiteEntry {
                name: "mlp".into(),
                seed,
                max_rel_err: report.max_rel_err(),
            });
        }

        // diagonal-Gaussian KL head on raw (mu, log sigma) parameters
        {
            let mut store = ParamStore::new();
            store.register("mu_q", randn(&mut rng, vec![1, 4], 0.8));
            store.register("ls_q", randn(&mut rng, vec![1, 4], 0.4));
            store.register("mu_p", randn(&mut rng, vec![1, 4], 0.8));
            store.register("ls_p", randn(&mut rng, vec![1, 4], 0.4));
            let report = grad_check(&mut store, 1e-6, |g, s| {
                let b = Binder::trainable(s);
                let mq = b.bind(g, "mu_q");
                let lq = b.bind(g, "ls_q");
                let mp = b.bind(g, "mu_p");
                let lp = b.bind(g, "ls_p");
                build_kl_nodes(g, mq, lq, mp, lp)
            });
            out.push(SuiteEntry {
                name: "kl-head".into(),
                seed,
                max_rel_err: report.max_rel_err(),
            });
        }

        // full weighted ELBO through the width-8 VAE
        {
            let cfg = width8_vae_config();
            let mut vae = InbetweenVae::init(cfg.clone(), split.norm.clone(), 0xB0 + seed);
            let w = extract_window(&split.train[0], 0, &cfg, &split.norm);
            let eps = vec![0.1, -0.2, 0.3, 0.0];
            let weights = VaeLossWeights::default();
            let mut store = std::mem::take(&mut vae.store);
            let report = grad_check(&mut store, 1e-6, |g, s| {
                let b = Binder::trainable(s);
                vae.build_item_loss(g, &b, &w, &eps, &weights).0
            });
            vae.store = store;
            out.push(SuiteEntry {
                name: "elbo-loss".into(),
                seed,
                max_rel_err: report.max_rel_err(),
            });
        }

        // diffusion reconstruction loss through the width-8 generator
        {
            let cfg = DiffusionConfig {
                width: 8,
                heads: 4,
                depth: 1,
                ffn: 16,
                t_frames: 3,
                num_actions: 4,
                steps: 50,
                beta_start: 1e-4,
                beta_end: 0.02,
            };
            let mut gen = MotionGenerator::init(cfg, split.norm.clone(), 0xC0 + seed);
            let sched = make_schedule(50, 1e-4, 0.02).unwrap();
            let y0 = randn(&mut rng, vec![3, POSE_DIM], 1.0);
            let eps = randn(&mut rng, vec![3, POSE_DIM], 1.0);
            let t = 17;
            let y_t = diffuse_to_t(&y0, t, &sched, &eps);
            let label = ActionLabel::new(1, 4);
            let mut store = std::mem::take(&mut gen.store);
            let report = grad_check(&mut store, 1e-6, |g, s| {
                let b = Binder::trainable(s);
                let y_node = g.constant(y_t.clone());
                let pred = gen.build_predict(g, &b, y_node, t, &label);
                let target = g.constant(y0.clone());
                let d = g.sub(pred, target);
                let sq = g.mul(d, d);
                g.sum(sq)
            });
            gen.store = store;
            out.push(SuiteEntry {
                name: "mdm-loss".into(),
                seed,
                max_rel_err: report.max_rel_err(),
            });
        }

        // diversity-sampler objective against the frozen width-8 decoder
        {
            let cfg = width8_vae_config();
            let vae = InbetweenVae::init(cfg.clone(), split.norm.clone(), 0xD0 + seed);
            let w = extract_window(&split.train[1], 0, &cfg, &split.norm);
            let ctx = prepare_context(&vae, &w);
            let mut sampler = DiversitySampler::init(
                SamplerConfig {
                    branches: 2,
                    latent: cfg.latent,
                    cond_width: cfg.width,
                    hidden: 8,
                    w_div: 200.0,
                    w_kl: 1.0,
                },
                0xE0 + seed,
            )
            .unwrap();
            let z: Vec<f64> = (0..cfg.latent)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let mut store = std::mem::take(&mut sampler.store);
            let report = grad_check(&mut store, 1e-6, |g, s| {
                let sb = Binder::trainable(s);
                let vb = Binder::frozen(&vae.store);
                let cond = g.constant(Tensor::matrix(1, ctx.cond.len(), ctx.cond.clone()));
                let branches = sampler.build_branches(g, &sb, cond);
                let fs = g.constant(ctx.f_start.clone());
                let fe = g.constant(ctx.f_end.clone());
                let fa = g.constant(ctx.f_action.clone());
                let z_col = g.constant(Tensor::matrix(cfg.latent, 1, z.clone()));
                let mut decoded = Vec::new();
                let mut kls = Vec::new();
                for (a, off) in &branches {
                    let az = g.matmul(*a, z_col);
                    let az = g.reshape(az, vec![cfg.latent]);
                    let offf = g.reshape(*off, vec![cfg.latent]);
                    let zl = g.add(az, offf);
                    let fo = ctx.f_orient.as_ref().map(|t| g.constant(t.clone()));
                    let sl = g.constant(ctx.start_last.clone());
                    let ef = g.constant(ctx.end_first.clone());
                    decoded.push(vae.build_decoder(g, &vb, fs, fe, fa, zl, fo, sl, ef));
                    kls.push(sampler.build_branch_kl(g, *a, *off, &ctx.prior));
                }
                let d = g.sub(decoded[0], decoded[1]);
                let sq = g.mul(d, d);
                let min_d = g.sum(sq);
                let div = g.mul_scalar(min_d, -200.0);
                let kl_sum = g.add(kls[0], kls[1]);
                g.add(div, kl_sum)
            });
            sampler.store = store;
            out.push(SuiteEntry {
                name: "sampler-loss".into(),
                seed,
                max_rel_err: report.max_rel_err(),
            });
        }

        // cross-entropy through the width-8 classifier encoder
        {
            let mut store = ParamStore::new();
            let enc = crate::nets::SeqEncoder::init(
                &mut store, "c", POSE_DIM, 8, 4, 16, 1, 25, false, &mut rng,
            );
            let head = crate::nets::Linear::init(&mut store, "h", 8, 4, &mut rng);
            let x = randn(&mut rng, vec![4, POSE_DIM], 1.0);
            let report = grad_check(&mut store, 1e-6, |g, s| {
                let b = Binder::trainable(s);
                let xi = g.constant(x.clone());
                let tok = enc.encode(g, &b, xi);
                let logits = head.forward(g, &b, tok);
                g.cross_entropy_mean(logits, &[2])
            });
            out.push(SuiteEntry {
                name: "classifier-ce".into(),
                seed,
                max_rel_err: report.max_rel_err(),
            });
        }
    }
    out
}
