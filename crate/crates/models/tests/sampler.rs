mod common;

use common::{small_vae_config, tiny_gait_split, windows_for};
use mfp_models::sampler::{
    branch_kl, map_with, min_pairwise_sq, prepare_context, sampler_loss, BranchMaps,
    DiversitySampler, SamplerConfig,
};
use mfp_models::vae::{GaussianParams, InbetweenVae};
use mfp_models::Binder;
use mfp_tensor::{grad_check, Graph, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn small_sampler(latent: usize, cond_width: usize, branches: usize) -> DiversitySampler {
    DiversitySampler::init(
        SamplerConfig {
            branches,
            latent,
            cond_width,
            hidden: 32,
            w_div: 200.0,
            w_kl: 1.0,
        },
        5,
    )
    .unwrap()
}

#[test]
fn identity_maps_pass_latents_through() {
    let dz = 6;
    let mut eye = vec![0.0; dz * dz];
    for i in 0..dz {
        eye[i * dz + i] = 1.0;
    }
    let maps = BranchMaps {
        mats: vec![eye.clone(); 4],
        offsets: vec![vec![0.0; dz]; 4],
    };
    let z: Vec<f64> = (0..dz).map(|i| i as f64 * 0.3 - 1.0).collect();
    for branch in map_with(&maps, &z) {
        assert_eq!(branch, z);
    }
}

#[test]
fn fresh_sampler_branches_start_near_but_not_at_identity() {
    let s = small_sampler(6, 8, 4);
    let z: Vec<f64> = (0..6).map(|i| i as f64 * 0.3 - 1.0).collect();
    let cond = vec![0.2; 24];
    let mapped = s.map_latents(&z, &cond);
    for branch in &mapped {
        for (a, b) in branch.iter().zip(&z) {
            assert!((a - b).abs() < 0.2, "fresh branch strayed too far");
        }
    }
    // symmetry is broken from the start
    assert_ne!(mapped[0], mapped[1]);
}

#[test]
fn zero_matrix_branch_is_constant() {
    let dz = 4;
    let maps = BranchMaps {
        mats: vec![vec![0.0; dz * dz]; 2],
        offsets: vec![vec![1.5; dz], vec![-0.5; dz]],
    };
    for z in [[0.0; 4], [3.0, -1.0, 2.0, 0.5]] {
        let out = map_with(&maps, &z);
        assert!(out[0].iter().all(|&v| v == 1.5));
        assert!(out[1].iter().all(|&v| v == -0.5));
    }
}

#[test]
fn branch_covariance_matches_monte_carlo() {
    let dz = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a: Vec<f64> = (0..dz * dz).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..dz).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let maps = BranchMaps {
        mats: vec![a.clone()],
        offsets: vec![b.clone()],
    };
    let n = 100_000;
    let mut mean = vec![0.0; dz];
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..dz).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let out = map_with(&maps, &z).remove(0);
        for i in 0..dz {
            mean[i] += out[i] / n as f64;
        }
        samples.push(out);
    }
    let mut cov = vec![0.0; dz * dz];
    for s in &samples {
        for i in 0..dz {
            for j in 0..dz {
                cov[i * dz + j] += (s[i] - mean[i]) * (s[j] - mean[j]) / n as f64;
            }
        }
    }
    // target covariance A Aᵀ
    let mut target = vec![0.0; dz * dz];
    for i in 0..dz {
        for j in 0..dz {
            for k in 0..dz {
                target[i * dz + j] += a[i * dz + k] * a[j * dz + k];
            }
        }
    }
    let fro_diff: f64 = cov
        .iter()
        .zip(&target)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let fro: f64 = target.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(fro_diff / fro < 0.02, "relative Frobenius error {}", fro_diff / fro);
}

#[test]
fn branch_kl_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..10 {
        let dz = 2;
        // well-conditioned random A: identity plus small perturbation
        let mut a = vec![0.0; dz * dz];
        for i in 0..dz {
            for j in 0..dz {
                a[i * dz + j] = if i == j { 1.0 } else { 0.0 } + rng.gen_range(-0.3..0.3);
            }
        }
        let b: Vec<f64> = (0..dz).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let prior = GaussianParams {
            mu: (0..dz).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            sigma: (0..dz).map(|_| rng.gen_range(0.6..1.5)).collect(),
        };
        let (closed, clamped) = branch_kl(&a, &b, &prior).unwrap();
        assert!(!clamped);

        // MC estimate of E_r[log r(z) - log p(z)] via z = A e + b
        let n = 100_000;
        let log_det_cov = {
            // log det(A Aᵀ)
            let det = a[0] * a[3] - a[1] * a[2];
            2.0 * det.abs().ln()
        };
        let inv = {
            let det = a[0] * a[3] - a[1] * a[2];
            [a[3] / det, -a[1] / det, -a[2] / det, a[0] / det]
        };
        let mut acc = 0.0;
        let mut acc_sq = 0.0;
        for _ in 0..n {
            let e: Vec<f64> = (0..dz).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let z = [
                a[0] * e[0] + a[1] * e[1] + b[0],
                a[2] * e[0] + a[3] * e[1] + b[1],
            ];
            // log r(z): Gaussian with mean b, cov AAᵀ
            let d = [z[0] - b[0], z[1] - b[1]];
            let w = [inv[0] * d[0] + inv[1] * d[1], inv[2] * d[0] + inv[3] * d[1]];
            let quad_r = w[0] * w[0] + w[1] * w[1];
            let log_r = -0.5 * quad_r - 0.5 * log_det_cov;
            let mut log_p = 0.0;
            for i in 0..dz {
                let dd = (z[i] - prior.mu[i]) / prior.sigma[i];
                log_p += -0.5 * dd * dd - prior.sigma[i].ln();
            }
            let term = log_r - log_p;
            acc += term;
            acc_sq += term * term;
        }
        let mc = acc / n as f64;
        let var = (acc_sq / n as f64 - mc * mc).max(0.0);
        let se = (var / n as f64).sqrt();
        assert!(
            (closed - mc).abs() <= 3.0 * se + 1e-10,
            "trial {trial}: closed {closed}, mc {mc}, se {se}"
        );
    }
}

#[test]
fn min_pairwise_matches_brute_force_for_three() {
    let set = vec![
        vec![0.0, 0.0],
        vec![3.0, 4.0],  // dist sq 25 to first
        vec![0.0, 1.0],  // dist sq 1 to first, 18 to second
    ];
    assert_eq!(min_pairwise_sq(&set), 1.0);
    let kls = [0.2, 0.3, 0.1];
    let loss = sampler_loss(&set, &kls, 200.0, 1.0);
    assert!((loss - (-200.0 * 1.0 + 0.6)).abs() < 1e-12);
}

#[test]
fn identical_outputs_and_prior_branches_give_zero_loss() {
    let set = vec![vec![0.5; 4]; 3];
    assert_eq!(min_pairwise_sq(&set), 0.0);
    let loss = sampler_loss(&set, &[0.0, 0.0, 0.0], 200.0, 1.0);
    assert_eq!(loss, 0.0);
}

/// With two nearly collapsed branches, the min-pairwise objective pushes
/// them apart about three times harder than a mean-pairwise one would:
/// the whole gradient lands on the collapsed pair.
#[test]
fn duplication_awareness_of_the_min_objective() {
    let eps = 0.05;
    // the third branch sits equidistant from the collapsed pair along the
    // probe direction, so far-pair terms cancel at first order
    let far = vec![eps / 2.0, 10.0];
    let a = vec![0.0, 0.0];
    let set = |shift: f64| vec![a.clone(), vec![eps + shift, 0.0], far.clone()];

    let min_loss = |s: &Vec<Vec<f64>>| -min_pairwise_sq(s);
    let mean_loss = |s: &Vec<Vec<f64>>| {
        let mut total = 0.0;
        let mut pairs = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                total += s[i]
                    .iter()
                    .zip(&s[j])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>();
                pairs += 1.0;
            }
        }
        -total / pairs
    };
    let h = 1e-6;
    let fd = |f: &dyn Fn(&Vec<Vec<f64>>) -> f64| (f(&set(h)) - f(&set(-h))) / (2.0 * h);
    let g_min = fd(&min_loss);
    let g_mean = fd(&mean_loss);
    // both push the near-duplicate away (negative gradient along +x)
    assert!(g_min < 0.0 && g_mean < 0.0);
    assert!(
        g_min.abs() > g_mean.abs(),
        "min {g_min} should exceed mean {g_mean} in magnitude"
    );
}

#[test]
fn in_graph_branch_kl_matches_closed_form() {
    let s = small_sampler(4, 8, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a: Vec<f64> = {
        let mut m = vec![0.0; 16];
        for i in 0..4 {
            for j in 0..4 {
                m[i * 4 + j] = if i == j { 1.0 } else { 0.0 } + rng.gen_range(-0.2..0.2);
            }
        }
        m
    };
    let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let prior = GaussianParams {
        mu: (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        sigma: (0..4).map(|_| rng.gen_range(0.5..1.5)).collect(),
    };
    let (closed, _) = branch_kl(&a, &b, &prior).unwrap();
    let mut g = Graph::new();
    let an = g.constant(Tensor::matrix(4, 4, a));
    let bn = g.constant(Tensor::matrix(1, 4, b));
    let kl_node = s.build_branch_kl(&mut g, an, bn, &prior);
    let in_graph = g.value(kl_node).data()[0];
    assert!(
        (closed - in_graph).abs() < 1e-10,
        "closed {closed} vs graph {in_graph}"
    );
}

#[test]
fn sampler_training_leaves_decoder_untouched_and_spreads_branches() {
    let split = tiny_gait_split(3, 40);
    let cfg = small_vae_config();
    let mut vae = InbetweenVae::init(cfg.clone(), split.norm.clone(), 11);
    // a short VAE fit so decoding depends on z in a structured way
    vae.train(&split, &Default::default(), 3, 1e-3, 8, 1).unwrap();

    let windows = windows_for(&split, &cfg, &split.train, 0);
    let contexts: Vec<_> = windows.iter().take(4).map(|w| prepare_context(&vae, w)).collect();
    let mut sampler = DiversitySampler::init(
        SamplerConfig {
            branches: 3,
            latent: cfg.latent,
            cond_width: cfg.width,
            hidden: 32,
            w_div: 200.0,
            w_kl: 1.0,
        },
        3,
    )
    .unwrap();
    let before = vae.store.fingerprint();
    let losses = sampler.train(&vae, &contexts, 3, 1e-2, 7).unwrap();
    assert_eq!(vae.store.fingerprint(), before, "decoder drifted");
    assert!(losses.iter().all(|l| l.is_finite()));
    // diversity objective dropped (more negative = more spread)
    assert!(
        losses.last().unwrap() < losses.first().unwrap(),
        "{losses:?}"
    );

    // mapped latents now differ across branches
    let z = vec![0.1; cfg.latent];
    let mapped = sampler.map_latents(&z, &contexts[0].cond);
    let d: f64 = mapped[0]
        .iter()
        .zip(&mapped[1])
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    assert!(d > 1e-6, "branches still collapsed: {d}");
}

#[test]
fn sampler_objective_gradients_match_finite_differences() {
    let split = tiny_gait_split(2, 40);
    let cfg = small_vae_config();
    let vae = InbetweenVae::init(cfg.clone(), split.norm.clone(), 15);
    let windows = windows_for(&split, &cfg, &split.train, 0);
    let ctx = prepare_context(&vae, &windows[0]);
    let mut sampler = DiversitySampler::init(
        SamplerConfig {
            branches: 2,
            latent: cfg.latent,
            cond_width: cfg.width,
            hidden: 16,
            w_div: 200.0,
            w_kl: 1.0,
        },
        21,
    )
    .unwrap();
    // nudge the head off its zero init so branches differ and the argmin
    // pair is stable under the probe
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let head = sampler.store.get("cond.l1.w").clone();
    let mut head_data = head.data().to_vec();
    for v in head_data.iter_mut() {
        *v += rng.gen_range(-0.05..0.05);
    }
    sampler
        .store
        .set("cond.l1.w", Tensor::new(head.shape().to_vec(), head_data));

    let z: Vec<f64> = (0..cfg.latent).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
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
        let kl_term = g.mul_scalar(kl_sum, 1.0);
        g.add(div, kl_term)
    });
    sampler.store = store;
    assert!(report.pass(1e-3), "{:?}", report.worst());
}
