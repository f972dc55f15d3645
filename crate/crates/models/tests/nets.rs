use mfp_models::nets::{
    periodic_causal_mask, periodic_pos_enc, EncoderStack, Linear, Mlp, MultiHeadAttention,
};
use mfp_models::Binder;
use mfp_tensor::{grad_check, Graph, ParamStore, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect(),
    )
}

fn manual_linear(x: &[f64], w: &Tensor, b: &Tensor, rows: usize) -> Vec<f64> {
    let (ind, outd) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![0.0; rows * outd];
    for r in 0..rows {
        for o in 0..outd {
            let mut acc = b.data()[o];
            for i in 0..ind {
                acc += x[r * ind + i] * w.data()[i * outd + o];
            }
            y[r * outd + o] = acc;
        }
    }
    y
}

#[test]
fn single_token_attention_is_value_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::init(&mut store, "a", 8, 4, &mut rng);
    let x = randn(&mut rng, vec![1, 8], 1.0);
    let mut g = Graph::new();
    let b = Binder::frozen(&store);
    let xi = g.constant(x.clone());
    let out = attn.forward(&mut g, &b, xi, xi, None);
    // weight 1 on the only token: out = Wo(Wv x + bv) + bo
    let v = manual_linear(x.data(), store.get("a.v.w"), store.get("a.v.b"), 1);
    let expect = manual_linear(&v, store.get("a.o.w"), store.get("a.o.b"), 1);
    for (got, want) in g.value(out).data().iter().zip(&expect) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn causal_mask_blocks_future_influence() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::init(&mut store, "a", 8, 4, &mut rng);
    let t = 6;
    let mask = periodic_causal_mask(t, 25);
    let x = randn(&mut rng, vec![t, 8], 1.0);
    let run = |input: &Tensor| {
        let mut g = Graph::new();
        let b = Binder::frozen(&store);
        let xi = g.constant(input.clone());
        let out = attn.forward(&mut g, &b, xi, xi, Some(&mask));
        g.value(out).clone()
    };
    let base = run(&x);
    for perturbed_pos in 1..t {
        let mut x2 = x.clone();
        for c in 0..8 {
            x2.data_mut()[perturbed_pos * 8 + c] += 0.5;
        }
        let out2 = run(&x2);
        for row in 0..perturbed_pos {
            for c in 0..8 {
                assert_eq!(
                    base.at2(row, c).to_bits(),
                    out2.at2(row, c).to_bits(),
                    "row {row} changed after perturbing {perturbed_pos}"
                );
            }
        }
    }
}

#[test]
fn attention_rows_sum_to_one_over_random_inputs() {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::init(&mut store, "a", 8, 4, &mut rng);
        let t = 5;
        let mask = periodic_causal_mask(t, 2);
        let x = randn(&mut rng, vec![t, 8], 2.0);
        let mut g = Graph::new();
        let b = Binder::frozen(&store);
        let xi = g.constant(x);
        let (_, probs) = attn.forward_with_probs(&mut g, &b, xi, xi, Some(&mask));
        for p in probs {
            let m = g.value(p);
            for r in 0..t {
                let s: f64 = m.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "seed {seed} row {r} sums to {s}");
            }
        }
    }
}

#[test]
fn cross_attention_single_kv_token_broadcasts_it() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::init(&mut store, "a", 8, 4, &mut rng);
    let q = randn(&mut rng, vec![7, 8], 1.0);
    let kv = randn(&mut rng, vec![1, 8], 1.0);
    let mut g = Graph::new();
    let b = Binder::frozen(&store);
    let qi = g.constant(q);
    let ki = g.constant(kv.clone());
    let out = attn.forward(&mut g, &b, qi, ki, None);
    assert_eq!(g.value(out).shape(), &[7, 8]);
    let v = manual_linear(kv.data(), store.get("a.v.w"), store.get("a.v.b"), 1);
    let expect = manual_linear(&v, store.get("a.o.w"), store.get("a.o.b"), 1);
    for r in 0..7 {
        for c in 0..8 {
            assert!((g.value(out).at2(r, c) - expect[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn cross_attention_preserves_query_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::init(&mut store, "a", 8, 4, &mut rng);
    let q = randn(&mut rng, vec![40, 8], 1.0);
    let kv = randn(&mut rng, vec![4, 8], 1.0);
    let mut g = Graph::new();
    let b = Binder::frozen(&store);
    let qi = g.constant(q);
    let ki = g.constant(kv);
    let out = attn.forward(&mut g, &b, qi, ki, None);
    assert_eq!(g.value(out).shape(), &[40, 8]);
}

#[test]
fn cross_attention_is_permutation_invariant_in_kv() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::init(&mut store, "a", 8, 2, &mut rng);
    let q = randn(&mut rng, vec![3, 8], 1.0);
    let kv = randn(&mut rng, vec![4, 8], 1.0);
    let mut permuted_data = Vec::new();
    for r in [2usize, 0, 3, 1] {
        permuted_data.extend_from_slice(kv.row(r));
    }
    let kv_perm = Tensor::matrix(4, 8, permuted_data);
    let run = |kv_t: &Tensor| {
        let mut g = Graph::new();
        let b = Binder::frozen(&store);
        let qi = g.constant(q.clone());
        let ki = g.constant(kv_t.clone());
        let out = attn.forward(&mut g, &b, qi, ki, None);
        g.value(out).clone()
    };
    let a = run(&kv);
    let b2 = run(&kv_perm);
    for (x, y) in a.data().iter().zip(b2.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn positional_encoding_distinguishes_neighbors() {
    let a = periodic_pos_enc(3, 25, 64);
    let b = periodic_pos_enc(4, 25, 64);
    let d: f64 = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    assert!(d > 0.1, "encodings too close: {d}");
}

#[test]
fn mlp_identity_and_zero_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let mlp = Mlp::init(&mut store, "m", &[4, 4], &mut rng);
    store.set("m.l0.w", Tensor::eye(4));
    store.set("m.l0.b", Tensor::zeros(vec![4]));
    let mut g = Graph::new();
    let b = Binder::frozen(&store);
    let x = g.constant(Tensor::matrix(1, 4, vec![0.3, -1.0, 2.0, 0.0]));
    let y = mlp.forward(&mut g, &b, x);
    assert_eq!(g.value(y).data(), &[0.3, -1.0, 2.0, 0.0]);

    // zero input through a zero-bias two-layer net stays zero
    let mut store2 = ParamStore::new();
    let mlp2 = Mlp::init(&mut store2, "m", &[4, 8, 4], &mut rng);
    let mut g2 = Graph::new();
    let b2 = Binder::frozen(&store2);
    let x0 = g2.constant(Tensor::matrix(1, 4, vec![0.0; 4]));
    let y0 = mlp2.forward(&mut g2, &b2, x0);
    for &v in g2.value(y0).data() {
        assert_eq!(v, 0.0);
    }
}

#[test]
fn mhsa_block_gradients_match_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
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
        assert!(report.pass(1e-3), "seed {seed}: {:?}", report.worst());
    }
}

#[test]
fn mhca_gradients_match_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
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
        assert!(report.pass(1e-3), "seed {seed}: {:?}", report.worst());
    }
}

#[test]
fn mlp_gradients_match_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
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
        assert!(report.pass(1e-3), "seed {seed}: {:?}", report.worst());
    }
}

#[test]
fn linear_rejects_shape_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let lin = Linear::init(&mut store, "l", 4, 2, &mut rng);
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        let mut g = Graph::new();
        let b = Binder::frozen(&store);
        let x = g.constant(Tensor::matrix(1, 3, vec![0.0; 3]));
        lin.forward(&mut g, &b, x);
    }));
    assert!(result.is_err());
}
