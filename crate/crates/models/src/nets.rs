//! Shared sequence-network blocks: linear/MLP layers, multi-head self and
//! cross attention with pre-norm residual wiring, periodic positional
//! encodings, and the periodic causal mask.

use crate::Binder;
use mfp_tensor::{Graph, ParamStore, Tensor, ValueId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn randn_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
        .collect();
    Tensor::new(shape, data)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::init_scaled(store, name, in_dim, out_dim, (1.0 / in_dim as f64).sqrt(), rng)
    }

    /// Weight std override; output heads use a small scale so fresh models
    /// start near zero in normalized space.
    pub fn init_scaled(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        store.register(&format!("{name}.w"), randn_tensor(rng, vec![in_dim, out_dim], std));
        store.register(&format!("{name}.b"), Tensor::zeros(vec![out_dim]));
        Linear {
            name: name.to_string(),
            in_dim,
            out_dim,
        }
    }

    /// `x` is [T, in_dim] (or an in_dim vector treated as one row).
    pub fn forward(&self, g: &mut Graph, b: &Binder, x: ValueId) -> ValueId {
        let w = b.bind(g, &format!("{}.w", self.name));
        let bias = b.bind(g, &format!("{}.b", self.name));
        let x2 = if g.value(x).shape().len() == 1 {
            let n = g.value(x).len();
            g.reshape(x, vec![1, n])
        } else {
            x
        };
        let y = g.matmul(x2, w);
        g.add_row(y, bias)
    }
}

/// Affine layers with GELU between; the final layer stays linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn init(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(widths.len() >= 2, "mlp needs at least input and output widths");
        let layers = (0..widths.len() - 1)
            .map(|i| Linear::init(store, &format!("{name}.l{i}"), widths[i], widths[i + 1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binder, x: ValueId) -> ValueId {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, b, h);
            if i + 1 < self.layers.len() {
                h = g.gelu(h);
            }
        }
        h
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }
}

/// Sinusoidal encoding of `t mod period`; exactly periodic.
pub fn periodic_pos_enc(t: usize, period: usize, d: usize) -> Vec<f64> {
    assert!(period >= 1, "period must be >= 1");
    let tm = (t % period) as f64;
    let mut v = vec![0.0; d];
    for i in 0..d / 2 {
        let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
        v[2 * i] = (tm * rate).sin();
        v[2 * i + 1] = (tm * rate).cos();
    }
    if d % 2 == 1 {
        let i = d / 2;
        let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
        v[d - 1] = (tm * rate).sin();
    }
    v
}

/// Rows t0..t0+rows of the periodic encoding as a [rows, d] tensor.
pub fn pos_enc_rows(t0: usize, rows: usize, period: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * d);
    for t in t0..t0 + rows {
        data.extend(periodic_pos_enc(t, period, d));
    }
    Tensor::matrix(rows, d, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    None,
    PeriodicCausal,
}

/// Additive attention mask: 0 allows, -inf forbids, negative integers bias
/// distant stride periods down.
#[derive(Clone, Debug)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub period: usize,
    pub rows: usize,
    pub matrix: Vec<f64>,
}

/// Future positions are forbidden; allowed positions get bias
/// -floor((i - j) / period), so closer periods score higher.
pub fn periodic_causal_mask(t: usize, period: usize) -> MaskSpec {
    assert!(t >= 1 && period >= 1);
    let mut m = vec![0.0; t * t];
    for i in 0..t {
        for j in 0..t {
            m[i * t + j] = if j > i {
                f64::NEG_INFINITY
            } else {
                -(((i - j) / period) as f64)
            };
        }
    }
    MaskSpec {
        kind: MaskKind::PeriodicCausal,
        period,
        rows: t,
        matrix: m,
    }
}

impl MaskSpec {
    /// Extend a T-frame mask for a prefix summary token at position 0:
    /// the token row and column stay unmasked so it can read every frame.
    pub fn extend_for_prefix(&self) -> MaskSpec {
        let t = self.rows;
        let n = t + 1;
        let mut m = vec![0.0; n * n];
        for i in 0..t {
            for j in 0..t {
                m[(i + 1) * n + (j + 1)] = self.matrix[i * t + j];
            }
        }
        MaskSpec {
            kind: self.kind,
            period: self.period,
            rows: n,
            matrix: m,
        }
    }
}

/// Multi-head attention; self-attention when `kv` is the same node as the
/// query input.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(dim % heads == 0, "width {dim} not divisible by {heads} heads");
        MultiHeadAttention {
            q: Linear::init(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::init(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::init(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::init(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Binder,
        query: ValueId,
        kv: ValueId,
        mask: Option<&MaskSpec>,
    ) -> ValueId {
        self.forward_with_probs(g, b, query, kv, mask).0
    }

    /// Also returns the per-head attention probability nodes; test hooks
    /// assert row normalization on them.
    pub fn forward_with_probs(
        &self,
        g: &mut Graph,
        b: &Binder,
        query: ValueId,
        kv: ValueId,
        mask: Option<&MaskSpec>,
    ) -> (ValueId, Vec<ValueId>) {
        assert_eq!(
            g.value(query).cols(),
            self.dim,
            "attention: query width {} vs model width {}",
            g.value(query).cols(),
            self.dim
        );
        assert_eq!(
            g.value(kv).cols(),
            self.dim,
            "attention: kv width {} vs model width {}",
            g.value(kv).cols(),
            self.dim
        );
        let tq = g.value(query).rows();
        if let Some(m) = mask {
            assert_eq!(
                m.rows,
                tq,
                "attention: mask for {} rows applied to {} query rows",
                m.rows,
                tq
            );
            assert_eq!(
                g.value(kv).rows(),
                tq,
                "attention: periodic-causal mask requires self attention"
            );
        }
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let qp = self.q.forward(g, b, query);
        let kp = self.k.forward(g, b, kv);
        let vp = self.v.forward(g, b, kv);
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(qp, h * hd, hd);
            let kh = g.slice_cols(kp, h * hd, hd);
            let vh = g.slice_cols(vp, h * hd, hd);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.mul_scalar(scores, scale);
            let p = g.softmax_rows_masked(scores, mask.map(|m| m.matrix.as_slice()));
            probs.push(p);
            outs.push(g.matmul(p, vh));
        }
        let cat = g.concat_cols(&outs);
        (self.o.forward(g, b, cat), probs)
    }
}

#[derive(Clone, Debug)]
struct LayerNorm {
    name: String,
}

impl LayerNorm {
    fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        store.register(&format!("{name}.g"), Tensor::new(vec![dim], vec![1.0; dim]));
        store.register(&format!("{name}.b"), Tensor::zeros(vec![dim]));
        LayerNorm {
            name: name.to_string(),
        }
    }

    fn forward(&self, g: &mut Graph, b: &Binder, x: ValueId) -> ValueId {
        let gain = b.bind(g, &format!("{}.g", self.name));
        let bias = b.bind(g, &format!("{}.b", self.name));
        g.layer_norm_rows(x, gain, bias)
    }
}

/// Pre-norm residual block: x + attn(ln(x)), then x + ffn(ln(x)).
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: Mlp,
}

impl EncoderBlock {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        EncoderBlock {
            ln1: LayerNorm::init(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::init(store, &format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::init(store, &format!("{name}.ln2"), dim),
            ffn: Mlp::init(store, &format!("{name}.ffn"), &[dim, ffn_hidden, dim], rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binder, x: ValueId, mask: Option<&MaskSpec>) -> ValueId {
        let n = self.ln1.forward(g, b, x);
        let a = self.attn.forward(g, b, n, n, mask);
        let x = g.add(x, a);
        let n = self.ln2.forward(g, b, x);
        let f = self.ffn.forward(g, b, n);
        g.add(x, f)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub blocks: Vec<EncoderBlock>,
}

impl EncoderStack {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        EncoderStack {
            blocks: (0..depth)
                .map(|i| EncoderBlock::init(store, &format!("{name}.blk{i}"), dim, heads, ffn_hidden, rng))
                .collect(),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binder, mut x: ValueId, mask: Option<&MaskSpec>) -> ValueId {
        for blk in &self.blocks {
            x = blk.forward(g, b, x, mask);
        }
        x
    }
}

/// Pre-norm cross-attention block: q + mhca(ln(q), kv), then q + ffn(ln(q)).
#[derive(Clone, Debug)]
pub struct CrossBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: Mlp,
}

impl CrossBlock {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        CrossBlock {
            ln1: LayerNorm::init(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::init(store, &format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::init(store, &format!("{name}.ln2"), dim),
            ffn: Mlp::init(store, &format!("{name}.ffn"), &[dim, ffn_hidden, dim], rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binder, q: ValueId, kv: ValueId) -> ValueId {
        let n = self.ln1.forward(g, b, q);
        let a = self.attn.forward(g, b, n, kv, None);
        let q = g.add(q, a);
        let n = self.ln2.forward(g, b, q);
        let f = self.ffn.forward(g, b, n);
        g.add(q, f)
    }
}

#[derive(Clone, Debug)]
pub struct CrossStack {
    pub blocks: Vec<CrossBlock>,
}

impl CrossStack {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        CrossStack {
            blocks: (0..depth)
                .map(|i| CrossBlock::init(store, &format!("{name}.blk{i}"), dim, heads, ffn_hidden, rng))
                .collect(),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binder, mut q: ValueId, kv: ValueId) -> ValueId {
        for blk in &self.blocks {
            q = blk.forward(g, b, q, kv);
        }
        q
    }
}

/// Prefix-token sequence encoder: embed frames, add periodic positional
/// encoding, prepend a learnable token, run the self-attention stack, and
/// return the transformed token as the sequence embedding.
#[derive(Clone, Debug)]
pub struct SeqEncoder {
    embed: Linear,
    token_name: String,
    stack: EncoderStack,
    pub dim: usize,
    pub period: usize,
    pub causal: bool,
}

impl SeqEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        depth: usize,
        period: usize,
        causal: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let token_name = format!("{name}.tok");
        store.register(&token_name, randn_tensor(rng, vec![1, dim], 0.02));
        SeqEncoder {
            embed: Linear::init(store, &format!("{name}.embed"), in_dim, dim, rng),
            token_name,
            stack: EncoderStack::init(store, name, dim, heads, ffn_hidden, depth, rng),
            dim,
            period,
            causal,
        }
    }

    /// `frames` is [T, in_dim]; returns the [1, dim] token embedding node.
    pub fn encode(&self, g: &mut Graph, b: &Binder, frames: ValueId) -> ValueId {
        let t = g.value(frames).rows();
        let x = self.embed.forward(g, b, frames);
        let pos = g.constant(pos_enc_rows(0, t, self.period, self.dim));
        let x = g.add(x, pos);
        let tok = b.bind(g, &self.token_name);
        let seq = g.concat_rows(&[tok, x]);
        let mask = if self.causal {
            Some(periodic_causal_mask(t, self.period).extend_for_prefix())
        } else {
            None
        };
        let out = self.stack.forward(g, b, seq, mask.as_ref());
        g.slice_rows(out, 0, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pos_enc_is_periodic_and_bounded() {
        let a = periodic_pos_enc(0, 25, 64);
        let b = periodic_pos_enc(25, 25, 64);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn mask_layout() {
        let m = periodic_causal_mask(7, 3);
        assert_eq!(m.matrix[5 * 7 + 6], f64::NEG_INFINITY);
        assert_eq!(m.matrix[5 * 7 + 5], 0.0);
        assert_eq!(m.matrix[6 * 7 + 0], -2.0); // floor(6/3)
    }

    #[test]
    fn single_entry_mask() {
        let m = periodic_causal_mask(1, 25);
        assert_eq!(m.matrix, vec![0.0]);
    }
}
