use crate::store::ParamStore;
use crate::tensor::{matmul, matmul_abt_acc, matmul_atb_acc, Tensor};
use crate::TensorError;
use std::collections::BTreeMap;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;
const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    /// Broadcast-add a vector to every row of a 2-D tensor.
    AddRow(usize, usize),
    Exp(usize),
    Ln(usize),
    Tanh(usize),
    Gelu(usize),
    Clamp(usize, f64, f64),
    /// Row-wise softmax; masks are applied at record time, so the stored
    /// probabilities already reflect them.
    SoftmaxRows(usize),
    SumAll(usize),
    MeanAll(usize),
    ConcatRows(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
        len: usize,
    },
    Reshape(usize),
    LayerNormRows {
        x: usize,
        gain: usize,
        bias: usize,
    },
    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    CrossEntropyMean {
        logits: usize,
        targets: Vec<usize>,
    },
    /// log|det(A)| of a square matrix, floored at `floor` (zero gradient
    /// when the floor is active).
    LogDet {
        x: usize,
        floor: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::AddRow(..) => "add_row",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::Clamp(..) => "clamp",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Reshape(..) => "reshape",
            Op::LayerNormRows { .. } => "layer_norm",
            Op::CrossEntropyMean { .. } => "cross_entropy",
            Op::LogDet { .. } => "log_det",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Vec<f64>>,
    /// Set when the leaf was bound from a ParamStore.
    param: Option<String>,
}

/// A define-by-run computation tape. Ops evaluate eagerly; `backward`
/// fills gradients for every node reachable from a scalar output.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor) -> ValueId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            param: None,
        });
        ValueId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> ValueId {
        self.push(Op::Leaf, t)
    }

    /// Alias of [`Graph::input`]; reads better for non-trainable values.
    pub fn constant(&mut self, t: Tensor) -> ValueId {
        self.input(t)
    }

    /// Bind a named parameter from the store as a leaf. Gradients flowing
    /// into this node are written back by [`Graph::accumulate_grads`].
    pub fn param(&mut self, store: &ParamStore, name: &str) -> ValueId {
        let t = store.get(name).clone();
        let id = self.push(Op::Leaf, t);
        self.nodes[id.0].param = Some(name.to_string());
        id
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scan every node for non-finite entries; names the first offender.
    pub fn assert_all_finite(&self) -> Result<(), TensorError> {
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.value.all_finite() {
                return Err(TensorError::NonFinite {
                    index: i,
                    op: n.op.name().to_string(),
                });
            }
        }
        Ok(())
    }

    // ---- elementwise ----

    fn binary_same_shape(&mut self, a: ValueId, b: ValueId, op_name: &str) {
        assert_eq!(
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape(),
            "{op_name}: shape mismatch {:?} vs {:?}",
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape()
        );
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.binary_same_shape(a, b, "add");
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        self.push(Op::Add(a.0, b.0), Tensor::new(shape, data))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.binary_same_shape(a, b, "sub");
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        self.push(Op::Sub(a.0, b.0), Tensor::new(shape, data))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.binary_same_shape(a, b, "mul");
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        self.push(Op::Mul(a.0, b.0), Tensor::new(shape, data))
    }

    pub fn add_scalar(&mut self, a: ValueId, c: f64) -> ValueId {
        let t = self.map_unary(a, |x| x + c);
        self.push(Op::AddScalar(a.0), t)
    }

    pub fn mul_scalar(&mut self, a: ValueId, c: f64) -> ValueId {
        let t = self.map_unary(a, |x| x * c);
        self.push(Op::MulScalar(a.0, c), t)
    }

    fn map_unary(&self, a: ValueId, f: impl Fn(f64) -> f64) -> Tensor {
        let v = &self.nodes[a.0].value;
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
    }

    pub fn exp(&mut self, a: ValueId) -> ValueId {
        let t = self.map_unary(a, f64::exp);
        self.push(Op::Exp(a.0), t)
    }

    pub fn ln(&mut self, a: ValueId) -> ValueId {
        let t = self.map_unary(a, f64::ln);
        self.push(Op::Ln(a.0), t)
    }

    pub fn tanh(&mut self, a: ValueId) -> ValueId {
        let t = self.map_unary(a, f64::tanh);
        self.push(Op::Tanh(a.0), t)
    }

    pub fn gelu(&mut self, a: ValueId) -> ValueId {
        let t = self.map_unary(a, |x| {
            0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
        });
        self.push(Op::Gelu(a.0), t)
    }

    pub fn clamp(&mut self, a: ValueId, lo: f64, hi: f64) -> ValueId {
        assert!(lo <= hi, "clamp: lo {lo} > hi {hi}");
        let t = self.map_unary(a, |x| x.clamp(lo, hi));
        self.push(Op::Clamp(a.0, lo, hi), t)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(
            va.shape().len() == 2 && vb.shape().len() == 2,
            "matmul: both operands must be 2-D, got {:?} and {:?}",
            va.shape(),
            vb.shape()
        );
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (k2, n) = (vb.shape()[0], vb.shape()[1]);
        assert_eq!(
            k, k2,
            "matmul: inner dims differ, {:?} vs {:?}",
            va.shape(),
            vb.shape()
        );
        let data = matmul(va.data(), vb.data(), m, k, n);
        self.push(Op::MatMul(a.0, b.0), Tensor::matrix(m, n, data))
    }

    pub fn transpose(&mut self, a: ValueId) -> ValueId {
        let v = &self.nodes[a.0].value;
        assert_eq!(v.shape().len(), 2, "transpose: need 2-D, got {:?}", v.shape());
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = v.data()[i * c + j];
            }
        }
        self.push(Op::Transpose(a.0), Tensor::matrix(c, r, data))
    }

    /// `a` is [r, c] (or a c-vector treated as one row), `v` is a c-vector
    /// added to every row.
    pub fn add_row(&mut self, a: ValueId, v: ValueId) -> ValueId {
        let (va, vv) = (&self.nodes[a.0].value, &self.nodes[v.0].value);
        let c = va.cols();
        assert_eq!(
            vv.len(),
            c,
            "add_row: row width {} vs vector length {}",
            c,
            vv.len()
        );
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, y) in row.iter_mut().zip(vv.data()) {
                *x += y;
            }
        }
        let shape = va.shape().to_vec();
        self.push(Op::AddRow(a.0, v.0), Tensor::new(shape, data))
    }

    // ---- softmax / normalization ----

    pub fn softmax_rows(&mut self, x: ValueId) -> ValueId {
        self.softmax_rows_masked(x, None)
    }

    /// Softmax over each row after adding `mask` (same r×c layout) to the
    /// scores. Rows with every position masked out are rejected.
    pub fn softmax_rows_masked(&mut self, x: ValueId, mask: Option<&[f64]>) -> ValueId {
        let v = &self.nodes[x.0].value;
        let (r, c) = (v.rows(), v.cols());
        if let Some(m) = mask {
            assert_eq!(
                m.len(),
                r * c,
                "softmax_rows: mask length {} does not match {}x{}",
                m.len(),
                r,
                c
            );
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &v.data()[i * c..(i + 1) * c];
            let mut scores: Vec<f64> = row.to_vec();
            if let Some(m) = mask {
                for (s, &mv) in scores.iter_mut().zip(&m[i * c..(i + 1) * c]) {
                    *s += mv;
                }
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(
                max > f64::NEG_INFINITY,
                "softmax_rows: row {i} has every position masked"
            );
            let mut sum = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for (o, s) in out[i * c..(i + 1) * c].iter_mut().zip(&scores) {
                *o = s / sum;
            }
        }
        let shape = v.shape().to_vec();
        self.push(Op::SoftmaxRows(x.0), Tensor::new(shape, out))
    }

    pub fn layer_norm_rows(&mut self, x: ValueId, gain: ValueId, bias: ValueId) -> ValueId {
        let (vx, vg, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
        );
        let (r, c) = (vx.rows(), vx.cols());
        assert!(
            vg.len() == c && vb.len() == c,
            "layer_norm: gain/bias length {}/{} vs width {}",
            vg.len(),
            vb.len(),
            c
        );
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &vx.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv * vg.data()[j] + vb.data()[j];
            }
        }
        let shape = vx.shape().to_vec();
        self.push(
            Op::LayerNormRows {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
            },
            Tensor::new(shape, out),
        )
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: ValueId) -> ValueId {
        let s = self.nodes[a.0].value.data().iter().sum();
        self.push(Op::SumAll(a.0), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: ValueId) -> ValueId {
        let v = &self.nodes[a.0].value;
        assert!(!v.is_empty(), "mean: empty tensor");
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Op::MeanAll(a.0), Tensor::scalar(s))
    }

    // ---- shaping ----

    pub fn concat_rows(&mut self, parts: &[ValueId]) -> ValueId {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let c = self.nodes[parts[0].0].value.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(
                v.cols(),
                c,
                "concat_rows: width mismatch {} vs {}",
                v.cols(),
                c
            );
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        self.push(
            Op::ConcatRows(parts.iter().map(|p| p.0).collect()),
            Tensor::matrix(rows, c, data),
        )
    }

    pub fn slice_rows(&mut self, a: ValueId, start: usize, len: usize) -> ValueId {
        let v = &self.nodes[a.0].value;
        let (r, c) = (v.rows(), v.cols());
        assert!(
            start + len <= r,
            "slice_rows: [{start}, {}) out of {r} rows",
            start + len
        );
        let data = v.data()[start * c..(start + len) * c].to_vec();
        self.push(Op::SliceRows { x: a.0, start, len }, Tensor::matrix(len, c, data))
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> ValueId {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let r = self.nodes[parts[0].0].value.rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let v = &self.nodes[p.0].value;
                assert_eq!(v.rows(), r, "concat_cols: row mismatch {} vs {}", v.rows(), r);
                v.cols()
            })
            .collect();
        let c: usize = widths.iter().sum();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                let v = &self.nodes[p.0].value;
                data[i * c + off..i * c + off + w].copy_from_slice(&v.data()[i * w..(i + 1) * w]);
                off += w;
            }
        }
        self.push(
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
            Tensor::matrix(r, c, data),
        )
    }

    pub fn slice_cols(&mut self, a: ValueId, start: usize, len: usize) -> ValueId {
        let v = &self.nodes[a.0].value;
        let (r, c) = (v.rows(), v.cols());
        assert!(
            start + len <= c,
            "slice_cols: [{start}, {}) out of {c} cols",
            start + len
        );
        let mut data = vec![0.0; r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&v.data()[i * c + start..i * c + start + len]);
        }
        self.push(Op::SliceCols { x: a.0, start, len }, Tensor::matrix(r, len, data))
    }

    pub fn reshape(&mut self, a: ValueId, shape: Vec<usize>) -> ValueId {
        let v = &self.nodes[a.0].value;
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            v.len(),
            "reshape: {:?} ({} elems) cannot become {:?}",
            v.shape(),
            v.len(),
            shape
        );
        let data = v.data().to_vec();
        self.push(Op::Reshape(a.0), Tensor::new(shape, data))
    }

    // ---- losses / specials ----

    /// Mean cross-entropy of target class indices under row-wise softmax
    /// of `logits` [batch, classes].
    pub fn cross_entropy_mean(&mut self, logits: ValueId, targets: &[usize]) -> ValueId {
        let v = &self.nodes[logits.0].value;
        let (b, c) = (v.rows(), v.cols());
        assert_eq!(
            targets.len(),
            b,
            "cross_entropy: {} targets for {} rows",
            targets.len(),
            b
        );
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < c, "cross_entropy: target {t} out of {c} classes");
            let row = &v.data()[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let logsum = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            total += logsum - row[t];
        }
        self.push(
            Op::CrossEntropyMean {
                logits: logits.0,
                targets: targets.to_vec(),
            },
            Tensor::scalar(total / b as f64),
        )
    }

    /// log|det(A)| for a square matrix, floored at `floor`.
    pub fn log_det(&mut self, a: ValueId, floor: f64) -> ValueId {
        let v = &self.nodes[a.0].value;
        assert!(
            v.shape().len() == 2 && v.shape()[0] == v.shape()[1],
            "log_det: need a square matrix, got {:?}",
            v.shape()
        );
        let n = v.shape()[0];
        let (lu, perm, ok) = lu_decompose(v.data(), n);
        let raw = if ok {
            let mut s = 0.0;
            for i in 0..n {
                s += lu[i * n + i].abs().ln();
            }
            s
        } else {
            f64::NEG_INFINITY
        };
        let _ = perm;
        let val = raw.max(floor);
        self.push(Op::LogDet { x: a.0, floor }, Tensor::scalar(val))
    }

    // ---- backward ----

    /// Reverse pass from a scalar output. Gradients accumulate additively,
    /// so a leaf reachable along k paths receives the sum of k terms.
    pub fn backward(&mut self, out: ValueId) -> Result<(), TensorError> {
        let shape = self.nodes[out.0].value.shape().to_vec();
        if self.nodes[out.0].value.len() != 1 {
            return Err(TensorError::NonScalarBackward(shape));
        }
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
        self.nodes[out.0].grad = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let g = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn grad_buf(&mut self, idx: usize) -> &mut Vec<f64> {
        let len = self.nodes[idx].value.len();
        self.nodes[idx].grad.get_or_insert_with(|| vec![0.0; len])
    }

    fn add_to_grad(&mut self, idx: usize, contrib: &[f64]) {
        let buf = self.grad_buf(idx);
        for (b, c) in buf.iter_mut().zip(contrib) {
            *b += c;
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.add_to_grad(a, g);
                self.add_to_grad(b, g);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.add_to_grad(a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.add_to_grad(b, &neg);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[b].value.data())
                    .map(|(gv, bv)| gv * bv)
                    .collect();
                let gb: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[a].value.data())
                    .map(|(gv, av)| gv * av)
                    .collect();
                self.add_to_grad(a, &ga);
                self.add_to_grad(b, &gb);
            }
            Op::AddScalar(a) => {
                let a = *a;
                self.add_to_grad(a, g);
            }
            Op::MulScalar(a, c) => {
                let (a, c) = (*a, *c);
                let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.add_to_grad(a, &ga);
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a].value.shape()[0], self.nodes[a].value.shape()[1]);
                let n = self.nodes[b].value.shape()[1];
                // dA = G · Bᵀ ; dB = Aᵀ · G
                let mut ga = vec![0.0; m * k];
                matmul_abt_acc(g, self.nodes[b].value.data(), m, n, k, &mut ga);
                let mut gb = vec![0.0; k * n];
                matmul_atb_acc(self.nodes[a].value.data(), g, m, k, n, &mut gb);
                self.add_to_grad(a, &ga);
                self.add_to_grad(b, &gb);
            }
            Op::Transpose(a) => {
                let a = *a;
                let (r, c) = (
                    self.nodes[a].value.shape()[0],
                    self.nodes[a].value.shape()[1],
                );
                // g has shape [c, r]
                let mut ga = vec![0.0; r * c];
                for i2 in 0..c {
                    for j in 0..r {
                        ga[j * c + i2] = g[i2 * r + j];
                    }
                }
                self.add_to_grad(a, &ga);
            }
            Op::AddRow(a, v) => {
                let (a, v) = (*a, *v);
                let c = self.nodes[v].value.len();
                self.add_to_grad(a, g);
                let mut gv = vec![0.0; c];
                for row in g.chunks(c) {
                    for (s, x) in gv.iter_mut().zip(row) {
                        *s += x;
                    }
                }
                self.add_to_grad(v, &gv);
            }
            Op::Exp(a) => {
                let a = *a;
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[i].value.data())
                    .map(|(gv, ov)| gv * ov)
                    .collect();
                self.add_to_grad(a, &ga);
            }
            Op::Ln(a) => {
                let a = *a;
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[a].value.data())
                    .map(|(gv, xv)| gv / xv)
                    .collect();
                self.add_to_grad(a, &ga);
            }
            Op::Tanh(a) => {
                let a = *a;
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[i].value.data())
                    .map(|(gv, ov)| gv * (1.0 - ov * ov))
                    .collect();
                self.add_to_grad(a, &ga);
            }
            Op::Gelu(a) => {
                let a = *a;
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[a].value.data())
                    .map(|(gv, &x)| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                self.add_to_grad(a, &ga);
            }
            Op::Clamp(a, lo, hi) => {
                let (a, lo, hi) = (*a, *lo, *hi);
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[a].value.data())
                    .map(|(gv, &x)| if x > lo && x < hi { *gv } else { 0.0 })
                    .collect();
                self.add_to_grad(a, &ga);
            }
            Op::SoftmaxRows(x) => {
                let x = *x;
                let out = &self.nodes[i].value;
                let (r, c) = (out.rows(), out.cols());
                let mut ga = vec![0.0; r * c];
                for row in 0..r {
                    let p = &out.data()[row * c..(row + 1) * c];
                    let gr = &g[row * c..(row + 1) * c];
                    let dot: f64 = p.iter().zip(gr).map(|(pv, gv)| pv * gv).sum();
                    for j in 0..c {
                        ga[row * c + j] = p[j] * (gr[j] - dot);
                    }
                }
                self.add_to_grad(x, &ga);
            }
            Op::SumAll(a) => {
                let a = *a;
                let ga = vec![g[0]; self.nodes[a].value.len()];
                self.add_to_grad(a, &ga);
            }
            Op::MeanAll(a) => {
                let a = *a;
                let n = self.nodes[a].value.len();
                let ga = vec![g[0] / n as f64; n];
                self.add_to_grad(a, &ga);
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let c = self.nodes[i].value.cols();
                let mut off = 0;
                for p in parts {
                    let r = self.nodes[p].value.rows();
                    let chunk = g[off * c..(off + r) * c].to_vec();
                    self.add_to_grad(p, &chunk);
                    off += r;
                }
            }
            Op::SliceRows { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let c = self.nodes[x].value.cols();
                let total = self.nodes[x].value.len();
                let mut ga = vec![0.0; total];
                ga[start * c..(start + len) * c].copy_from_slice(g);
                self.add_to_grad(x, &ga);
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let r = self.nodes[i].value.rows();
                let c = self.nodes[i].value.cols();
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p].value.cols();
                    let mut gp = vec![0.0; r * w];
                    for row in 0..r {
                        gp[row * w..(row + 1) * w]
                            .copy_from_slice(&g[row * c + off..row * c + off + w]);
                    }
                    self.add_to_grad(p, &gp);
                    off += w;
                }
            }
            Op::SliceCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let (r, c) = (self.nodes[x].value.rows(), self.nodes[x].value.cols());
                let mut ga = vec![0.0; r * c];
                for row in 0..r {
                    ga[row * c + start..row * c + start + len]
                        .copy_from_slice(&g[row * len..(row + 1) * len]);
                }
                self.add_to_grad(x, &ga);
            }
            Op::Reshape(a) => {
                let a = *a;
                self.add_to_grad(a, g);
            }
            Op::LayerNormRows { x, gain, bias } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let (r, c) = (self.nodes[x].value.rows(), self.nodes[x].value.cols());
                let gain_v = self.nodes[gain].value.data().to_vec();
                let mut gx = vec![0.0; r * c];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for row in 0..r {
                    let xs = &self.nodes[x].value.data()[row * c..(row + 1) * c];
                    let gr = &g[row * c..(row + 1) * c];
                    let mean = xs.iter().sum::<f64>() / c as f64;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + LN_EPS).sqrt();
                    let xhat: Vec<f64> = xs.iter().map(|v| (v - mean) * inv).collect();
                    let gy: Vec<f64> = gr.iter().zip(&gain_v).map(|(gv, gn)| gv * gn).collect();
                    let mean_gy = gy.iter().sum::<f64>() / c as f64;
                    let mean_gy_xhat =
                        gy.iter().zip(&xhat).map(|(a2, b2)| a2 * b2).sum::<f64>() / c as f64;
                    for j in 0..c {
                        gx[row * c + j] = (gy[j] - mean_gy - xhat[j] * mean_gy_xhat) * inv;
                        gg[j] += gr[j] * xhat[j];
                        gb[j] += gr[j];
                    }
                }
                self.add_to_grad(x, &gx);
                self.add_to_grad(gain, &gg);
                self.add_to_grad(bias, &gb);
            }
            Op::CrossEntropyMean { logits, targets } => {
                let logits = *logits;
                let targets = targets.clone();
                let v = &self.nodes[logits].value;
                let (b, c) = (v.rows(), v.cols());
                let mut ga = vec![0.0; b * c];
                for (row, &t) in targets.iter().enumerate() {
                    let xs = &v.data()[row * c..(row + 1) * c];
                    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for j in 0..c {
                        let p = exps[j] / sum;
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        ga[row * c + j] = g[0] * (p - onehot) / b as f64;
                    }
                }
                self.add_to_grad(logits, &ga);
            }
            Op::LogDet { x, floor } => {
                let (x, floor) = (*x, *floor);
                if self.nodes[i].value.data()[0] <= floor {
                    return; // clamped: zero subgradient
                }
                let v = &self.nodes[x].value;
                let n = v.shape()[0];
                // d log|det A| / dA = (A^{-1})ᵀ
                let inv = invert(v.data(), n)
                    .expect("log_det backward: matrix became singular after forward");
                let mut ga = vec![0.0; n * n];
                for r in 0..n {
                    for c2 in 0..n {
                        ga[r * n + c2] = g[0] * inv[c2 * n + r];
                    }
                }
                self.add_to_grad(x, &ga);
            }
        }
    }

    /// Accumulate gradients of every named-parameter leaf back into the
    /// store. A parameter bound k times receives the sum of all k leaves.
    pub fn accumulate_grads(&self, store: &mut ParamStore) {
        for n in &self.nodes {
            if let (Some(name), Some(grad)) = (&n.param, &n.grad) {
                store.accumulate_grad(name, grad);
            }
        }
    }

    /// Gradients of named leaves, summed per name.
    pub fn named_grads(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for n in &self.nodes {
            if let (Some(name), Some(grad)) = (&n.param, &n.grad) {
                let e = out.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
                for (a, b) in e.iter_mut().zip(grad) {
                    *a += b;
                }
            }
        }
        out
    }
}

/// LU decomposition with partial pivoting; returns (packed LU, permutation,
/// nonsingular flag).
fn lu_decompose(a: &[f64], n: usize) -> (Vec<f64>, Vec<usize>, bool) {
    let mut lu = a.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let mut pivot = col;
        let mut best = lu[col * n + col].abs();
        for r in col + 1..n {
            let v = lu[r * n + col].abs();
            if v > best {
                best = v;
                pivot = r;
            }
        }
        if best < 1e-300 {
            return (lu, perm, false);
        }
        if pivot != col {
            for j in 0..n {
                lu.swap(col * n + j, pivot * n + j);
            }
            perm.swap(col, pivot);
        }
        let d = lu[col * n + col];
        for r in col + 1..n {
            let f = lu[r * n + col] / d;
            lu[r * n + col] = f;
            for j in col + 1..n {
                lu[r * n + j] -= f * lu[col * n + j];
            }
        }
    }
    (lu, perm, true)
}

/// Dense inverse via LU; `None` if singular.
fn invert(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let (lu, perm, ok) = lu_decompose(a, n);
    if !ok {
        return None;
    }
    let mut inv = vec![0.0; n * n];
    for col in 0..n {
        // Solve A x = e_col using the recorded row permutation.
        let mut y = vec![0.0; n];
        for r in 0..n {
            let mut s = if perm[r] == col { 1.0 } else { 0.0 };
            for j in 0..r {
                s -= lu[r * n + j] * y[j];
            }
            y[r] = s;
        }
        for r in (0..n).rev() {
            let mut s = y[r];
            for j in r + 1..n {
                s -= lu[r * n + j] * inv[j * n + col];
            }
            inv[r * n + col] = s / lu[r * n + r];
        }
    }
    Some(inv)
}
