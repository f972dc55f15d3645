use crate::tensor::Tensor;
use crate::TensorError;
use std::collections::BTreeMap;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Param {
    value: Tensor,
    grad: Option<Vec<f64>>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named parameters plus Adam state. Single writer: one training loop owns
/// the store; frozen stores may be read from any thread.
#[derive(Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) {
        let n = value.len();
        let prev = self.params.insert(
            name.to_string(),
            Param {
                value,
                grad: None,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
        assert!(prev.is_none(), "parameter '{name}' registered twice");
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.params.get(name).unwrap_or_else(|| panic!("unknown parameter '{name}'")).value
    }

    /// Overwrite a parameter's values in place (shape must match).
    pub fn set(&mut self, name: &str, value: Tensor) {
        let p = self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        assert_eq!(p.value.shape(), value.shape(), "set '{name}': shape changed");
        p.value = value;
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &[f64]) {
        let p = self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        assert_eq!(p.value.len(), g.len(), "grad '{name}': length mismatch");
        match &mut p.grad {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => p.grad = Some(g.to_vec()),
        }
    }

    pub fn grad(&self, name: &str) -> Option<&[f64]> {
        self.params.get(name).and_then(|p| p.grad.as_deref())
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Scale every pending gradient, e.g. to average over a batch.
    pub fn scale_grads(&mut self, s: f64) {
        for p in self.params.values_mut() {
            if let Some(g) = &mut p.grad {
                for v in g.iter_mut() {
                    *v *= s;
                }
            }
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    /// One Adam update over all parameters; every registered parameter must
    /// have a gradient. Gradients are cleared afterwards.
    pub fn adam_step(&mut self, lr: f64) -> Result<(), TensorError> {
        for (name, p) in &self.params {
            if p.grad.is_none() {
                return Err(TensorError::MissingGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for p in self.params.values_mut() {
            let g = p.grad.take().expect("checked above");
            let data = p.value.data_mut();
            for i in 0..g.len() {
                p.m[i] = BETA1 * p.m[i] + (1.0 - BETA1) * g[i];
                p.v[i] = BETA2 * p.v[i] + (1.0 - BETA2) * g[i] * g[i];
                let mhat = p.m[i] / bc1;
                let vhat = p.v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }

    /// FNV-1a over parameter names and value bits; detects any mutation.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, p) in &self.params {
            eat(name.as_bytes());
            for &v in p.value.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_grad_is_fixed_point() {
        let mut s = ParamStore::new();
        s.register("w", Tensor::vector(vec![1.0, -2.0]));
        s.accumulate_grad("w", &[0.0, 0.0]);
        s.adam_step(0.001).unwrap();
        assert_eq!(s.get("w").data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // Bias-corrected first step with grad 1: mhat = 1, vhat = 1,
        // so the update is lr / (1 + eps) ~ lr.
        let mut s = ParamStore::new();
        s.register("w", Tensor::scalar(5.0));
        s.accumulate_grad("w", &[1.0]);
        s.adam_step(0.001).unwrap();
        let moved = 5.0 - s.get("w").data()[0];
        assert!((moved - 0.001).abs() < 1e-9, "moved {moved}");
    }

    #[test]
    fn adam_step_counter_and_missing_grad() {
        let mut s = ParamStore::new();
        s.register("w", Tensor::scalar(0.0));
        s.accumulate_grad("w", &[1.0]);
        s.adam_step(0.001).unwrap();
        s.accumulate_grad("w", &[1.0]);
        s.adam_step(0.001).unwrap();
        assert_eq!(s.step_count(), 2);
        assert!(matches!(
            s.adam_step(0.001),
            Err(TensorError::MissingGradient(_))
        ));
    }
}
