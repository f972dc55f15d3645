use crate::graph::{Graph, ValueId};
use crate::store::ParamStore;

/// Per-parameter outcome of a finite-difference check.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// (parameter name, max relative error over its entries)
    pub entries: Vec<(String, f64)>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn pass(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.entries
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
    }
}

/// Compare analytic gradients against central finite differences for every
/// parameter in `store`. `build` must deterministically construct a scalar
/// loss from the current parameter values. Parameter values are restored
/// before returning; pending gradients are cleared.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, build: F) -> GradReport
where
    F: Fn(&mut Graph, &ParamStore) -> ValueId,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    assert!(
        g.value(loss).is_scalar(),
        "grad_check: build must produce a scalar loss"
    );
    g.backward(loss).expect("scalar checked above");
    let analytic = g.named_grads();

    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut entries = Vec::with_capacity(names.len());
    for name in names {
        let base = store.get(&name).clone();
        let a = analytic
            .get(&name)
            .unwrap_or_else(|| panic!("grad_check: '{name}' unused in the loss"));
        let mut worst = 0.0f64;
        for i in 0..base.len() {
            let orig = base.data()[i];

            let mut t = base.clone();
            t.data_mut()[i] = orig + eps;
            store.set(&name, t);
            let mut gp = Graph::new();
            let lp = build(&mut gp, store);
            let fp = gp.value(lp).data()[0];

            let mut t = base.clone();
            t.data_mut()[i] = orig - eps;
            store.set(&name, t);
            let mut gm = Graph::new();
            let lm = build(&mut gm, store);
            let fm = gm.value(lm).data()[0];

            let fd = (fp - fm) / (2.0 * eps);
            let rel = (a[i] - fd).abs() / a[i].abs().max(fd.abs()).max(1.0);
            worst = worst.max(rel);
        }
        store.set(&name, base);
        entries.push((name, worst));
    }
    store.clear_grads();
    GradReport { entries }
}
