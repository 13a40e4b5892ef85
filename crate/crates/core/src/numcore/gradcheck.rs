//! Reverse-mode vs. central finite-difference comparison.

use super::{ParamId, ParamStore, Tape, Tensor, Value};

pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute rather than relative
/// terms; central differences carry roughly `eps·|f| / h` of round-off.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(label, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, f64, f64)>,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

impl GradCheckReport {
    fn record(&mut self, label: impl FnOnce() -> String, a: f64, n: f64) {
        let e = rel_error(a, n);
        self.checked += 1;
        if e > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = Some((label(), a, n));
        }
    }
}

/// Checks `f` w.r.t. differentiable inputs built from `inputs`.
pub fn grad_check_inputs<F>(inputs: &[Tensor], f: F) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape, &[Value<'t>]) -> Value<'t>,
{
    let eval = |xs: &[Tensor]| {
        let tape = Tape::new();
        let vs: Vec<Value> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        f(&tape, &vs).sum().item()
    };
    let tape = Tape::new();
    let vs: Vec<Value> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&tape, &vs).sum();
    let grads = tape.backward(out);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    let mut probe = inputs.to_vec();
    for (k, v) in vs.iter().enumerate() {
        let analytic = grads.tensor(*v);
        for i in 0..inputs[k].numel() {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + FD_STEP;
            let fp = eval(&probe);
            probe[k].data_mut()[i] = orig - FD_STEP;
            let fm = eval(&probe);
            probe[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            report.record(|| format!("input{k}[{i}]"), analytic.data()[i], numeric);
        }
    }
    report
}

/// Checks `f` w.r.t. parameter entries of `store`. `entries` selects
/// `(param, flat index)` pairs; `None` checks every scalar.
pub fn grad_check_params<F>(store: &mut ParamStore, entries: Option<&[(ParamId, usize)]>, f: F) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape, &'t ParamStore) -> Value<'t>,
{
    let analytic = {
        let tape = Tape::new();
        let out = f(&tape, store).sum();
        let grads = tape.backward(out);
        tape.param_grads(&grads, store)
    };
    let all: Vec<(ParamId, usize)>;
    let entries = match entries {
        Some(e) => e,
        None => {
            all = store
                .ids()
                .flat_map(|id| (0..store.get(id).numel()).map(move |i| (id, i)))
                .collect();
            &all
        }
    };
    let eval = |store: &ParamStore| {
        let tape = Tape::new();
        let v = f(&tape, store).sum().item();
        v
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for &(id, i) in entries {
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + FD_STEP;
        let fp = eval(store);
        store.get_mut(id).data_mut()[i] = orig - FD_STEP;
        let fm = eval(store);
        store.get_mut(id).data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        let name = store.name(id).to_string();
        report.record(|| format!("{name}[{i}]"), analytic[id.0].data()[i], numeric);
    }
    report
}

/// Maximum relative error of reverse-mode gradients w.r.t. all parameters.
pub fn grad_check<F>(store: &mut ParamStore, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &'t ParamStore) -> Value<'t>,
{
    grad_check_params(store, None, f).max_rel_error
}
