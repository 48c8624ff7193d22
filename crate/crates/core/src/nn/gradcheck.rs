//! Central finite-difference gradient checking.
//!
//! Only the forward pass is used to form the numeric estimate, so the check
//! is independent of the backward implementation it validates.

use super::params::{ParamGrads, ParamId, ParamStore};
use super::tape::{Graph, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Denominator floor: relative error is `|a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many entries per parameter (evenly strided).
    pub max_entries_per_param: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            floor: 1e-5,
            max_entries_per_param: usize::MAX,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_entry: (usize, usize),
    pub checked: usize,
    /// Entries whose estimate was redone with a tenth of the step.
    pub refined: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares analytic gradients of `loss` against central differences for the
/// listed parameters (all parameters when `ids` is empty).
pub fn check_gradients<F>(store: &ParamStore, ids: &[ParamId], opts: GradCheckOptions, loss: F) -> GradCheckReport
where
    F: Fn(&mut Graph<'_>) -> Var,
{
    let analytic: ParamGrads = {
        let mut g = Graph::with_params(store);
        let l = loss(&mut g);
        g.backward(l).params(&g, store)
    };
    let eval = |s: &ParamStore| {
        let mut g = Graph::with_params(s);
        let l = loss(&mut g);
        g.scalar(l)
    };

    let ids: Vec<ParamId> = if ids.is_empty() {
        store.ids().collect()
    } else {
        ids.to_vec()
    };
    let base = eval(store);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_entry: (0, 0),
        checked: 0,
        refined: 0,
    };
    for id in ids {
        let (rows, cols) = store.get(id).shape();
        let total = rows * cols;
        let stride = total.div_ceil(opts.max_entries_per_param.max(1)).max(1);
        for flat in (0..total).step_by(stride) {
            let (r, c) = (flat / cols, flat % cols);
            let orig = store.get(id)[(r, c)];
            let mut central = |h: f64| {
                work.get_mut(id)[(r, c)] = orig + h;
                let plus = eval(&work);
                work.get_mut(id)[(r, c)] = orig - h;
                let minus = eval(&work);
                work.get_mut(id)[(r, c)] = orig;
                (plus, minus)
            };
            let (plus, minus) = central(opts.step);
            let mut numeric = (plus - minus) / (2.0 * opts.step);
            // One-sided slopes that disagree mean a kink (activation,
            // penalty knee) lies within the step; retry with a finer one.
            let (right, left) = ((plus - base) / opts.step, (base - minus) / opts.step);
            if (right - left).abs() > 1e-3 * right.abs().max(left.abs()).max(opts.floor) {
                let h = opts.step / 10.0;
                let (plus, minus) = central(h);
                numeric = (plus - minus) / (2.0 * h);
                report.refined += 1;
            }
            let a = analytic.get(id)[(r, c)];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst_param = Some(store.name(id).to_string());
                report.worst_entry = (r, c);
            }
        }
    }
    report
}
