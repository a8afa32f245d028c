//! Central finite-difference gradient checks.
//!
//! Checks run in `f64`. Elements whose perturbed forward takes a different
//! discrete branch (ReLU side, argmax, sort order) than the unperturbed one are
//! skipped: the function is not differentiable across that step, so neither
//! side's difference quotient is a valid reference.

use std::fmt;

use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Central differences of `f` with respect to every element of parameter `id`.
pub fn finite_difference_gradient<F>(
    store: &mut ParamStore<f64>,
    id: ParamId,
    eps: f64,
    mut f: F,
) -> Result<super::Tensor<f64>>
where
    F: FnMut(&ParamStore<f64>) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {eps}")));
    }
    let n = store.value(id).numel();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = store.value(id).data()[i];
        store.get_mut(id).value.data_mut()[i] = orig + eps;
        let plus = f(store)?;
        store.get_mut(id).value.data_mut()[i] = orig - eps;
        let minus = f(store)?;
        store.get_mut(id).value.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    super::Tensor::new(store.value(id).shape().to_vec(), out)
}

/// Settings for [`GradCheck::check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub eps: f64,
    pub tolerance: f64,
    /// Denominator floor: `|a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Elements checked per parameter; larger tensors are strided.
    pub max_elements: usize,
    /// A check with more skipped than checked elements fails.
    pub max_skip_ratio: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-3,
            tolerance: 1e-3,
            floor: 1e-4,
            max_elements: 24,
            max_skip_ratio: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    /// `param[index]` of the worst element.
    pub worst: String,
    pub checked: usize,
    pub skipped: usize,
    pub tolerance: f64,
    pub max_skip_ratio: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0
            && self.max_rel_error < self.tolerance
            && self.skipped as f64 <= self.max_skip_ratio * self.checked as f64
    }

    /// Merges repeated checks of the same module.
    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst.clone();
        }
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<20} max_rel_err={:.3e} worst={} checked={} skipped={} {}",
            self.name,
            self.max_rel_error,
            self.worst,
            self.checked,
            self.skipped,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

impl GradCheck {
    /// Compares tape gradients of the scalar built by `forward` against
    /// central differences, for every parameter in `store`.
    pub fn check<F>(&self, name: &str, store: &mut ParamStore<f64>, mut forward: F) -> Result<GradCheckReport>
    where
        F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
    {
        let mut tape = Tape::<f64>::new();
        tape.track_branches();
        store.zero_grad();
        let loss = forward(&mut tape, store)?;
        let base = tape.branch_fingerprint();
        tape.backward(loss, store)?;

        let mut eval = |store: &ParamStore<f64>| -> Result<(f64, Option<u64>)> {
            let mut t = Tape::<f64>::no_grad();
            t.track_branches();
            let v = forward(&mut t, store)?;
            Ok((t.value(v).item(), t.branch_fingerprint()))
        };

        let mut report = GradCheckReport {
            name: name.to_string(),
            max_rel_error: 0.0,
            worst: "-".into(),
            checked: 0,
            skipped: 0,
            tolerance: self.tolerance,
            max_skip_ratio: self.max_skip_ratio,
        };
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let n = store.value(id).numel();
            let stride = n.div_ceil(self.max_elements.max(1)).max(1);
            for i in (0..n).step_by(stride) {
                let orig = store.value(id).data()[i];
                store.get_mut(id).value.data_mut()[i] = orig + self.eps;
                let (plus, sp) = eval(store)?;
                store.get_mut(id).value.data_mut()[i] = orig - self.eps;
                let (minus, sm) = eval(store)?;
                store.get_mut(id).value.data_mut()[i] = orig;
                if sp != base || sm != base {
                    report.skipped += 1;
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * self.eps);
                let analytic = store.grad(id).data()[i];
                let denom = analytic.abs().max(numeric.abs()).max(self.floor);
                let rel = (analytic - numeric).abs() / denom;
                report.checked += 1;
                if rel > report.max_rel_error || rel.is_nan() {
                    report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                    report.worst = format!("{}[{i}]", store.get(id).name);
                }
            }
        }
        store.zero_grad();
        Ok(report)
    }
}
