//! Central finite-difference audit of the model's analytic gradients.

use crate::backbone::{FlowExample, Model};
use crate::error::Result;
use crate::params::{Grads, ParamId};

/// Worst disagreement found for one tensor.
#[derive(Clone, Debug)]
pub struct TensorReport {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Largest analytic gradient magnitude in the tensor.
    pub max_grad: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub tensors: Vec<TensorReport>,
    pub n_checked: usize,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorReport> {
        self.tensors.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// `|a - n| / max(|a|, |n|, floor)`: relative where the gradient is
/// resolvable, absolute (scaled by `1/floor`) where both are tiny.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient of every scalar in every tensor against a
/// central difference with step `h`.
pub fn check_gradients(model: &Model<f64>, ex: &FlowExample<'_, f64>, h: f64, floor: f64) -> Result<GradReport> {
    let mut grads = Grads::all(&model.params);
    model.loss_and_grad(ex, &mut grads)?;
    let mut probe = model.clone();
    let mut tensors = Vec::new();
    let mut n_checked = 0;
    let ids: Vec<ParamId> = model.params.ids().collect();
    for id in ids {
        let analytic = grads.get(id).expect("all tensors have slots").to_vec();
        let mut report = TensorReport {
            name: model.params.entry(id).name.clone(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            max_grad: 0.0,
        };
        for (i, &a) in analytic.iter().enumerate() {
            let orig = probe.params.get(id)[i];
            probe.params.get_mut(id)[i] = orig + h;
            let up = probe.loss(ex)?;
            probe.params.get_mut(id)[i] = orig - h;
            let down = probe.loss(ex)?;
            probe.params.get_mut(id)[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric, floor));
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.max_grad = report.max_grad.max(a.abs());
            n_checked += 1;
        }
        tensors.push(report);
    }
    Ok(GradReport { tensors, n_checked })
}
