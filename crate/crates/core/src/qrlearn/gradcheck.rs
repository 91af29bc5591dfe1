use crate::error::{Error, Result};
use crate::qrlearn::model::EngagementModel;
use crate::qrlearn::train::{batch_objective, compute_targets};
use crate::qrlearn::{Objective, TrainingConfig};
use crate::simenv::Transition;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central difference half-width.
    pub step: f64,
    /// Samples with a residual within this distance of `|u| = kappa` are skipped.
    pub huber_margin: f64,
    /// Samples with a ReLU pre-activation within this distance of 0 are skipped.
    pub relu_margin: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-4, huber_margin: 1e-6, relu_margin: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |a - n| / max(1, |a| + |n|)` over all parameters.
    pub max_rel_error: f64,
    pub params_checked: usize,
    pub samples_used: usize,
    pub samples_excluded: usize,
}

/// Compares analytic gradients of the joint objective with central finite
/// differences for every parameter.
///
/// Targets are computed once with `model` as both live and target network and
/// then held fixed, matching the detached targets used in training. Parameters
/// are `f32`, so the difference quotient divides by the step actually realized
/// after rounding.
pub fn gradient_check(
    model: &EngagementModel,
    batch: &[Transition],
    config: &TrainingConfig,
    objective: &Objective,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    config.validate()?;
    objective.validate()?;
    if batch.is_empty() {
        return Err(Error::validation("gradient check needs a non-empty batch"));
    }
    let all: Vec<&Transition> = batch.iter().collect();
    let targets = compute_targets(&all, model, model, config.eta, objective.discount)?;

    let mut used = Vec::new();
    let mut used_targets = Vec::new();
    for (t, y) in all.iter().zip(&targets) {
        let probe = batch_objective(model, &[*t], std::slice::from_ref(y), config.kappa, objective.value_loss)?;
        if probe.huber_margin >= options.huber_margin && probe.relu_margin >= options.relu_margin {
            used.push(*t);
            used_targets.push(y.clone());
        }
    }
    let excluded = batch.len() - used.len();
    if used.is_empty() {
        return Ok(GradCheckReport { max_rel_error: 0.0, params_checked: 0, samples_used: 0, samples_excluded: excluded });
    }

    let loss = |m: &EngagementModel| -> Result<f64> {
        Ok(batch_objective(m, &used, &used_targets, config.kappa, objective.value_loss)?.total())
    };
    let analytic = batch_objective(model, &used, &used_targets, config.kappa, objective.value_loss)?.grads;
    let mut probe = model.clone();
    let mut max_err: f64 = 0.0;
    let mut checked = 0;
    for (ti, grads) in analytic.0.iter().enumerate() {
        for (pi, &a) in grads.iter().enumerate() {
            let original = model.tensors()[ti].data[pi];
            let up = (f64::from(original) + options.step) as f32;
            let down = (f64::from(original) - options.step) as f32;
            probe.tensors_mut()[ti].data[pi] = up;
            let l_up = loss(&probe)?;
            probe.tensors_mut()[ti].data[pi] = down;
            let l_down = loss(&probe)?;
            probe.tensors_mut()[ti].data[pi] = original;
            let numeric = (l_up - l_down) / (f64::from(up) - f64::from(down));
            let err = (a - numeric).abs() / f64::max(1.0, a.abs() + numeric.abs());
            max_err = max_err.max(err);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_err,
        params_checked: checked,
        samples_used: used.len(),
        samples_excluded: excluded,
    })
}
