//! Learning the value distribution and termination probability of the
//! behavior policy from logged transitions.
//!
//! The live model is trained on the sum of a quantile Huber term against
//! bootstrapped targets and a binary cross-entropy term for termination.
//! Bootstrap targets come from a target copy refreshed every `T_c` steps.

mod adam;
mod gradcheck;
pub mod loss;
mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::Adam;
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use loss::{bce_loss, bce_with_logits, quantile_huber_loss, sigmoid};
pub use model::{Activations, EngagementModel, Gradients, Init, ModelSpec, Tensor};
pub use train::{
    batch_objective, compute_targets, train, train_observed, BatchObjective, LearnerSetup, TraceRow,
    TrainOutput,
};

/// Hyperparameters. Every field has a default, so `{}` is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Number of quantiles.
    #[serde(rename = "M")]
    pub quantiles: usize,
    /// Huber threshold.
    pub kappa: f64,
    /// Cap on the effective discount.
    pub eta: f64,
    /// Target copy period in gradient steps.
    #[serde(rename = "T_c")]
    pub target_copy: usize,
    /// Minibatch size.
    #[serde(rename = "B")]
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub w_clip: Option<f64>,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    /// Adds a (state, action) cross embedding field.
    pub cross_features: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            quantiles: 200,
            kappa: 1.0,
            eta: 0.95,
            target_copy: 100,
            batch_size: 256,
            learning_rate: 0.00015,
            lr_schedule: LrSchedule::Constant,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 10,
            seed: 0,
            w_clip: None,
            embed_dim: 32,
            cross_features: false,
            hidden: vec![64, 64],
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(msg));
        if self.quantiles == 0 {
            return fail("M must be >= 1".into());
        }
        if !(self.kappa > 0.0) {
            return fail(format!("kappa must be > 0, got {}", self.kappa));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return fail(format!("eta must be in (0, 1), got {}", self.eta));
        }
        if self.target_copy == 0 || self.batch_size == 0 {
            return fail("T_c and B must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if let Some(c) = self.w_clip {
            if !(c > 0.0) {
                return fail(format!("w_clip must be > 0, got {c}"));
            }
        }
        Ok(())
    }
}

/// Learning rate over the course of training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Step `i` of `n` (1-based) uses `learning_rate * (n - i + 1) / n`.
    Linear,
}

impl LrSchedule {
    pub fn rate(&self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Linear => base * (total + 1 - step) as f64 / total as f64,
        }
    }
}

/// Loss on the value head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueLoss {
    QuantileHuber,
    /// Half squared error of a single output against the mean target.
    Squared,
}

/// Discount applied to the bootstrapped successor value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetDiscount {
    /// `gamma' = eta`.
    Constant,
    /// `gamma' = min(1 - ell(s', a'), eta)` with `ell` from the live model.
    TerminationAware,
}

/// What the learner optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Objective {
    pub value_loss: ValueLoss,
    pub discount: TargetDiscount,
    pub termination_head: bool,
}

impl Default for Objective {
    fn default() -> Self {
        Objective {
            value_loss: ValueLoss::QuantileHuber,
            discount: TargetDiscount::TerminationAware,
            termination_head: true,
        }
    }
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        if self.discount == TargetDiscount::TerminationAware && !self.termination_head {
            return Err(Error::validation(
                "termination-aware discounting needs a termination head",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let c: TrainingConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, TrainingConfig::default());
        assert_eq!(c.quantiles, 200);
        assert_eq!(c.learning_rate, 0.00015);
        assert_eq!(c.embed_dim, 32);
        c.validate().unwrap();
    }

    #[test]
    fn config_uses_short_names() {
        let c: TrainingConfig = serde_json::from_str(r#"{"M": 8, "T_c": 5, "B": 16, "kappa": 0.5}"#).unwrap();
        assert_eq!((c.quantiles, c.target_copy, c.batch_size, c.kappa), (8, 5, 16, 0.5));
        assert!(serde_json::from_str::<TrainingConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn invalid_configs() {
        for bad in [
            TrainingConfig { kappa: 0.0, ..Default::default() },
            TrainingConfig { eta: 1.0, ..Default::default() },
            TrainingConfig { target_copy: 0, ..Default::default() },
            TrainingConfig { quantiles: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
