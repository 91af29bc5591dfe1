use std::fmt;

use clap::ValueEnum;
use engage_core::qrlearn::{Objective, TargetDiscount, ValueLoss};
use serde::{Deserialize, Serialize};

/// Learner variants compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Scalar head, squared loss, fixed discount `eta`.
    Fd,
    /// Quantile head, fixed discount `eta`, no termination head.
    Rr,
    /// Quantile head plus termination head, discount `min(1 - ell, eta)`.
    Proposed,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Fd, Variant::Rr, Variant::Proposed];

    pub fn objective(self) -> Objective {
        match self {
            Variant::Fd => Objective {
                value_loss: ValueLoss::Squared,
                discount: TargetDiscount::Constant,
                termination_head: false,
            },
            Variant::Rr => Objective {
                value_loss: ValueLoss::QuantileHuber,
                discount: TargetDiscount::Constant,
                termination_head: false,
            },
            Variant::Proposed => Objective::default(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Fd => "fd",
            Variant::Rr => "rr",
            Variant::Proposed => "proposed",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
