//! Unary constraint operators applied to component and concentration outputs.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintOp {
    Identity,
    #[default]
    Abs,
    Relu,
    Softplus,
}

impl ConstraintOp {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ConstraintOp::Identity => x,
            ConstraintOp::Abs => x.abs(),
            ConstraintOp::Relu => x.max(0.0),
            ConstraintOp::Softplus => {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative, taking 0 at the kinks of `abs` and `relu`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ConstraintOp::Identity => 1.0,
            ConstraintOp::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            ConstraintOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ConstraintOp::Softplus => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Whether every output is non-negative.
    pub fn is_non_negative(self) -> bool {
        !matches!(self, ConstraintOp::Identity)
    }
}

impl std::str::FromStr for ConstraintOp {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" => Ok(ConstraintOp::Identity),
            "abs" => Ok(ConstraintOp::Abs),
            "relu" => Ok(ConstraintOp::Relu),
            "softplus" => Ok(ConstraintOp::Softplus),
            other => Err(format!("unknown constraint operator {other:?}")),
        }
    }
}
