//! Upper-tail probabilities of the reference distributions.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VipError};
use crate::stats::special::{beta_reg, erfc, gamma_q};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    ChiSquare { dof: f64 },
    F { d1: f64, d2: f64 },
    Normal,
    StudentT { dof: f64 },
}

impl Distribution {
    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        let valid = match *self {
            Distribution::ChiSquare { dof } | Distribution::StudentT { dof } => ok(dof),
            Distribution::F { d1, d2 } => ok(d1) && ok(d2),
            Distribution::Normal => true,
        };
        if valid {
            Ok(())
        } else {
            Err(VipError::invalid(format!(
                "degrees of freedom must be positive and finite: {self:?}"
            )))
        }
    }

    /// `Pr(X ≥ x)`.
    pub fn survival(&self, x: f64) -> Result<f64> {
        self.validate()?;
        if x.is_nan() {
            return Err(VipError::invalid("survival evaluated at NaN"));
        }
        Ok(match *self {
            Distribution::ChiSquare { dof } => {
                if x <= 0.0 {
                    1.0
                } else {
                    gamma_q(0.5 * dof, 0.5 * x)
                }
            }
            Distribution::F { d1, d2 } => f_survival(d1, d2, x),
            Distribution::Normal => normal_sf(x),
            Distribution::StudentT { dof } => {
                let half = 0.5 * student_t_two_sided(dof, x.abs());
                if x >= 0.0 {
                    half
                } else {
                    1.0 - half
                }
            }
        })
    }
}

/// Free-function form of [`Distribution::survival`].
pub fn dist_survival(dist: Distribution, x: f64) -> Result<f64> {
    dist.survival(x)
}

/// Standard normal upper tail `1 − Φ(x)`.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Standard normal CDF `Φ(x)`.
pub fn normal_cdf(x: f64) -> f64 {
    normal_sf(-x)
}

/// `Pr(|T| ≥ t)` for Student-t with `dof` degrees of freedom, `t ≥ 0`.
pub(crate) fn student_t_two_sided(dof: f64, t: f64) -> f64 {
    if t == f64::INFINITY {
        return 0.0;
    }
    let t2 = t * t;
    let denom = dof + t2;
    beta_reg(0.5 * dof, 0.5, dof / denom, t2 / denom)
}

fn f_survival(d1: f64, d2: f64, w: f64) -> f64 {
    if w <= 0.0 {
        return 1.0;
    }
    if w == f64::INFINITY {
        return 0.0;
    }
    let denom = d2 + d1 * w;
    beta_reg(0.5 * d2, 0.5 * d1, d2 / denom, d1 * w / denom)
}
