//! Heuristic allocations used as ablation baselines.

use serde::{Deserialize, Serialize};

use crate::allocator::rounding::greedy_fill;
use crate::error::{Result, VipError};

pub const DEFAULT_BASELINE_EPS: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Same count for every prompt.
    Uniform,
    /// Weight `1 − acc + ε`: harder prompts get more.
    InverseAccuracy,
    /// Weight `1/(σ² + ε)`: low-variance prompts get more.
    InverseVariance,
}

impl std::str::FromStr for BaselineKind {
    type Err = VipError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(BaselineKind::Uniform),
            "inverse_accuracy" | "inverse-accuracy" => Ok(BaselineKind::InverseAccuracy),
            "inverse_variance" | "inverse-variance" => Ok(BaselineKind::InverseVariance),
            other => Err(VipError::invalid(format!("unknown baseline '{other}'"))),
        }
    }
}

/// Proportional split of `budget` by `weights`, projected onto the box
/// `[min, max]` by clamp-and-redistribute.
///
/// Each round rescales the free coordinates to the remaining budget, then fixes
/// the violators on whichever side has the larger total violation. A
/// coordinate never leaves its bound once fixed, so at most `B` rounds run.
pub fn box_project(weights: &[f64], budget: f64, min: f64, max: f64) -> Result<Vec<f64>> {
    let b = weights.len();
    if b == 0 {
        return Err(VipError::invalid("no weights"));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(VipError::invalid("weights must be finite and non-negative"));
    }
    if budget < b as f64 * min - 1e-9 || budget > b as f64 * max + 1e-9 {
        return Err(VipError::Infeasible(format!(
            "budget {budget} outside [B·L, B·U] = [{}, {}]",
            b as f64 * min,
            b as f64 * max
        )));
    }
    let mut fixed: Vec<Option<f64>> = vec![None; b];
    loop {
        let remaining = budget - fixed.iter().flatten().sum::<f64>();
        let free: Vec<usize> = (0..b).filter(|&q| fixed[q].is_none()).collect();
        if free.is_empty() {
            break;
        }
        let wsum: f64 = free.iter().map(|&q| weights[q]).sum();
        let x: Vec<(usize, f64)> = free
            .iter()
            .map(|&q| {
                let share = if wsum > 0.0 {
                    weights[q] / wsum
                } else {
                    1.0 / free.len() as f64
                };
                (q, remaining * share)
            })
            .collect();
        let below: f64 = x.iter().map(|&(_, v)| (min - v).max(0.0)).sum();
        let above: f64 = x.iter().map(|&(_, v)| (v - max).max(0.0)).sum();
        if below == 0.0 && above == 0.0 {
            for (q, v) in x {
                fixed[q] = Some(v);
            }
            break;
        }
        if below >= above {
            for &(q, v) in &x {
                if v < min {
                    fixed[q] = Some(min);
                }
            }
        } else {
            for &(q, v) in &x {
                if v > max {
                    fixed[q] = Some(max);
                }
            }
        }
    }
    Ok(fixed
        .into_iter()
        .map(|v| v.expect("every coordinate fixed"))
        .collect())
}

/// Integer baseline plan. `stats` holds per-prompt accuracies (inverse
/// accuracy) or reward variances (inverse variance); uniform only uses its
/// length.
pub fn baseline_allocation(
    kind: BaselineKind,
    stats: &[f64],
    budget: u64,
    min: u32,
    max: u32,
    eps: f64,
) -> Result<Vec<u32>> {
    let b = stats.len();
    if b == 0 {
        return Err(VipError::invalid("baseline needs at least one prompt"));
    }
    if min > max {
        return Err(VipError::invalid(format!("min {min} exceeds max {max}")));
    }
    if budget < b as u64 * min as u64 || budget > b as u64 * max as u64 {
        return Err(VipError::Infeasible(format!(
            "budget {budget} outside [B·L, B·U] = [{}, {}]",
            b as u64 * min as u64,
            b as u64 * max as u64
        )));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(VipError::invalid("baseline eps must be positive"));
    }
    let weights: Vec<f64> = match kind {
        BaselineKind::Uniform => vec![1.0; b],
        BaselineKind::InverseAccuracy => stats
            .iter()
            .map(|&acc| {
                if (0.0..=1.0).contains(&acc) {
                    Ok(1.0 - acc + eps)
                } else {
                    Err(VipError::invalid(format!(
                        "accuracy must lie in [0, 1], got {acc}"
                    )))
                }
            })
            .collect::<Result<_>>()?,
        BaselineKind::InverseVariance => stats
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.is_finite() {
                    Ok(1.0 / (v + eps))
                } else {
                    Err(VipError::invalid(format!(
                        "variance must be finite and ≥ 0, got {v}"
                    )))
                }
            })
            .collect::<Result<_>>()?,
    };
    let target = box_project(&weights, budget as f64, min as f64, max as f64)?;
    let floors: Vec<u32> = target
        .iter()
        .map(|&t| ((t + 1e-9).floor() as u32).clamp(min, max))
        .collect();
    greedy_fill(floors, budget, min, max, |q, n| target[q] - n as f64)
}
