//! Budget-constrained rollout allocation.
//!
//! Minimises `Σ_q f_q(n_q)` subject to `Σ n_q = C` and `L ≤ n_q ≤ U`, where
//! `f_q(n) = a_q (n−1)/n²` (Dr.GRPO) or `a_q/(n−1)` (RLOO). The continuous
//! relaxation is separable and convex; its KKT conditions give each coordinate
//! as a clamped inverse of the marginal map at a shared multiplier `λ`, and the
//! multiplier is found by bisection on the budget equation. The integer plan
//! starts from the floors and hands out the remaining units greedily.

mod baseline;
mod rounding;
mod solver;

pub use baseline::{baseline_allocation, box_project, BaselineKind, DEFAULT_BASELINE_EPS};
pub use rounding::round_allocation;
pub use solver::{kkt_inverse, marginal, solve_continuous, ContinuousSolution, BUDGET_TOLERANCE};

use serde::{Deserialize, Serialize};

use crate::error::{Result, VipError};
use crate::variance::{allocation_coefficient, EstimatorFamily, VarianceInputs};

/// `f_q(n)`: the per-prompt share of the objective.
pub fn per_prompt_objective(family: EstimatorFamily, a: f64, n: f64) -> Result<f64> {
    match family {
        EstimatorFamily::DrGrpo if n < 1.0 => Err(VipError::invalid(format!(
            "Dr.GRPO objective needs n ≥ 1, got {n}"
        ))),
        EstimatorFamily::Rloo if n < 2.0 => Err(VipError::invalid(format!(
            "RLOO objective needs n ≥ 2, got {n}"
        ))),
        _ => Ok(objective_unchecked(family, a, n)),
    }
}

#[inline]
pub(crate) fn objective_unchecked(family: EstimatorFamily, a: f64, n: f64) -> f64 {
    if a == 0.0 {
        return 0.0;
    }
    a * family.count_factor(n)
}

/// One prompt and its allocation coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptCoefficient {
    pub id: String,
    pub a: f64,
}

/// One line of a coefficient file: `{"id", "a"}` or `{"id", "p_hat", "sigma_z2"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_hat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_z2: Option<f64>,
}

impl CoefficientRecord {
    pub fn coefficient(&self) -> Result<PromptCoefficient> {
        let a = match (self.a, self.p_hat) {
            (Some(a), None) if self.sigma_z2.is_none() => a,
            (None, Some(p)) => {
                let inputs = VarianceInputs::binary(p).with_sigma_z2(self.sigma_z2.unwrap_or(1.0));
                allocation_coefficient(&inputs)?
            }
            _ => {
                return Err(VipError::invalid(format!(
                    "prompt '{}': give either a, or p_hat with optional sigma_z2",
                    self.id
                )))
            }
        };
        Ok(PromptCoefficient {
            id: self.id.clone(),
            a,
        })
    }
}

/// Allocation problem in the CLI file layout:
/// `{"family", "budget", "min", "max", "prompts": [{"id", "a"}, …]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationProblem {
    pub family: EstimatorFamily,
    pub budget: u64,
    pub min: u32,
    pub max: u32,
    pub prompts: Vec<PromptCoefficient>,
}

impl AllocationProblem {
    pub fn new(
        family: EstimatorFamily,
        coeffs: &[f64],
        budget: u64,
        min: u32,
        max: u32,
    ) -> Result<Self> {
        let prompts = coeffs
            .iter()
            .enumerate()
            .map(|(i, &a)| PromptCoefficient {
                id: i.to_string(),
                a,
            })
            .collect();
        let p = Self {
            family,
            budget,
            min,
            max,
            prompts,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn coefficients(&self) -> Vec<f64> {
        self.prompts.iter().map(|p| p.a).collect()
    }

    /// Checks bounds, coefficients and `B·L ≤ C ≤ B·U`.
    pub fn validate(&self) -> Result<()> {
        if self.prompts.is_empty() {
            return Err(VipError::invalid("allocation problem has no prompts"));
        }
        if self.min < 3 {
            return Err(VipError::invalid(format!(
                "min must be at least 3, got {}",
                self.min
            )));
        }
        if self.min > self.max {
            return Err(VipError::invalid(format!(
                "min {} exceeds max {}",
                self.min, self.max
            )));
        }
        if let Some(p) = self
            .prompts
            .iter()
            .find(|p| !(p.a >= 0.0 && p.a.is_finite()))
        {
            return Err(VipError::invalid(format!(
                "coefficient of '{}' must be finite and ≥ 0, got {}",
                p.id, p.a
            )));
        }
        let b = self.prompts.len() as u64;
        let lo = b * self.min as u64;
        let hi = b * self.max as u64;
        if self.budget < lo {
            return Err(VipError::Infeasible(format!(
                "budget {} < B·L = {b}·{} = {lo}",
                self.budget, self.min
            )));
        }
        if self.budget > hi {
            return Err(VipError::Infeasible(format!(
                "budget {} > B·U = {b}·{} = {hi}",
                self.budget, self.max
            )));
        }
        Ok(())
    }

    pub fn objective(&self, n: &[f64]) -> f64 {
        self.prompts
            .iter()
            .zip(n)
            .map(|(p, &n)| objective_unchecked(self.family, p.a, n))
            .sum()
    }

    pub fn objective_int(&self, n: &[u32]) -> f64 {
        self.prompts
            .iter()
            .zip(n)
            .map(|(p, &n)| objective_unchecked(self.family, p.a, n as f64))
            .sum()
    }
}

/// One row of a plan file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub id: String,
    pub n_cont: f64,
    pub n_int: u32,
}

/// Continuous optimum, multiplier and rounded plan, in input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub lambda_star: f64,
    pub objective_cont: f64,
    pub objective_int: f64,
    pub allocations: Vec<PlanEntry>,
    /// Set when every coefficient is zero and the split is uniform.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

impl AllocationPlan {
    pub fn integer(&self) -> Vec<u32> {
        self.allocations.iter().map(|e| e.n_int).collect()
    }

    pub fn continuous(&self) -> Vec<f64> {
        self.allocations.iter().map(|e| e.n_cont).collect()
    }
}

/// Solves the relaxation, rounds it, and packages both.
pub fn plan(problem: &AllocationProblem) -> Result<AllocationPlan> {
    let cont = solve_continuous(problem)?;
    let int = round_allocation(problem, &cont.n)?;
    Ok(AllocationPlan {
        lambda_star: cont.lambda_star,
        objective_cont: problem.objective(&cont.n),
        objective_int: problem.objective_int(&int),
        allocations: problem
            .prompts
            .iter()
            .zip(cont.n.iter().zip(&int))
            .map(|(p, (&n_cont, &n_int))| PlanEntry {
                id: p.id.clone(),
                n_cont,
                n_int,
            })
            .collect(),
        degenerate: cont.degenerate,
    })
}

/// Outcome of [`check_plan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanCheck {
    pub ok: bool,
    pub budget_residual_cont: f64,
    pub max_kkt_residual: f64,
    pub violations: Vec<String>,
}

/// Independent validation of a plan against its problem: integer budget and
/// bounds, continuous budget, and the KKT certificate at `lambda_star`.
pub fn check_plan(problem: &AllocationProblem, plan: &AllocationPlan, kkt_tol: f64) -> PlanCheck {
    let mut violations = Vec::new();
    if plan.allocations.len() != problem.prompts.len() {
        violations.push(format!(
            "plan has {} entries for {} prompts",
            plan.allocations.len(),
            problem.prompts.len()
        ));
        return PlanCheck {
            ok: false,
            budget_residual_cont: f64::NAN,
            max_kkt_residual: f64::NAN,
            violations,
        };
    }
    let (lo, hi) = (problem.min as f64, problem.max as f64);
    let sum_int: u64 = plan.allocations.iter().map(|e| e.n_int as u64).sum();
    if sum_int != problem.budget {
        violations.push(format!(
            "integer allocations sum to {sum_int}, budget is {}",
            problem.budget
        ));
    }
    let sum_cont: f64 = plan.allocations.iter().map(|e| e.n_cont).sum();
    let budget_residual_cont = (sum_cont - problem.budget as f64).abs();
    if budget_residual_cont > BUDGET_TOLERANCE {
        violations.push(format!(
            "continuous allocations miss the budget by {budget_residual_cont:e}"
        ));
    }
    let lambda = plan.lambda_star;
    let mut max_kkt: f64 = 0.0;
    for (p, e) in problem.prompts.iter().zip(&plan.allocations) {
        if p.id != e.id {
            violations.push(format!(
                "plan id '{}' does not match problem id '{}'",
                e.id, p.id
            ));
        }
        if e.n_int < problem.min || e.n_int > problem.max {
            violations.push(format!(
                "'{}' has n_int = {} outside [{}, {}]",
                e.id, e.n_int, problem.min, problem.max
            ));
        }
        if !(e.n_cont >= lo && e.n_cont <= hi) {
            violations.push(format!(
                "'{}' has n_cont = {} outside [{lo}, {hi}]",
                e.id, e.n_cont
            ));
        }
        if plan.degenerate || p.a == 0.0 {
            continue;
        }
        let m = p.a * marginal(problem.family, e.n_cont);
        // KKT: interior ⇒ λ = a·g(n); at U ⇒ λ ≤ a·g(U); at L ⇒ λ ≥ a·g(L).
        let residual = if e.n_cont >= hi {
            (lambda - m).max(0.0)
        } else if e.n_cont <= lo {
            (m - lambda).max(0.0)
        } else {
            (lambda - m).abs()
        };
        max_kkt = max_kkt.max(residual);
        if residual > kkt_tol {
            violations.push(format!("'{}' violates stationarity by {residual:e}", e.id));
        }
    }
    PlanCheck {
        ok: violations.is_empty(),
        budget_residual_cont,
        max_kkt_residual: max_kkt,
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn objective_examples() {
        assert_abs_diff_eq!(
            per_prompt_objective(EstimatorFamily::DrGrpo, 1.0, 3.0).unwrap(),
            2.0 / 9.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            per_prompt_objective(EstimatorFamily::Rloo, 4.0, 6.0).unwrap(),
            0.8,
            epsilon = 1e-15
        );
        for n in [1.0, 2.0, 7.0] {
            assert_eq!(
                per_prompt_objective(EstimatorFamily::DrGrpo, 0.0, n).unwrap(),
                0.0
            );
        }
        assert!(per_prompt_objective(EstimatorFamily::Rloo, 1.0, 1.0).is_err());
        assert!(per_prompt_objective(EstimatorFamily::DrGrpo, 1.0, 0.5).is_err());
    }

    #[test]
    fn convexity_second_difference() {
        for a in [0.1, 1.0, 7.0] {
            // convex on [3, ∞), so the stencil needs n − 1 ≥ 3
            for n in 4..200 {
                let f = |k: u32| objective_unchecked(EstimatorFamily::DrGrpo, a, k as f64);
                assert!(f(n - 1) - 2.0 * f(n) + f(n + 1) >= 0.0, "drgrpo n={n}");
            }
            for n in 3..200 {
                let f = |k: u32| objective_unchecked(EstimatorFamily::Rloo, a, k as f64);
                assert!(f(n - 1) - 2.0 * f(n) + f(n + 1) >= 0.0, "rloo n={n}");
            }
        }
    }

    #[test]
    fn validation_messages() {
        let err = AllocationProblem::new(EstimatorFamily::Rloo, &[1.0, 1.0], 5, 3, 8).unwrap_err();
        assert!(
            matches!(err, VipError::Infeasible(ref m) if m.contains("B·L")),
            "{err}"
        );
        let err = AllocationProblem::new(EstimatorFamily::Rloo, &[1.0, 1.0], 17, 3, 8).unwrap_err();
        assert!(
            matches!(err, VipError::Infeasible(ref m) if m.contains("B·U")),
            "{err}"
        );
        assert!(AllocationProblem::new(EstimatorFamily::Rloo, &[1.0], 3, 2, 8).is_err());
        assert!(AllocationProblem::new(EstimatorFamily::Rloo, &[1.0], 5, 6, 4).is_err());
        assert!(AllocationProblem::new(EstimatorFamily::Rloo, &[-1.0], 5, 3, 8).is_err());
        assert!(AllocationProblem::new(EstimatorFamily::Rloo, &[], 0, 3, 8).is_err());
    }

    #[test]
    fn problem_file_shape() {
        let text = r#"{"family":"rloo","budget":9,"min":3,"max":8,"prompts":[{"id":"x","a":1},{"id":"y","a":4}]}"#;
        let p: AllocationProblem = serde_json::from_str(text).unwrap();
        let plan = plan(&p).unwrap();
        assert_eq!(plan.integer(), vec![3, 6]);
        let out = serde_json::to_value(&plan).unwrap();
        assert!(out.get("degenerate").is_none());
        assert_eq!(out["allocations"][1]["id"], "y");
        assert_eq!(out["allocations"][1]["n_int"], 6);
    }

    #[test]
    fn checker_flags_tampering() {
        let p = AllocationProblem::new(EstimatorFamily::Rloo, &[1.0, 4.0], 9, 3, 8).unwrap();
        let mut pl = plan(&p).unwrap();
        assert!(check_plan(&p, &pl, 1e-8).ok);
        pl.allocations[0].n_int += 1;
        let c = check_plan(&p, &pl, 1e-8);
        assert!(!c.ok);
        pl.allocations[0].n_int -= 1;
        pl.lambda_star *= 1.01;
        assert!(!check_plan(&p, &pl, 1e-8).ok);
    }
}
