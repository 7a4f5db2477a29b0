use crate::allocator::AllocationProblem;
use crate::error::{Result, VipError};
use crate::variance::EstimatorFamily;

/// Largest accepted `|Σ n_q − C|` for the continuous solution.
pub const BUDGET_TOLERANCE: f64 = 1e-6;

const MAX_OUTER_ITERATIONS: usize = 200;
const BRACKET_SLACK: f64 = 1e-12;

/// Marginal map `g(n) = −f'(n)/a`: `(n−2)/n³` for Dr.GRPO, `1/(n−1)²` for RLOO.
/// Strictly decreasing for `n ≥ 3` in both families.
#[inline]
pub fn marginal(family: EstimatorFamily, n: f64) -> f64 {
    match family {
        EstimatorFamily::DrGrpo => (n - 2.0) / (n * n * n),
        EstimatorFamily::Rloo => 1.0 / ((n - 1.0) * (n - 1.0)),
    }
}

/// Per-coordinate KKT solution `n_q*(λ)` clamped to `[min, max]`.
///
/// A zero coefficient returns `min`: the lower-bound condition `λ ≥ 0` holds
/// for every positive multiplier.
pub fn kkt_inverse(
    family: EstimatorFamily,
    a: f64,
    lambda: f64,
    min: f64,
    max: f64,
) -> Result<f64> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(VipError::invalid(format!(
            "multiplier must be positive, got {lambda}"
        )));
    }
    if !(a >= 0.0 && a.is_finite()) {
        return Err(VipError::invalid(format!(
            "coefficient must be finite and ≥ 0, got {a}"
        )));
    }
    if !(min >= 3.0 && min <= max) {
        return Err(VipError::invalid(format!(
            "bounds must satisfy 3 ≤ min ≤ max, got [{min}, {max}]"
        )));
    }
    Ok(kkt_inverse_unchecked(family, a, lambda, min, max))
}

fn kkt_inverse_unchecked(family: EstimatorFamily, a: f64, lambda: f64, min: f64, max: f64) -> f64 {
    if a == 0.0 {
        return min;
    }
    if lambda <= a * marginal(family, max) {
        return max;
    }
    if lambda >= a * marginal(family, min) {
        return min;
    }
    match family {
        EstimatorFamily::Rloo => (1.0 + (a / lambda).sqrt()).clamp(min, max),
        EstimatorFamily::DrGrpo => {
            // Root of λn³ − a·n + 2a on (min, max); a·g(n) − λ changes sign there.
            let (mut lo, mut hi) = (min, max);
            loop {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break mid;
                }
                if a * marginal(family, mid) > lambda {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
        }
    }
}

/// Continuous minimiser of the relaxed problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousSolution {
    pub n: Vec<f64>,
    pub lambda_star: f64,
    pub iterations: usize,
    pub budget_residual: f64,
    /// All coefficients were zero; `n` is the uniform split `C/B`.
    pub degenerate: bool,
}

fn total(problem: &AllocationProblem, lambda: f64, min: f64, max: f64) -> f64 {
    problem
        .prompts
        .iter()
        .map(|p| kkt_inverse_unchecked(problem.family, p.a, lambda, min, max))
        .sum()
}

/// Solves the relaxation by bisection on `λ` over the budget equation
/// `S(λ) = Σ n_q*(λ) = C`, where `S` is non-increasing.
///
/// Prompts with `a_q = 0` are indifferent to their allocation. They sit at
/// `min` unless the informative prompts saturate at `max`, in which case the
/// leftover budget is spread evenly over them.
pub fn solve_continuous(problem: &AllocationProblem) -> Result<ContinuousSolution> {
    problem.validate()?;
    let family = problem.family;
    let (min, max) = (problem.min as f64, problem.max as f64);
    let budget = problem.budget as f64;
    let b = problem.len();

    let positive: Vec<f64> = problem
        .prompts
        .iter()
        .map(|p| p.a)
        .filter(|&a| a > 0.0)
        .collect();
    if positive.is_empty() {
        return Ok(ContinuousSolution {
            n: vec![budget / b as f64; b],
            lambda_star: 0.0,
            iterations: 0,
            budget_residual: 0.0,
            degenerate: true,
        });
    }
    let lambda_floor = positive
        .iter()
        .map(|&a| a * marginal(family, max))
        .fold(f64::INFINITY, f64::min);
    let lambda_ceil = positive
        .iter()
        .map(|&a| a * marginal(family, min))
        .fold(f64::NEG_INFINITY, f64::max);

    let zero_count = b - positive.len();
    let saturated = positive.len() as f64 * max + zero_count as f64 * min;
    if budget >= saturated {
        // Informative prompts all at max; any excess goes to the indifferent ones.
        let spill = if zero_count > 0 {
            min + (budget - saturated) / zero_count as f64
        } else {
            min
        };
        let n: Vec<f64> = problem
            .prompts
            .iter()
            .map(|p| if p.a > 0.0 { max } else { spill })
            .collect();
        return Ok(finish(n, lambda_floor, 0, budget));
    }
    if budget <= b as f64 * min {
        return Ok(finish(vec![min; b], lambda_ceil, 0, budget));
    }

    let mut lo = lambda_floor * (1.0 - BRACKET_SLACK);
    let mut hi = lambda_ceil * (1.0 + BRACKET_SLACK);
    let mut best = (f64::INFINITY, 0.5 * (lo + hi));
    let mut iterations = 0;
    while iterations < MAX_OUTER_ITERATIONS {
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let s = total(problem, mid, min, max);
        let gap = (s - budget).abs();
        if gap < best.0 {
            best = (gap, mid);
        }
        if gap == 0.0 {
            break;
        }
        if s > budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lambda = best.1;
    let n: Vec<f64> = problem
        .prompts
        .iter()
        .map(|p| kkt_inverse_unchecked(family, p.a, lambda, min, max))
        .collect();
    let sol = finish(n, lambda, iterations, budget);
    if sol.budget_residual > BUDGET_TOLERANCE {
        return Err(VipError::Numerical(format!(
            "bisection stopped after {iterations} iterations with budget residual {:e} at λ = {lambda:e}",
            sol.budget_residual
        )));
    }
    Ok(sol)
}

fn finish(n: Vec<f64>, lambda_star: f64, iterations: usize, budget: f64) -> ContinuousSolution {
    let budget_residual = (n.iter().sum::<f64>() - budget).abs();
    ContinuousSolution {
        n,
        lambda_star,
        iterations,
        budget_residual,
        degenerate: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rloo_inverse_branches() {
        let n = kkt_inverse(EstimatorFamily::Rloo, 1.0, 9.0 / 49.0, 3.0, 8.0).unwrap();
        assert_abs_diff_eq!(n, 10.0 / 3.0, epsilon = 1e-12);
        assert_eq!(
            kkt_inverse(EstimatorFamily::Rloo, 1.0, 1.0, 3.0, 8.0).unwrap(),
            3.0
        );
        assert_eq!(
            kkt_inverse(EstimatorFamily::Rloo, 1.0, 1e-4, 3.0, 8.0).unwrap(),
            8.0
        );
    }

    #[test]
    fn drgrpo_inverse_interior_root() {
        let n = kkt_inverse(EstimatorFamily::DrGrpo, 4.0, 28.0 / 729.0, 3.0, 16.0).unwrap();
        assert_abs_diff_eq!(n, 9.0, epsilon = 1e-12);
        // the root satisfies the cubic λn³ − a·n + 2a = 0
        let lambda = 28.0 / 729.0;
        assert_abs_diff_eq!(lambda * n.powi(3) - 4.0 * n + 8.0, 0.0, epsilon = 1e-10);
    }

    #[test]
    fn inverse_edge_cases() {
        assert_eq!(
            kkt_inverse(EstimatorFamily::DrGrpo, 0.0, 0.5, 3.0, 9.0).unwrap(),
            3.0
        );
        assert!(kkt_inverse(EstimatorFamily::DrGrpo, 1.0, 0.0, 3.0, 9.0).is_err());
        assert!(kkt_inverse(EstimatorFamily::DrGrpo, 1.0, -1.0, 3.0, 9.0).is_err());
        assert!(kkt_inverse(EstimatorFamily::Rloo, 1.0, 0.1, 2.0, 9.0).is_err());
    }

    #[test]
    fn worked_instances() {
        let p = AllocationProblem::new(EstimatorFamily::Rloo, &[1.0, 4.0], 9, 3, 8).unwrap();
        let s = solve_continuous(&p).unwrap();
        assert_abs_diff_eq!(s.n[0], 10.0 / 3.0, epsilon = 1e-8);
        assert_abs_diff_eq!(s.n[1], 17.0 / 3.0, epsilon = 1e-8);
        assert_abs_diff_eq!(s.lambda_star, 9.0 / 49.0, epsilon = 1e-8);

        let p = AllocationProblem::new(EstimatorFamily::DrGrpo, &[1.0, 4.0], 12, 3, 16).unwrap();
        let s = solve_continuous(&p).unwrap();
        assert_abs_diff_eq!(s.n[0], 3.0, epsilon = 1e-8);
        assert_abs_diff_eq!(s.n[1], 9.0, epsilon = 1e-8);
        assert_abs_diff_eq!(s.lambda_star, 28.0 / 729.0, epsilon = 1e-8);
    }

    #[test]
    fn equal_coefficients_split_evenly() {
        for family in [EstimatorFamily::DrGrpo, EstimatorFamily::Rloo] {
            let p = AllocationProblem::new(family, &[0.7; 5], 40, 3, 16).unwrap();
            let s = solve_continuous(&p).unwrap();
            for n in s.n {
                assert_abs_diff_eq!(n, 8.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn all_zero_coefficients_are_degenerate() {
        let p = AllocationProblem::new(EstimatorFamily::Rloo, &[0.0; 4], 26, 3, 8).unwrap();
        let s = solve_continuous(&p).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.n, vec![6.5; 4]);
    }

    #[test]
    fn zero_coefficients_absorb_overflow() {
        let p =
            AllocationProblem::new(EstimatorFamily::DrGrpo, &[0.0, 1.0, 0.0], 20, 3, 8).unwrap();
        let s = solve_continuous(&p).unwrap();
        assert_eq!(s.n, vec![6.0, 8.0, 6.0]);
        let p = AllocationProblem::new(EstimatorFamily::DrGrpo, &[0.0, 1.0], 11, 3, 8).unwrap();
        let s = solve_continuous(&p).unwrap();
        assert_eq!(s.n, vec![3.0, 8.0]);
    }

    #[test]
    fn extreme_budgets() {
        let p = AllocationProblem::new(EstimatorFamily::Rloo, &[0.3, 2.0, 1.0], 9, 3, 8).unwrap();
        assert_eq!(solve_continuous(&p).unwrap().n, vec![3.0; 3]);
        let p = AllocationProblem::new(EstimatorFamily::Rloo, &[0.3, 2.0, 1.0], 24, 3, 8).unwrap();
        assert_eq!(solve_continuous(&p).unwrap().n, vec![8.0; 3]);
    }
}
