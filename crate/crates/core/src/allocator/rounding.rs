use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::allocator::{objective_unchecked, AllocationProblem};
use crate::error::{Result, VipError};

/// Heap entry ordered by incentive, then by smallest index.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    gain: f64,
    index: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.gain
            .total_cmp(&other.gain)
            .then_with(|| other.index.cmp(&self.index))
    }
}

/// Greedy unit-by-unit completion of an integer starting point.
///
/// `gain(q, n)` is the value of moving prompt `q` from `n` to `n + 1`; units go
/// to the largest gain among prompts below `max`, ties to the smallest index.
/// Surplus units (start above budget) are taken back from the prompts whose
/// removal costs least.
pub(crate) fn greedy_fill(
    start: Vec<u32>,
    budget: u64,
    min: u32,
    max: u32,
    gain: impl Fn(usize, u32) -> f64,
) -> Result<Vec<u32>> {
    let mut n = start;
    let sum: u64 = n.iter().map(|&v| v as u64).sum();
    if sum < budget {
        let mut heap: BinaryHeap<Candidate> = (0..n.len())
            .filter(|&q| n[q] < max)
            .map(|q| Candidate {
                gain: gain(q, n[q]),
                index: q,
            })
            .collect();
        for _ in sum..budget {
            let c = heap.pop().ok_or_else(|| {
                VipError::Infeasible("no prompt has room below the upper bound".into())
            })?;
            n[c.index] += 1;
            if n[c.index] < max {
                heap.push(Candidate {
                    gain: gain(c.index, n[c.index]),
                    index: c.index,
                });
            }
        }
    } else if sum > budget {
        // Largest (negated cost) first, i.e. cheapest removal.
        let mut heap: BinaryHeap<Candidate> = (0..n.len())
            .filter(|&q| n[q] > min)
            .map(|q| Candidate {
                gain: -gain(q, n[q] - 1),
                index: q,
            })
            .collect();
        for _ in budget..sum {
            let c = heap.pop().ok_or_else(|| {
                VipError::Infeasible("no prompt has room above the lower bound".into())
            })?;
            n[c.index] -= 1;
            if n[c.index] > min {
                heap.push(Candidate {
                    gain: -gain(c.index, n[c.index] - 1),
                    index: c.index,
                });
            }
        }
    }
    Ok(n)
}

/// Integer plan from a continuous solution: floors, then the remaining units
/// one at a time to the prompt with the largest decrease `f_q(n) − f_q(n+1)`.
pub fn round_allocation(problem: &AllocationProblem, n_star: &[f64]) -> Result<Vec<u32>> {
    problem.validate()?;
    if n_star.len() != problem.len() {
        return Err(VipError::invalid(format!(
            "continuous solution has {} entries for {} prompts",
            n_star.len(),
            problem.len()
        )));
    }
    let (min, max) = (problem.min, problem.max);
    let tol = 1e-6;
    if let Some((q, v)) = n_star
        .iter()
        .enumerate()
        .find(|(_, &v)| !(v >= min as f64 - tol && v <= max as f64 + tol))
    {
        return Err(VipError::invalid(format!(
            "n*[{q}] = {v} lies outside [{min}, {max}]"
        )));
    }
    let floors: Vec<u32> = n_star
        .iter()
        .map(|&v| (v.floor() as u32).clamp(min, max))
        .collect();
    let family = problem.family;
    let coeffs = problem.coefficients();
    greedy_fill(floors, problem.budget, min, max, |q, n| {
        let a = coeffs[q];
        objective_unchecked(family, a, n as f64) - objective_unchecked(family, a, n as f64 + 1.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::solve_continuous;
    use crate::variance::EstimatorFamily;

    #[test]
    fn rloo_worked_instance() {
        let p = AllocationProblem::new(EstimatorFamily::Rloo, &[1.0, 4.0], 9, 3, 8).unwrap();
        let n = round_allocation(&p, &[10.0 / 3.0, 17.0 / 3.0]).unwrap();
        assert_eq!(n, vec![3, 6]);
        assert!((p.objective_int(&n) - 1.3).abs() < 1e-12);
    }

    #[test]
    fn integer_solution_unchanged() {
        let p = AllocationProblem::new(EstimatorFamily::DrGrpo, &[1.0, 4.0], 12, 3, 16).unwrap();
        assert_eq!(round_allocation(&p, &[3.0, 9.0]).unwrap(), vec![3, 9]);
    }

    #[test]
    fn zero_coefficient_stays_low() {
        let p = AllocationProblem::new(EstimatorFamily::DrGrpo, &[0.0, 1.0], 11, 3, 8).unwrap();
        let s = solve_continuous(&p).unwrap();
        assert_eq!(round_allocation(&p, &s.n).unwrap(), vec![3, 8]);
    }

    #[test]
    fn ties_go_to_smallest_index() {
        let p = AllocationProblem::new(EstimatorFamily::Rloo, &[1.0, 1.0, 1.0], 10, 3, 8).unwrap();
        assert_eq!(
            round_allocation(&p, &[3.0, 3.0, 3.0]).unwrap(),
            vec![4, 3, 3]
        );
    }

    #[test]
    fn surplus_is_removed() {
        let p = AllocationProblem::new(EstimatorFamily::Rloo, &[1.0, 4.0], 9, 3, 8).unwrap();
        assert_eq!(round_allocation(&p, &[4.0, 6.0]).unwrap(), vec![3, 6]);
    }

    #[test]
    fn rejects_out_of_box_inputs() {
        let p = AllocationProblem::new(EstimatorFamily::Rloo, &[1.0, 4.0], 9, 3, 8).unwrap();
        assert!(round_allocation(&p, &[2.0, 7.0]).is_err());
        assert!(round_allocation(&p, &[3.0]).is_err());
    }
}
