use proptest::prelude::*;

use vip_core::allocator::{
    baseline_allocation, check_plan, kkt_inverse, per_prompt_objective, plan, round_allocation,
    solve_continuous, AllocationProblem, BaselineKind,
};
use vip_core::EstimatorFamily;

fn f(family: EstimatorFamily, a: f64, n: f64) -> f64 {
    match family {
        EstimatorFamily::DrGrpo => a * (n - 1.0) / (n * n),
        EstimatorFamily::Rloo => a / (n - 1.0),
    }
}

fn g(family: EstimatorFamily, n: f64) -> f64 {
    match family {
        EstimatorFamily::DrGrpo => (n - 2.0) / n.powi(3),
        EstimatorFamily::Rloo => 1.0 / ((n - 1.0) * (n - 1.0)),
    }
}

/// Smallest objective over every integer plan, by depth-first enumeration.
fn enumerate_optimum(family: EstimatorFamily, a: &[f64], budget: u32, min: u32, max: u32) -> f64 {
    fn go(
        family: EstimatorFamily,
        a: &[f64],
        left: u32,
        min: u32,
        max: u32,
        acc: f64,
        best: &mut f64,
    ) {
        let Some((&head, tail)) = a.split_first() else {
            if left == 0 {
                *best = best.min(acc);
            }
            return;
        };
        let rest = tail.len() as u32;
        for n in min..=max.min(left) {
            let remaining = left - n;
            if remaining < rest * min || remaining > rest * max {
                continue;
            }
            go(
                family,
                tail,
                remaining,
                min,
                max,
                acc + f(family, head, n as f64),
                best,
            );
        }
    }
    let mut best = f64::INFINITY;
    go(family, a, budget, min, max, 0.0, &mut best);
    best
}

fn family() -> impl Strategy<Value = EstimatorFamily> {
    prop_oneof![Just(EstimatorFamily::DrGrpo), Just(EstimatorFamily::Rloo)]
}

/// Feasible instance with strictly positive coefficients spread over six
/// orders of magnitude.
fn instance(max_b: usize) -> impl Strategy<Value = AllocationProblem> {
    (family(), 1..=max_b, 3u32..=6, 0u32..=30)
        .prop_flat_map(|(fam, b, min, width)| {
            let max = min + width;
            let lo = b as u64 * min as u64;
            let hi = b as u64 * max as u64;
            (
                Just(fam),
                prop::collection::vec(-3.0f64..3.0, b),
                lo..=hi,
                Just(min),
                Just(max),
            )
        })
        .prop_map(|(fam, log_a, budget, min, max)| {
            let a: Vec<f64> = log_a.iter().map(|e| 10f64.powf(*e)).collect();
            AllocationProblem::new(fam, &a, budget, min, max).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn continuous_solution_satisfies_kkt(p in instance(64)) {
        let s = solve_continuous(&p).unwrap();
        let (lo, hi) = (p.min as f64, p.max as f64);
        prop_assert!(s.budget_residual <= 1e-6);
        for (q, &n) in s.n.iter().enumerate() {
            let a = p.prompts[q].a;
            prop_assert!(n >= lo && n <= hi);
            if lo == hi {
                continue;
            }
            if n == lo {
                prop_assert!(s.lambda_star >= a * g(p.family, lo) - 1e-8);
            } else if n == hi {
                prop_assert!(s.lambda_star <= a * g(p.family, hi) + 1e-8);
            } else {
                prop_assert!((s.lambda_star - a * g(p.family, n)).abs() <= 1e-8, "q={q} n={n}");
            }
        }
    }

    #[test]
    fn integer_plan_is_feasible_and_checks(p in instance(64)) {
        let out = plan(&p).unwrap();
        let n = out.integer();
        prop_assert_eq!(n.iter().map(|&v| v as u64).sum::<u64>(), p.budget);
        prop_assert!(n.iter().all(|&v| v >= p.min && v <= p.max));
        let report = check_plan(&p, &out, 1e-8);
        prop_assert!(report.ok, "{:?}", report.violations);
    }

    #[test]
    fn scale_invariance(p in instance(32), c in prop_oneof![Just(1e-3), Just(1.0), Just(1e3)]) {
        let base = solve_continuous(&p).unwrap();
        let scaled_a: Vec<f64> = p.coefficients().iter().map(|a| a * c).collect();
        let scaled = AllocationProblem::new(p.family, &scaled_a, p.budget, p.min, p.max).unwrap();
        let s = solve_continuous(&scaled).unwrap();
        for (x, y) in base.n.iter().zip(&s.n) {
            prop_assert!((x - y).abs() <= 1e-8);
        }
        let rel = (s.lambda_star / c - base.lambda_star).abs() / base.lambda_star;
        prop_assert!(rel <= 1e-8);
    }

    #[test]
    fn budget_map_is_monotone(p in instance(16), grid in prop::collection::vec(1e-6f64..10.0, 2..40)) {
        let mut lambdas = grid;
        lambdas.sort_by(|a, b| b.total_cmp(a));
        let s = |l: f64| -> f64 {
            p.prompts.iter().map(|q| kkt_inverse(p.family, q.a, l, p.min as f64, p.max as f64).unwrap()).sum()
        };
        // decreasing λ never lowers the total
        for w in lambdas.windows(2) {
            prop_assert!(s(w[1]) >= s(w[0]));
        }
    }

    #[test]
    fn dominates_uniform_when_divisible(fam in family(), b in 1usize..24, per in 3u32..12, log_a in prop::collection::vec(-3.0f64..3.0, 24)) {
        let a: Vec<f64> = log_a[..b].iter().map(|e| 10f64.powf(*e)).collect();
        let budget = b as u64 * per as u64;
        let p = AllocationProblem::new(fam, &a, budget, 3, 16).unwrap();
        let vip = plan(&p).unwrap();
        let uniform = vec![per; b];
        prop_assert!(vip.objective_int <= p.objective_int(&uniform));
    }

    #[test]
    fn rounding_feasible_from_any_box_point(p in instance(64), t in prop::collection::vec(0.0f64..1.0, 64)) {
        // any point in the box, not only the optimum, rounds to a feasible plan
        let x: Vec<f64> = (0..p.len()).map(|q| p.min as f64 + t[q] * (p.max - p.min) as f64).collect();
        let n = round_allocation(&p, &x).unwrap();
        prop_assert_eq!(n.iter().map(|&v| v as u64).sum::<u64>(), p.budget);
        prop_assert!(n.iter().all(|&v| v >= p.min && v <= p.max));
    }

    #[test]
    fn baselines_are_feasible(p in instance(48), kind in prop_oneof![
        Just(BaselineKind::Uniform), Just(BaselineKind::InverseAccuracy), Just(BaselineKind::InverseVariance)
    ]) {
        let stats: Vec<f64> = p.coefficients().iter().map(|a| a / (1.0 + a)).collect();
        let n = baseline_allocation(kind, &stats, p.budget, p.min, p.max, 0.01).unwrap();
        prop_assert_eq!(n.iter().map(|&v| v as u64).sum::<u64>(), p.budget);
        prop_assert!(n.iter().all(|&v| v >= p.min && v <= p.max));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn greedy_matches_enumeration(fam in family(), b in 1usize..=4, min in 3u32..=5, width in 0u32..=6,
                                  log_a in prop::collection::vec(-2.0f64..2.0, 4), t in 0.0f64..=1.0) {
        let max = min + width;
        let a: Vec<f64> = log_a[..b].iter().map(|e| 10f64.powf(*e)).collect();
        let lo = b as u32 * min;
        let budget = lo + ((b as u32 * max - lo) as f64 * t).round() as u32;
        let p = AllocationProblem::new(fam, &a, budget as u64, min, max).unwrap();
        let got = plan(&p).unwrap().objective_int;
        let best = enumerate_optimum(fam, &a, budget, min, max);
        prop_assert!((got - best).abs() <= 1e-12 * best.max(1.0), "got {got}, enumeration {best}");
    }
}

#[test]
fn convexity_guard() {
    for a in [1e-3, 0.5, 1.0, 7.0] {
        // Dr.GRPO is convex on [3, ∞): the three-point stencil needs n − 1 ≥ 3
        for n in 4..400 {
            let fm = per_prompt_objective(EstimatorFamily::DrGrpo, a, (n - 1) as f64).unwrap();
            let f0 = per_prompt_objective(EstimatorFamily::DrGrpo, a, n as f64).unwrap();
            let fp = per_prompt_objective(EstimatorFamily::DrGrpo, a, (n + 1) as f64).unwrap();
            assert!(fm - 2.0 * f0 + fp >= 0.0, "Dr.GRPO n={n}");
        }
        for n in 3..400 {
            let fm = per_prompt_objective(EstimatorFamily::Rloo, a, (n - 1) as f64).unwrap();
            let f0 = per_prompt_objective(EstimatorFamily::Rloo, a, n as f64).unwrap();
            let fp = per_prompt_objective(EstimatorFamily::Rloo, a, (n + 1) as f64).unwrap();
            assert!(fm - 2.0 * f0 + fp >= 0.0, "RLOO n={n}");
        }
    }
    // continuous second derivative 2a(n − 3)/n⁴ is non-negative from n = 3 on
    for k in 0..1000 {
        let n = 3.0 + k as f64 * 0.05;
        assert!(2.0 * (n - 3.0) / n.powi(4) >= 0.0);
    }
    // and the stencil at n = 3 does dip below zero
    let d = f(EstimatorFamily::DrGrpo, 1.0, 2.0) - 2.0 * f(EstimatorFamily::DrGrpo, 1.0, 3.0)
        + f(EstimatorFamily::DrGrpo, 1.0, 4.0);
    assert!(d < 0.0);
}

#[test]
fn worked_instances_round_trip_through_files() {
    let text = r#"{"family":"rloo","budget":9,"min":3,"max":8,"prompts":[{"id":"x","a":1.0},{"id":"y","a":4.0}]}"#;
    let p: AllocationProblem = serde_json::from_str(text).unwrap();
    let out = plan(&p).unwrap();
    assert_eq!(out.integer(), vec![3, 6]);
    assert_eq!(out.allocations[1].id, "y");
    let json = serde_json::to_string(&out).unwrap();
    let back: vip_core::AllocationPlan = serde_json::from_str(&json).unwrap();
    assert_eq!(back, out);
}

#[test]
fn infeasible_budget_names_the_bound() {
    let err = AllocationProblem::new(EstimatorFamily::Rloo, &[1.0, 2.0], 5, 3, 8).unwrap_err();
    assert!(err.to_string().contains("B·L"), "{err}");
    let err = AllocationProblem::new(EstimatorFamily::Rloo, &[1.0, 2.0], 17, 3, 8).unwrap_err();
    assert!(err.to_string().contains("B·U"), "{err}");
}
