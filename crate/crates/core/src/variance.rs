//! Per-prompt gradient variance of group-relative estimators.
//!
//! For a prompt with `n` rollouts, rewards `R̃ⱼ` and projected log-likelihood
//! gradients `Z̃ⱼ` (variance `σ_Z²`), the projected gradient is
//! `G̃ = (1/n) Σ Ãⱼ Z̃ⱼ` with advantage
//!
//! * Dr.GRPO: `Ãⱼ = R̃ⱼ − (1/n) Σₖ R̃ₖ`, giving `Var = σ_Z² Var(R̃) (n−1)/n²`;
//! * RLOO: `Ãⱼ = R̃ⱼ − (1/(n−1)) Σ_{k≠j} R̃ₖ`, giving `Var = σ_Z² Var(R̃)/(n−1)`.
//!
//! With ±1 rewards `Var(R̃) = 4p(1−p)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VipError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorFamily {
    #[serde(rename = "drgrpo")]
    DrGrpo,
    #[serde(rename = "rloo")]
    Rloo,
}

impl EstimatorFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorFamily::DrGrpo => "drgrpo",
            EstimatorFamily::Rloo => "rloo",
        }
    }

    /// `Var(G̃) / (σ_Z² Var(R̃))` as a function of the rollout count.
    pub fn count_factor(self, n: f64) -> f64 {
        match self {
            EstimatorFamily::DrGrpo => (n - 1.0) / (n * n),
            EstimatorFamily::Rloo => 1.0 / (n - 1.0),
        }
    }
}

impl std::str::FromStr for EstimatorFamily {
    type Err = VipError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "drgrpo" | "dr.grpo" | "dr_grpo" => Ok(EstimatorFamily::DrGrpo),
            "rloo" => Ok(EstimatorFamily::Rloo),
            other => Err(VipError::invalid(format!(
                "unknown estimator family '{other}'"
            ))),
        }
    }
}

impl std::fmt::Display for EstimatorFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What the reward model predicts for a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSignal {
    /// Binary ±1 rewards with this success probability.
    SuccessProbability(f64),
    /// Continuous rewards with this variance.
    RewardVariance(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceInputs {
    pub signal: RewardSignal,
    pub sigma_z2: f64,
}

impl VarianceInputs {
    pub fn binary(p_hat: f64) -> Self {
        Self {
            signal: RewardSignal::SuccessProbability(p_hat),
            sigma_z2: 1.0,
        }
    }

    pub fn continuous(r_var: f64) -> Self {
        Self {
            signal: RewardSignal::RewardVariance(r_var),
            sigma_z2: 1.0,
        }
    }

    pub fn with_sigma_z2(mut self, sigma_z2: f64) -> Self {
        self.sigma_z2 = sigma_z2;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma_z2 > 0.0 && self.sigma_z2.is_finite()) {
            return Err(VipError::invalid(format!(
                "sigma_z2 must be positive, got {}",
                self.sigma_z2
            )));
        }
        match self.signal {
            RewardSignal::SuccessProbability(p) if !(0.0..=1.0).contains(&p) => Err(
                VipError::invalid(format!("success probability must lie in [0, 1], got {p}")),
            ),
            RewardSignal::RewardVariance(v) if !(v >= 0.0 && v.is_finite()) => {
                Err(VipError::invalid(format!(
                    "reward variance must be finite and non-negative, got {v}"
                )))
            }
            _ => Ok(()),
        }
    }

    /// `Var(R̃)`: `4p(1−p)` for ±1 rewards, the supplied variance otherwise.
    pub fn reward_variance(&self) -> f64 {
        match self.signal {
            RewardSignal::SuccessProbability(p) => 4.0 * p * (1.0 - p),
            RewardSignal::RewardVariance(v) => v,
        }
    }
}

/// Closed-form `Var(G̃)` for `n ≥ 2` rollouts.
pub fn gradient_variance(family: EstimatorFamily, inputs: &VarianceInputs, n: u32) -> Result<f64> {
    inputs.validate()?;
    if n < 2 {
        return Err(VipError::invalid(format!(
            "rollout count must be at least 2, got {n}"
        )));
    }
    Ok(inputs.sigma_z2 * inputs.reward_variance() * family.count_factor(n as f64))
}

/// `a_q = σ_Z² Var(R̃)`, i.e. `4σ_Z² p̂(1−p̂)` in the binary case.
pub fn allocation_coefficient(inputs: &VarianceInputs) -> Result<f64> {
    inputs.validate()?;
    Ok(inputs.sigma_z2 * inputs.reward_variance())
}

/// Reward distribution for the Monte Carlo oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardSampler {
    /// `+1` with probability `p`, else `−1`.
    Bernoulli { p: f64 },
    /// Uniform on `[low, high]`.
    Uniform { low: f64, high: f64 },
}

impl RewardSampler {
    pub fn variance(&self) -> f64 {
        match *self {
            RewardSampler::Bernoulli { p } => 4.0 * p * (1.0 - p),
            RewardSampler::Uniform { low, high } => (high - low) * (high - low) / 12.0,
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            RewardSampler::Bernoulli { p } => {
                if rng.random::<f64>() < p {
                    1.0
                } else {
                    -1.0
                }
            }
            RewardSampler::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
        }
    }
}

/// Settings for [`monte_carlo_variance`]. `Z̃` is Gaussian with mean `z_mean`
/// and variance `sigma_z2`; a non-zero mean exercises the fact that `μ_Z`
/// drops out of the variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub family: EstimatorFamily,
    pub rewards: RewardSampler,
    pub sigma_z2: f64,
    pub z_mean: f64,
    pub n: u32,
    pub trials: u64,
    pub seed: u64,
}

const MC_CHUNK: u64 = 1 << 16;

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    count: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.count += 1.0;
        let d = x - self.mean;
        self.mean += d / self.count;
        self.m2 += d * (x - self.mean);
    }

    fn merge(self, other: Moments) -> Moments {
        if self.count == 0.0 {
            return other;
        }
        if other.count == 0.0 {
            return self;
        }
        let count = self.count + other.count;
        let d = other.mean - self.mean;
        Moments {
            count,
            mean: self.mean + d * other.count / count,
            m2: self.m2 + other.m2 + d * d * self.count * other.count / count,
        }
    }
}

/// Empirical variance of `G̃` over independent replications.
///
/// Trials are split into fixed chunks of 65 536; chunk `c` draws from the
/// ChaCha8 stream `c` of `seed`, and chunk moments are merged in chunk order,
/// so the result does not depend on how chunks are scheduled across threads.
pub fn monte_carlo_variance(cfg: &MonteCarloConfig) -> Result<f64> {
    if cfg.trials < 2 {
        return Err(VipError::invalid("Monte Carlo needs at least 2 trials"));
    }
    if cfg.n < 2 {
        return Err(VipError::invalid(format!(
            "rollout count must be at least 2, got {}",
            cfg.n
        )));
    }
    if !(cfg.sigma_z2 > 0.0 && cfg.sigma_z2.is_finite()) || !cfg.z_mean.is_finite() {
        return Err(VipError::invalid(
            "Z distribution parameters must be finite with positive variance",
        ));
    }
    match cfg.rewards {
        RewardSampler::Bernoulli { p } if !(0.0..=1.0).contains(&p) => {
            return Err(VipError::invalid(format!(
                "success probability must lie in [0, 1], got {p}"
            )))
        }
        RewardSampler::Uniform { low, high }
            if !(low <= high && low.is_finite() && high.is_finite()) =>
        {
            return Err(VipError::invalid(
                "uniform reward bounds must be finite with low ≤ high",
            ))
        }
        _ => {}
    }
    let chunks = cfg.trials.div_ceil(MC_CHUNK);
    let parts: Vec<Moments> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let len = MC_CHUNK.min(cfg.trials - c * MC_CHUNK);
            simulate_chunk(cfg, c, len)
        })
        .collect();
    let total = parts.into_iter().fold(Moments::default(), Moments::merge);
    Ok(total.m2 / (total.count - 1.0))
}

/// Grid for [`monte_carlo_grid`]: every combination of family, sampler,
/// rollout count and `μ_Z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloGrid {
    pub families: Vec<EstimatorFamily>,
    pub samplers: Vec<RewardSampler>,
    pub counts: Vec<u32>,
    pub z_means: Vec<f64>,
    pub sigma_z2: f64,
    pub trials: u64,
    pub seed: u64,
}

impl MonteCarloGrid {
    /// `n ∈ {2, 4, 8, 16}`, `p ∈ {0.1, 0.3, 0.5, 0.7, 0.9}`, `μ_Z ∈ {0, 1, 5}`.
    pub fn binary_default(trials: u64, seed: u64) -> Self {
        Self {
            families: vec![EstimatorFamily::DrGrpo, EstimatorFamily::Rloo],
            samplers: [0.1, 0.3, 0.5, 0.7, 0.9]
                .map(|p| RewardSampler::Bernoulli { p })
                .to_vec(),
            counts: vec![2, 4, 8, 16],
            z_means: vec![0.0, 1.0, 5.0],
            sigma_z2: 1.0,
            trials,
            seed,
        }
    }

    /// Same counts and means with rewards uniform on `[−1, 1]`.
    pub fn uniform_default(trials: u64, seed: u64) -> Self {
        Self {
            samplers: vec![RewardSampler::Uniform {
                low: -1.0,
                high: 1.0,
            }],
            ..Self::binary_default(trials, seed)
        }
    }
}

/// One row of a Monte Carlo validation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloCell {
    pub family: EstimatorFamily,
    pub sampler: RewardSampler,
    pub n: u32,
    pub z_mean: f64,
    pub closed_form: f64,
    pub monte_carlo: f64,
    /// `|mc − cf| / cf`, or `|mc|` when the closed form is zero.
    pub rel_error: f64,
}

/// Closed form against simulation over a grid. Cell `k` (in nesting order
/// family, sampler, n, μ_Z) uses seed `seed + k`.
pub fn monte_carlo_grid(grid: &MonteCarloGrid) -> Result<Vec<MonteCarloCell>> {
    let mut cells = Vec::new();
    for &family in &grid.families {
        for &sampler in &grid.samplers {
            for &n in &grid.counts {
                for &z_mean in &grid.z_means {
                    cells.push((family, sampler, n, z_mean));
                }
            }
        }
    }
    cells
        .into_iter()
        .enumerate()
        .map(|(k, (family, sampler, n, z_mean))| {
            let cfg = MonteCarloConfig {
                family,
                rewards: sampler,
                sigma_z2: grid.sigma_z2,
                z_mean,
                n,
                trials: grid.trials,
                seed: grid.seed.wrapping_add(k as u64),
            };
            let monte_carlo = monte_carlo_variance(&cfg)?;
            let closed_form = grid.sigma_z2 * sampler.variance() * family.count_factor(n as f64);
            let rel_error = if closed_form > 0.0 {
                (monte_carlo - closed_form).abs() / closed_form
            } else {
                monte_carlo.abs()
            };
            Ok(MonteCarloCell {
                family,
                sampler,
                n,
                z_mean,
                closed_form,
                monte_carlo,
                rel_error,
            })
        })
        .collect()
}

fn simulate_chunk(cfg: &MonteCarloConfig, chunk: u64, len: u64) -> Moments {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chunk);
    let n = cfg.n as usize;
    let sd = cfg.sigma_z2.sqrt();
    let nf = n as f64;
    let mut r = vec![0.0; n];
    let mut moments = Moments::default();
    for _ in 0..len {
        let mut sum_r = 0.0;
        for rj in r.iter_mut() {
            *rj = cfg.rewards.sample(&mut rng);
            sum_r += *rj;
        }
        let mut g = 0.0;
        for &rj in &r {
            let z: f64 = cfg.z_mean
                + sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            let advantage = match cfg.family {
                EstimatorFamily::DrGrpo => rj - sum_r / nf,
                EstimatorFamily::Rloo => rj - (sum_r - rj) / (nf - 1.0),
            };
            g += advantage * z;
        }
        moments.push(g / nf);
    }
    moments
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn closed_form_examples() {
        let half = VarianceInputs::binary(0.5);
        assert_abs_diff_eq!(
            gradient_variance(EstimatorFamily::DrGrpo, &half, 8).unwrap(),
            0.109375,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            gradient_variance(EstimatorFamily::Rloo, &half, 8).unwrap(),
            1.0 / 7.0,
            epsilon = 1e-15
        );
        for fam in [EstimatorFamily::DrGrpo, EstimatorFamily::Rloo] {
            assert_eq!(
                gradient_variance(fam, &VarianceInputs::binary(0.0), 4).unwrap(),
                0.0
            );
            assert_eq!(
                gradient_variance(fam, &VarianceInputs::binary(1.0), 4).unwrap(),
                0.0
            );
            assert!(gradient_variance(fam, &half, 1).is_err());
        }
    }

    #[test]
    fn coefficient_examples() {
        assert_abs_diff_eq!(
            allocation_coefficient(&VarianceInputs::binary(0.5)).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            allocation_coefficient(&VarianceInputs::binary(0.9)).unwrap(),
            0.36,
            epsilon = 1e-15
        );
        let c = VarianceInputs::continuous(2.0).with_sigma_z2(0.5);
        assert_abs_diff_eq!(allocation_coefficient(&c).unwrap(), 1.0, epsilon = 1e-15);
        assert!(allocation_coefficient(&VarianceInputs::binary(0.5).with_sigma_z2(0.0)).is_err());
        assert!(allocation_coefficient(&VarianceInputs::binary(1.5)).is_err());
    }

    #[test]
    fn monotone_in_rollouts() {
        let v = VarianceInputs::binary(0.3);
        for n in 3..64 {
            let a = gradient_variance(EstimatorFamily::DrGrpo, &v, n).unwrap();
            let b = gradient_variance(EstimatorFamily::DrGrpo, &v, n + 1).unwrap();
            assert!(b < a);
        }
        for n in 2..64 {
            let a = gradient_variance(EstimatorFamily::Rloo, &v, n).unwrap();
            let b = gradient_variance(EstimatorFamily::Rloo, &v, n + 1).unwrap();
            assert!(b < a);
        }
    }

    #[test]
    fn constant_rewards_give_zero_empirical_variance() {
        for family in [EstimatorFamily::DrGrpo, EstimatorFamily::Rloo] {
            let cfg = MonteCarloConfig {
                family,
                rewards: RewardSampler::Bernoulli { p: 1.0 },
                sigma_z2: 1.0,
                z_mean: 1.0,
                n: 8,
                trials: 1000,
                seed: 3,
            };
            assert_eq!(monte_carlo_variance(&cfg).unwrap(), 0.0);
        }
    }

    #[test]
    fn monte_carlo_is_deterministic_and_close() {
        let cfg = MonteCarloConfig {
            family: EstimatorFamily::Rloo,
            rewards: RewardSampler::Bernoulli { p: 0.5 },
            sigma_z2: 1.0,
            z_mean: 1.0,
            n: 8,
            trials: 200_000,
            seed: 11,
        };
        let a = monte_carlo_variance(&cfg).unwrap();
        let b = monte_carlo_variance(&cfg).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!((a - 1.0 / 7.0).abs() / (1.0 / 7.0) < 0.03, "{a}");
    }

    #[test]
    fn moments_merge_matches_serial() {
        let xs: Vec<f64> = (0..100).map(|i| ((i * 37) % 11) as f64 - 3.0).collect();
        let mut whole = Moments::default();
        xs.iter().for_each(|&x| whole.push(x));
        let mut a = Moments::default();
        let mut b = Moments::default();
        xs[..37].iter().for_each(|&x| a.push(x));
        xs[37..].iter().for_each(|&x| b.push(x));
        let merged = a.merge(b);
        assert_abs_diff_eq!(merged.m2, whole.m2, epsilon = 1e-9);
        assert_abs_diff_eq!(merged.mean, whole.mean, epsilon = 1e-12);
    }
}
