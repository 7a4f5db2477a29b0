use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocator::{
    baseline_allocation, plan, AllocationProblem, BaselineKind, DEFAULT_BASELINE_EPS,
};
use crate::belief::DEFAULT_CLIP_EPS;
use crate::error::{Result, VipError};
use crate::simulator::predictor::{Predictor, PredictorKind};
use crate::simulator::world::World;
use crate::variance::EstimatorFamily;

const BATCH_STREAM: u64 = 2;
const REWARD_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Vip,
    Uniform,
    InverseAccuracy,
    InverseVariance,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Vip => "vip",
            Strategy::Uniform => "uniform",
            Strategy::InverseAccuracy => "inverse_accuracy",
            Strategy::InverseVariance => "inverse_variance",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = VipError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vip" => Ok(Strategy::Vip),
            "uniform" => Ok(Strategy::Uniform),
            "inverse_accuracy" | "inverse-accuracy" => Ok(Strategy::InverseAccuracy),
            "inverse_variance" | "inverse-variance" => Ok(Strategy::InverseVariance),
            other => Err(VipError::invalid(format!("unknown strategy '{other}'"))),
        }
    }
}

/// Per-run loop settings shared by every strategy of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub family: EstimatorFamily,
    pub budget: u64,
    pub batch_size: usize,
    pub min: u32,
    pub max: u32,
    pub steps: usize,
    pub clip_eps: f64,
    pub sigma_z2: f64,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            family: EstimatorFamily::Rloo,
            budget: 512,
            batch_size: 32,
            min: 3,
            max: 32,
            steps: 60,
            clip_eps: DEFAULT_CLIP_EPS,
            sigma_z2: 1.0,
        }
    }
}

impl RunSettings {
    pub fn validate(&self, prompts: usize) -> Result<()> {
        if self.steps == 0 {
            return Err(VipError::invalid("steps must be at least 1"));
        }
        if self.batch_size == 0 || self.batch_size > prompts {
            return Err(VipError::invalid(format!(
                "batch size {} must lie in [1, {prompts}]",
                self.batch_size
            )));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 0.5) {
            return Err(VipError::invalid(format!(
                "clip_eps must lie in (0, 0.5), got {}",
                self.clip_eps
            )));
        }
        if !(self.sigma_z2 > 0.0 && self.sigma_z2.is_finite()) {
            return Err(VipError::invalid(format!(
                "sigma_z2 must be positive, got {}",
                self.sigma_z2
            )));
        }
        // feasibility of B·L ≤ C ≤ B·U, before any sampling
        AllocationProblem::new(
            self.family,
            &vec![1.0; self.batch_size],
            self.budget,
            self.min,
            self.max,
        )?;
        Ok(())
    }
}

/// Everything logged for one simulated iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub batch: Vec<usize>,
    pub allocation: Vec<u32>,
    /// Number of `+1` rewards per batch prompt.
    pub successes: Vec<u32>,
    /// Raw predictor output, before clipping.
    pub p_hat: Vec<f64>,
    pub p_true: Vec<f64>,
    /// Predicted-variance objective of `allocation` under clipped `p_hat`.
    pub objective: f64,
    /// Objective of the uniform split under the same clipped `p_hat`.
    pub uniform_objective: f64,
    pub cum_rollouts: u64,
    pub cum_correct: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub strategy: Strategy,
    pub predictor: PredictorKind,
    pub seed: u64,
    pub settings: RunSettings,
    pub steps: Vec<StepRecord>,
}

impl RunRecord {
    /// `strategy/predictor`, the label used in summaries.
    pub fn label(&self) -> String {
        format!("{}/{}", self.strategy.as_str(), self.predictor.label())
    }
}

/// Seeded epoch shuffles consumed in consecutive batches. A tail shorter than
/// the batch size is dropped and a new epoch starts.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    size: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(prompts: usize, size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(BATCH_STREAM);
        let mut order: Vec<usize> = (0..prompts).collect();
        order.shuffle(&mut rng);
        Batcher {
            order,
            pos: 0,
            size,
            rng,
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.size > self.order.len() {
            self.order.sort_unstable();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        b
    }
}

/// Replays the allocate → sample → update loop for `settings.steps` steps.
pub fn run_strategy(
    world: &World,
    strategy: Strategy,
    predictor: PredictorKind,
    settings: &RunSettings,
    seed: u64,
) -> Result<RunRecord> {
    settings.validate(world.len())?;
    let s = settings;
    let truth = world.trajectory(s.steps);
    let prompts = Arc::new(world.prompts.clone());
    let mut model = Predictor::new(predictor, &prompts, s.clip_eps)?;
    let mut batcher = Batcher::new(world.len(), s.batch_size, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(REWARD_STREAM);

    let mut steps = Vec::with_capacity(s.steps);
    let (mut cum_rollouts, mut cum_correct) = (0u64, 0u64);
    for (t, p_true_all) in truth.iter().enumerate() {
        let batch = batcher.next_batch();
        let p_hat = model.predict(&batch, p_true_all)?;
        let clipped: Vec<f64> = p_hat
            .iter()
            .map(|p| p.clamp(s.clip_eps, 1.0 - s.clip_eps))
            .collect();
        let coeffs: Vec<f64> = clipped
            .iter()
            .map(|p| 4.0 * s.sigma_z2 * p * (1.0 - p))
            .collect();
        let problem = AllocationProblem::new(s.family, &coeffs, s.budget, s.min, s.max)?;
        let uniform = baseline_allocation(
            BaselineKind::Uniform,
            &clipped,
            s.budget,
            s.min,
            s.max,
            DEFAULT_BASELINE_EPS,
        )?;
        let allocation = match strategy {
            Strategy::Vip => plan(&problem)?.integer(),
            Strategy::Uniform => uniform.clone(),
            Strategy::InverseAccuracy => baseline_allocation(
                BaselineKind::InverseAccuracy,
                &clipped,
                s.budget,
                s.min,
                s.max,
                DEFAULT_BASELINE_EPS,
            )?,
            Strategy::InverseVariance => {
                let reward_var: Vec<f64> = clipped.iter().map(|p| 4.0 * p * (1.0 - p)).collect();
                baseline_allocation(
                    BaselineKind::InverseVariance,
                    &reward_var,
                    s.budget,
                    s.min,
                    s.max,
                    DEFAULT_BASELINE_EPS,
                )?
            }
        };

        let p_true: Vec<f64> = batch.iter().map(|&q| p_true_all[q]).collect();
        let rewards: Vec<Vec<f64>> = allocation
            .iter()
            .zip(&p_true)
            .map(|(&n, &p)| {
                (0..n)
                    .map(|_| if rng.random::<f64>() < p { 1.0 } else { -1.0 })
                    .collect()
            })
            .collect();
        let successes: Vec<u32> = rewards
            .iter()
            .map(|r| r.iter().filter(|&&v| v > 0.0).count() as u32)
            .collect();
        model.observe(&batch, &rewards, s.clip_eps)?;

        cum_rollouts += allocation.iter().map(|&n| n as u64).sum::<u64>();
        cum_correct += successes.iter().map(|&c| c as u64).sum::<u64>();
        steps.push(StepRecord {
            step: t,
            objective: problem.objective_int(&allocation),
            uniform_objective: problem.objective_int(&uniform),
            batch,
            allocation,
            successes,
            p_hat,
            p_true,
            cum_rollouts,
            cum_correct,
        });
    }
    Ok(RunRecord {
        strategy,
        predictor,
        seed,
        settings: settings.clone(),
        steps,
    })
}

/// Per-step `mean_q |p̂_q − p̄_q|` where `p̄` is the step's empirical success
/// rate, clipped to `[ε, 1 − ε]` when `clip_eps` is given.
pub fn predictor_mae(record: &RunRecord, clip_eps: Option<f64>) -> Vec<f64> {
    record
        .steps
        .iter()
        .map(|s| {
            let total: f64 = s
                .p_hat
                .iter()
                .zip(s.successes.iter().zip(&s.allocation))
                .map(|(&p, (&k, &n))| {
                    let mut rate = k as f64 / n as f64;
                    if let Some(eps) = clip_eps {
                        rate = rate.clamp(eps, 1.0 - eps);
                    }
                    (p - rate).abs()
                })
                .sum();
            total / s.p_hat.len() as f64
        })
        .collect()
}

/// Mean of `values[range]`, clamped to the available steps.
pub fn window_mean(values: &[f64], range: std::ops::RangeInclusive<usize>) -> f64 {
    let lo = (*range.start()).min(values.len());
    let hi = (*range.end() + 1).min(values.len());
    let slice = &values[lo..hi];
    slice.iter().sum::<f64>() / slice.len().max(1) as f64
}
