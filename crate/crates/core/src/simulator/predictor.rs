use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::belief::{latent_observation, logit, sigmoid, BatchObservation, BeliefState, Link};
use crate::error::{Result, VipError};
use crate::prompt_space::{kernel_matrix, median_bandwidth, PromptSet};

pub const DEFAULT_WINDOW: usize = 1024;
pub const DEFAULT_RIDGE_PENALTY: f64 = 1.0;

fn default_window() -> usize {
    DEFAULT_WINDOW
}

fn default_penalty() -> f64 {
    DEFAULT_RIDGE_PENALTY
}

/// Success-probability predictor used by a simulated run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PredictorKind {
    /// Recursive GP belief over the prompt kernel.
    Gp,
    /// Per-prompt mean of recent clipped success rates.
    MovingAverage {
        #[serde(default = "default_window")]
        window: usize,
    },
    /// Ridge regression from embeddings to logit success rates.
    Ridge {
        #[serde(default = "default_window")]
        window: usize,
        #[serde(default = "default_penalty")]
        penalty: f64,
    },
    /// Reads the true probabilities; a reference point for tests.
    Oracle,
}

impl PredictorKind {
    pub fn moving_average() -> Self {
        PredictorKind::MovingAverage {
            window: DEFAULT_WINDOW,
        }
    }

    pub fn ridge() -> Self {
        PredictorKind::Ridge {
            window: DEFAULT_WINDOW,
            penalty: DEFAULT_RIDGE_PENALTY,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            PredictorKind::Gp => "gp",
            PredictorKind::MovingAverage { .. } => "moving_average",
            PredictorKind::Ridge { .. } => "ridge",
            PredictorKind::Oracle => "oracle",
        }
    }
}

impl std::str::FromStr for PredictorKind {
    type Err = VipError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gp" => Ok(PredictorKind::Gp),
            "moving_average" | "moving-average" | "ma" => Ok(PredictorKind::moving_average()),
            "ridge" => Ok(PredictorKind::ridge()),
            "oracle" => Ok(PredictorKind::Oracle),
            other => Err(VipError::invalid(format!("unknown predictor '{other}'"))),
        }
    }
}

/// One past observation: a prompt and its clipped empirical success rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateObservation {
    pub prompt: usize,
    pub rate: f64,
}

/// Sliding window of the most recent observations.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    window: usize,
    entries: VecDeque<RateObservation>,
}

impl History {
    pub fn new(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(VipError::invalid("history window must be positive"));
        }
        Ok(History {
            window,
            entries: VecDeque::with_capacity(window.min(4096)),
        })
    }

    pub fn push(&mut self, obs: RateObservation) {
        if self.entries.len() == self.window {
            self.entries.pop_front();
        }
        self.entries.push_back(obs);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &RateObservation> {
        self.entries.iter()
    }
}

/// Per-prompt mean rate over the window; unseen prompts get the window's
/// global mean, and an empty window predicts 0.5.
pub fn moving_average_predict(history: &History, batch: &[usize]) -> Vec<f64> {
    if history.is_empty() {
        return vec![0.5; batch.len()];
    }
    let global = history.iter().map(|o| o.rate).sum::<f64>() / history.len() as f64;
    batch
        .iter()
        .map(|&q| {
            let (sum, count) = history
                .iter()
                .filter(|o| o.prompt == q)
                .fold((0.0, 0usize), |(s, c), o| (s + o.rate, c + 1));
            if count == 0 {
                global
            } else {
                sum / count as f64
            }
        })
        .collect()
}

/// Fits `logit(rate) ≈ w₀ + wᵀx` with an unpenalised intercept and predicts
/// `sigmoid(w₀ + wᵀx)`. An empty window predicts 0.5.
pub fn ridge_predict(
    history: &History,
    prompts: &PromptSet,
    batch: &[usize],
    penalty: f64,
) -> Result<Vec<f64>> {
    if history.is_empty() {
        return Ok(vec![0.5; batch.len()]);
    }
    let d = prompts.dim() + 1;
    let mut gram = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    let mut x = DVector::<f64>::zeros(d);
    for o in history.iter() {
        features(prompts, o.prompt, &mut x);
        gram.ger(1.0, &x, &x, 1.0);
        rhs.axpy(logit(o.rate), &x, 1.0);
    }
    for j in 1..d {
        gram[(j, j)] += penalty;
    }
    let w = gram
        .cholesky()
        .ok_or_else(|| {
            VipError::Numerical("ridge normal equations are not positive definite".into())
        })?
        .solve(&rhs);
    Ok(batch
        .iter()
        .map(|&q| {
            features(prompts, q, &mut x);
            sigmoid(w.dot(&x))
        })
        .collect())
}

fn features(prompts: &PromptSet, q: usize, out: &mut DVector<f64>) {
    out[0] = 1.0;
    for (j, &v) in prompts.embedding(q).iter().enumerate() {
        out[j + 1] = v;
    }
}

/// Running predictor state.
#[derive(Debug, Clone)]
pub enum Predictor {
    Gp(BeliefState),
    MovingAverage(History),
    Ridge {
        history: History,
        penalty: f64,
        prompts: Arc<PromptSet>,
    },
    Oracle,
}

impl Predictor {
    pub fn new(kind: PredictorKind, prompts: &Arc<PromptSet>, clip_eps: f64) -> Result<Self> {
        Ok(match kind {
            PredictorKind::Gp => {
                let h = median_bandwidth(prompts)?;
                let k = kernel_matrix(prompts, h)?;
                Predictor::Gp(BeliefState::new(Arc::new(k), Link::Sigmoid, clip_eps)?)
            }
            PredictorKind::MovingAverage { window } => {
                Predictor::MovingAverage(History::new(window)?)
            }
            PredictorKind::Ridge { window, penalty } => {
                if !(penalty > 0.0 && penalty.is_finite()) {
                    return Err(VipError::invalid(format!(
                        "ridge penalty must be positive, got {penalty}"
                    )));
                }
                Predictor::Ridge {
                    history: History::new(window)?,
                    penalty,
                    prompts: prompts.clone(),
                }
            }
            PredictorKind::Oracle => Predictor::Oracle,
        })
    }

    /// Predicted success probabilities for `batch`; `truth` is only read by the oracle.
    pub fn predict(&self, batch: &[usize], truth: &[f64]) -> Result<Vec<f64>> {
        match self {
            Predictor::Gp(belief) => belief.predict(batch),
            Predictor::MovingAverage(h) => Ok(moving_average_predict(h, batch)),
            Predictor::Ridge {
                history,
                penalty,
                prompts,
            } => ridge_predict(history, prompts, batch, *penalty),
            Predictor::Oracle => Ok(batch.iter().map(|&q| truth[q]).collect()),
        }
    }

    /// Feeds one batch of ±1 rewards.
    pub fn observe(&mut self, batch: &[usize], rewards: &[Vec<f64>], clip_eps: f64) -> Result<()> {
        match self {
            Predictor::Gp(belief) => {
                let obs = BatchObservation::new(
                    batch.iter().copied().zip(rewards.iter().cloned()).collect(),
                );
                *belief = belief.update(&obs)?;
            }
            Predictor::MovingAverage(history) | Predictor::Ridge { history, .. } => {
                for (&q, r) in batch.iter().zip(rewards) {
                    let rate = sigmoid(latent_observation(r, clip_eps, Link::Sigmoid)?);
                    history.push(RateObservation { prompt: q, rate });
                }
            }
            Predictor::Oracle => {}
        }
        Ok(())
    }
}
