//! Recursive Gaussian-process belief over per-prompt latent values.
//!
//! The latent field `g` has a GP prior with the fixed prompt kernel `Σ`. Each
//! iteration observes a batch `B`, turns its rewards into latent observations
//! `ĝ_B`, and moves the mean:
//!
//! ```text
//! m'[B]  = ĝ_B
//! m'[Bᶜ] = m[Bᶜ] + Σ_BᶜB Σ_BB⁻¹ (ĝ_B − m[B])
//! ```
//!
//! Only the mean is carried forward; the kernel stays the same for every
//! iteration. The conditional covariance is available through
//! [`BeliefState::posterior_covariance`] for diagnostics.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VipError};
use crate::prompt_space::KernelMatrix;

pub const DEFAULT_CLIP_EPS: f64 = 0.01;
pub const DEFAULT_JITTER: f64 = 1e-8;
/// Lower bound applied to sample variances before the softplus inverse.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Map from latent value to the modelled quantity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    /// Success probability of binary ±1 rewards.
    Sigmoid,
    /// Reward variance for continuous rewards.
    Softplus,
}

impl Link {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Link::Sigmoid => sigmoid(x),
            Link::Softplus => softplus(x),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Link::Sigmoid => "sigmoid",
            Link::Softplus => "softplus",
        }
    }
}

impl std::str::FromStr for Link {
    type Err = VipError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Link::Sigmoid),
            "softplus" => Ok(Link::Softplus),
            other => Err(VipError::invalid(format!("unknown link '{other}'"))),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln(exp(v) − 1)` for `v > 0`.
pub fn softplus_inverse(v: f64) -> f64 {
    if v > 30.0 {
        v + (-(-v).exp()).ln_1p()
    } else {
        v.exp_m1().ln()
    }
}

fn check_clip_eps(clip_eps: f64) -> Result<()> {
    if clip_eps > 0.0 && clip_eps < 0.5 {
        Ok(())
    } else {
        Err(VipError::invalid(format!(
            "clip_eps must lie in (0, 0.5), got {clip_eps}"
        )))
    }
}

/// Latent observation for one prompt's rewards.
///
/// Sigmoid link: `logit(clip((R̄ + 1)/2, ε, 1 − ε))` with rewards in {−1, +1}.
/// Softplus link: softplus inverse of the unbiased sample variance, floored at
/// [`VARIANCE_FLOOR`]; needs at least two rewards.
pub fn latent_observation(rewards: &[f64], clip_eps: f64, link: Link) -> Result<f64> {
    check_clip_eps(clip_eps)?;
    if rewards.is_empty() {
        return Err(VipError::invalid("reward list is empty"));
    }
    match link {
        Link::Sigmoid => {
            if let Some(r) = rewards.iter().find(|&&r| r != 1.0 && r != -1.0) {
                return Err(VipError::invalid(format!(
                    "binary rewards must be ±1, got {r}"
                )));
            }
            let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
            let p = ((mean + 1.0) / 2.0).clamp(clip_eps, 1.0 - clip_eps);
            Ok(logit(p))
        }
        Link::Softplus => {
            if rewards.len() < 2 {
                return Err(VipError::invalid(
                    "continuous rewards need at least 2 samples",
                ));
            }
            if rewards.iter().any(|r| !r.is_finite()) {
                return Err(VipError::invalid("rewards must be finite"));
            }
            let n = rewards.len() as f64;
            let mean = rewards.iter().sum::<f64>() / n;
            let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0);
            Ok(softplus_inverse(var.max(VARIANCE_FLOOR)))
        }
    }
}

/// Rewards for the prompts of one batch, keyed by prompt index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchObservation {
    pub entries: Vec<(usize, Vec<f64>)>,
}

impl BatchObservation {
    pub fn new(entries: Vec<(usize, Vec<f64>)>) -> Self {
        Self { entries }
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|(i, _)| *i).collect()
    }

    fn validate(&self, num_prompts: usize, link: Link) -> Result<()> {
        if self.entries.is_empty() {
            return Err(VipError::invalid("observation batch is empty"));
        }
        let mut seen = vec![false; num_prompts];
        for (i, rewards) in &self.entries {
            if *i >= num_prompts {
                return Err(VipError::invalid(format!("prompt index {i} out of range")));
            }
            if std::mem::replace(&mut seen[*i], true) {
                return Err(VipError::invalid(format!(
                    "prompt index {i} observed twice in one batch"
                )));
            }
            if rewards.is_empty() {
                return Err(VipError::invalid(format!(
                    "prompt index {i} has no rewards"
                )));
            }
            if link == Link::Sigmoid && rewards.iter().any(|&r| r != 1.0 && r != -1.0) {
                return Err(VipError::invalid(format!(
                    "prompt index {i} has a reward outside {{-1, +1}}"
                )));
            }
        }
        Ok(())
    }
}

/// GP mean over all prompts plus the shared kernel.
#[derive(Debug, Clone)]
pub struct BeliefState {
    mean: Vec<f64>,
    link: Link,
    clip_eps: f64,
    jitter: f64,
    kernel: Arc<KernelMatrix>,
}

impl PartialEq for BeliefState {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean
            && self.link == other.link
            && self.clip_eps == other.clip_eps
            && self.jitter == other.jitter
            && (Arc::ptr_eq(&self.kernel, &other.kernel) || self.kernel == other.kernel)
    }
}

/// Zero-mean prior over the kernel's prompts.
pub fn init_belief(kernel: Arc<KernelMatrix>, link: Link, clip_eps: f64) -> Result<BeliefState> {
    BeliefState::new(kernel, link, clip_eps)
}

impl BeliefState {
    pub fn new(kernel: Arc<KernelMatrix>, link: Link, clip_eps: f64) -> Result<Self> {
        check_clip_eps(clip_eps)?;
        if kernel.is_empty() {
            return Err(VipError::invalid("kernel has no prompts"));
        }
        Ok(Self {
            mean: vec![0.0; kernel.len()],
            link,
            clip_eps,
            jitter: DEFAULT_JITTER,
            kernel,
        })
    }

    /// Rebuilds a state from a stored mean vector.
    pub fn with_mean(
        kernel: Arc<KernelMatrix>,
        link: Link,
        clip_eps: f64,
        mean: Vec<f64>,
    ) -> Result<Self> {
        let mut s = Self::new(kernel, link, clip_eps)?;
        if mean.len() != s.mean.len() {
            return Err(VipError::invalid(format!(
                "mean has {} entries but the kernel covers {} prompts",
                mean.len(),
                s.mean.len()
            )));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(VipError::invalid("mean entries must be finite"));
        }
        s.mean = mean;
        Ok(s)
    }

    pub fn with_jitter(mut self, jitter: f64) -> Result<Self> {
        if !(jitter >= 0.0 && jitter.is_finite()) {
            return Err(VipError::invalid("jitter must be finite and non-negative"));
        }
        self.jitter = jitter;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn link(&self) -> Link {
        self.link
    }

    pub fn clip_eps(&self) -> f64 {
        self.clip_eps
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn kernel(&self) -> &Arc<KernelMatrix> {
        &self.kernel
    }

    /// Linked prediction for each index: success probability under the sigmoid
    /// link, reward variance under softplus.
    pub fn predict(&self, batch: &[usize]) -> Result<Vec<f64>> {
        batch
            .iter()
            .map(|&i| {
                self.mean
                    .get(i)
                    .map(|&m| self.link.apply(m))
                    .ok_or_else(|| VipError::invalid(format!("prompt index {i} out of range")))
            })
            .collect()
    }

    pub fn predict_all(&self) -> Vec<f64> {
        self.mean.iter().map(|&m| self.link.apply(m)).collect()
    }

    /// Conditions on a batch of rewards and returns the next-step belief.
    pub fn update(&self, obs: &BatchObservation) -> Result<BeliefState> {
        obs.validate(self.len(), self.link)?;
        let latents = obs
            .entries
            .iter()
            .map(|(_, r)| latent_observation(r, self.clip_eps, self.link))
            .collect::<Result<Vec<_>>>()?;
        self.update_latent(&obs.indices(), &latents)
    }

    /// Conditioning step given latent observations directly.
    pub fn update_latent(&self, batch: &[usize], latents: &[f64]) -> Result<BeliefState> {
        if batch.len() != latents.len() {
            return Err(VipError::invalid(
                "batch and latent observations differ in length",
            ));
        }
        if latents.iter().any(|g| !g.is_finite()) {
            return Err(VipError::invalid("latent observations must be finite"));
        }
        let blocks = self.kernel.blocks(batch)?;
        let innovation = DVector::from_iterator(
            batch.len(),
            batch.iter().zip(latents).map(|(&i, &g)| g - self.mean[i]),
        );

        let mut next = self.mean.clone();
        for (&i, &g) in batch.iter().zip(latents) {
            next[i] = g;
        }
        if !blocks.complement.is_empty() {
            let weights = self.solve_batch(&blocks.batch_batch, &innovation)?;
            let shift = &blocks.complement_batch * weights;
            for (r, &i) in blocks.complement.iter().enumerate() {
                next[i] += shift[r];
            }
        }
        Ok(BeliefState {
            mean: next,
            ..self.clone()
        })
    }

    /// `Σ_BᶜBᶜ − Σ_BᶜB Σ_BB⁻¹ Σ_BBᶜ` for the given batch.
    pub fn posterior_covariance(&self, batch: &[usize]) -> Result<DMatrix<f64>> {
        let blocks = self.kernel.blocks(batch)?;
        let rhs = blocks.complement_batch.transpose();
        let chol = self.factor(&blocks.batch_batch)?;
        let solved = chol.solve(&rhs);
        Ok(&blocks.complement_complement - &blocks.complement_batch * solved)
    }

    fn factor(&self, sigma_bb: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        let mut m = sigma_bb.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += self.jitter;
        }
        let (min_d, max_d) = m
            .diagonal()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        m.cholesky().ok_or_else(|| {
            VipError::Numerical(format!(
                "batch kernel block ({n}×{n}) is not positive definite after jitter {j:e}; diagonal range [{min_d:e}, {max_d:e}]",
                n = sigma_bb.nrows(),
                j = self.jitter
            ))
        })
    }

    fn solve_batch(&self, sigma_bb: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        let chol = self.factor(sigma_bb)?;
        let x = chol.solve(rhs);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(VipError::Numerical(
                "batch kernel solve produced non-finite weights".into(),
            ));
        }
        Ok(x)
    }

    pub fn snapshot(&self, iteration: u64, kernel_ref: impl Into<String>) -> BeliefSnapshot {
        BeliefSnapshot {
            iteration,
            link: self.link,
            clip_eps: self.clip_eps,
            mean: self.mean.clone(),
            kernel_ref: kernel_ref.into(),
        }
    }
}

/// Persisted belief: `{"iteration", "link", "clip_eps", "mean", "kernel_ref"}`.
/// Reals are written in shortest round-trip form and parse back bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefSnapshot {
    pub iteration: u64,
    pub link: Link,
    pub clip_eps: f64,
    pub mean: Vec<f64>,
    pub kernel_ref: String,
}

impl BeliefSnapshot {
    /// Restores the state, checking that `kernel` is the one it was built on.
    pub fn restore(&self, kernel: Arc<KernelMatrix>, kernel_ref: &str) -> Result<BeliefState> {
        if self.kernel_ref != kernel_ref {
            return Err(VipError::Integrity(format!(
                "belief was built on kernel {} but {} was supplied",
                self.kernel_ref, kernel_ref
            )));
        }
        BeliefState::with_mean(kernel, self.link, self.clip_eps, self.mean.clone())
    }
}
