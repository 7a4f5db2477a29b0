use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::belief::sigmoid;
use crate::error::{Result, VipError};
use crate::prompt_space::PromptSet;

/// Synthetic prompt population with a drifting latent difficulty field
/// `g_t(x) = b_t + Σ_k w_k(t) exp(−‖x − c_k‖² / (2ℓ²))`.
///
/// Bump centres `c_k` sit on randomly chosen prompt embeddings. Weights are
/// scaled by `s = 1/√(mean_q Σ_k φ_qk²)`, so `field_scale` is the root-mean-square
/// latent spread across prompts. The weights follow the stationary
/// autoregression `w(t+1) = φ w(t) + √(1−φ²) · field_scale · s · ξ_t` with
/// `1 − φ = drift² / (2 field_scale²)`: each step adds a Gaussian-process
/// increment over the same basis, the per-step RMS latent shift is `drift`,
/// and the spread of the field never grows. The bias moves by `bias_trend`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub prompts: usize,
    pub dim: usize,
    pub clusters: usize,
    pub cluster_spread: f64,
    pub bumps: usize,
    pub bump_width: f64,
    pub field_scale: f64,
    pub bias: f64,
    pub bias_trend: f64,
    pub drift: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            prompts: 256,
            dim: 64,
            clusters: 8,
            cluster_spread: 0.5,
            bumps: 24,
            bump_width: 6.0,
            field_scale: 1.5,
            bias: 0.0,
            bias_trend: 0.02,
            drift: 0.4,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(VipError::invalid(m));
        if self.prompts < 2 {
            return fail(format!("world needs ≥ 2 prompts, got {}", self.prompts));
        }
        if self.dim == 0 || self.clusters == 0 || self.bumps == 0 {
            return fail("dim, clusters and bumps must be positive".into());
        }
        if self.bumps > self.prompts {
            return fail(format!(
                "{} bumps exceed {} prompts",
                self.bumps, self.prompts
            ));
        }
        for (name, v) in [
            ("cluster_spread", self.cluster_spread),
            ("field_scale", self.field_scale),
            ("drift", self.drift),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and ≥ 0, got {v}"));
            }
        }
        if !(self.bump_width > 0.0 && self.bump_width.is_finite()) {
            return fail(format!(
                "bump_width must be positive, got {}",
                self.bump_width
            ));
        }
        if self.drift > std::f64::consts::SQRT_2 * self.field_scale {
            return fail(format!(
                "drift {} exceeds √2 · field_scale = {}",
                self.drift,
                std::f64::consts::SQRT_2 * self.field_scale
            ));
        }
        if !self.bias.is_finite() || !self.bias_trend.is_finite() {
            return fail("bias and bias_trend must be finite".into());
        }
        Ok(())
    }
}

const EMBED_STREAM: u64 = 0;
const DRIFT_STREAM: u64 = 1;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub prompts: PromptSet,
    /// Indices of the prompts whose embeddings serve as bump centres.
    pub centers: Vec<usize>,
    /// `basis[(q, k)] = exp(−‖x_q − c_k‖² / (2ℓ²))`.
    pub basis: DMatrix<f64>,
    /// Weight normaliser `s`.
    pub weight_scale: f64,
    pub initial_weights: DVector<f64>,
}

/// Builds the world described by `cfg`; equal configs give identical worlds.
pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(EMBED_STREAM);
    let centroids: Vec<Vec<f64>> = (0..cfg.clusters)
        .map(|_| (0..cfg.dim).map(|_| normal(&mut rng)).collect())
        .collect();
    let rows: Vec<Vec<f64>> = (0..cfg.prompts)
        .map(|_| {
            let c = &centroids[rng.random_range(0..cfg.clusters)];
            c.iter()
                .map(|&v| v + cfg.cluster_spread * normal(&mut rng))
                .collect()
        })
        .collect();
    let centers = sample(&mut rng, cfg.prompts, cfg.bumps).into_vec();
    let prompts = PromptSet::from_rows(&rows)?;
    let basis = rbf_basis(&rows, &centers, cfg.bump_width);
    let weight_scale = 1.0 / (basis.iter().map(|v| v * v).sum::<f64>() / cfg.prompts as f64).sqrt();
    let weights = DVector::from_iterator(
        cfg.bumps,
        (0..cfg.bumps).map(|_| cfg.field_scale * weight_scale * normal(&mut rng)),
    );
    Ok(World {
        config: cfg.clone(),
        prompts,
        centers,
        basis,
        weight_scale,
        initial_weights: weights,
    })
}

fn rbf_basis(rows: &[Vec<f64>], centers: &[usize], width: f64) -> DMatrix<f64> {
    let scale = 1.0 / (2.0 * width * width);
    DMatrix::from_fn(rows.len(), centers.len(), |q, k| {
        let d2: f64 = rows[q]
            .iter()
            .zip(&rows[centers[k]])
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (-d2 * scale).exp()
    })
}

impl World {
    pub fn len(&self) -> usize {
        self.config.prompts
    }

    pub fn is_empty(&self) -> bool {
        self.config.prompts == 0
    }

    /// Latent field at every prompt for the given bias and weights.
    pub fn field(&self, bias: f64, weights: &DVector<f64>) -> Vec<f64> {
        (&self.basis * weights).iter().map(|g| g + bias).collect()
    }

    /// `(φ, √(1−φ²) · field_scale · s)` of the weight autoregression.
    pub fn autoregression(&self) -> (f64, f64) {
        let cfg = &self.config;
        if cfg.drift == 0.0 {
            return (1.0, 0.0);
        }
        let phi = 1.0 - cfg.drift * cfg.drift / (2.0 * cfg.field_scale * cfg.field_scale);
        (
            phi,
            (1.0 - phi * phi).sqrt() * cfg.field_scale * self.weight_scale,
        )
    }

    /// True success probabilities for steps `0..steps`.
    pub fn trajectory(&self, steps: usize) -> Vec<Vec<f64>> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(DRIFT_STREAM);
        let (phi, innovation) = self.autoregression();
        let mut weights = self.initial_weights.clone();
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            let bias = cfg.bias + cfg.bias_trend * t as f64;
            out.push(
                self.field(bias, &weights)
                    .into_iter()
                    .map(sigmoid)
                    .collect(),
            );
            for w in weights.iter_mut() {
                *w = phi * *w + innovation * normal(&mut rng);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small() -> WorldConfig {
        WorldConfig {
            prompts: 20,
            dim: 3,
            clusters: 2,
            bumps: 4,
            seed: 7,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn same_seed_same_world() {
        let a = generate_world(&small()).unwrap();
        let b = generate_world(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trajectory(12), b.trajectory(12));
        let c = generate_world(&WorldConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.initial_weights, c.initial_weights);
    }

    #[test]
    fn frozen_world_is_constant() {
        let w = generate_world(&WorldConfig {
            drift: 0.0,
            bias_trend: 0.0,
            ..small()
        })
        .unwrap();
        let traj = w.trajectory(6);
        assert!(traj.iter().all(|p| p == &traj[0]));
    }

    #[test]
    fn single_bump_at_its_center() {
        let cfg = WorldConfig {
            bumps: 1,
            bias: 0.0,
            ..small()
        };
        let w = generate_world(&cfg).unwrap();
        let g = w.field(0.0, &w.initial_weights);
        assert_abs_diff_eq!(g[w.centers[0]], w.initial_weights[0], epsilon = 1e-15);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate_world(&WorldConfig {
            prompts: 1,
            ..small()
        })
        .is_err());
        assert!(generate_world(&WorldConfig {
            drift: -0.1,
            ..small()
        })
        .is_err());
        assert!(generate_world(&WorldConfig {
            drift: 3.0,
            field_scale: 1.0,
            ..small()
        })
        .is_err());
    }
}
