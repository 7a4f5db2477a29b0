use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VipError};
use crate::simulator::predictor::PredictorKind;
use crate::simulator::run::{predictor_mae, run_strategy, RunRecord, RunSettings, Strategy};
use crate::simulator::world::{generate_world, WorldConfig};

/// Experiment file (TOML):
///
/// ```toml
/// seeds = [0, 1, 2]
/// strategies = ["vip", "uniform"]
/// predictors = [{ kind = "gp" }]
///
/// [world]
/// prompts = 256
///
/// [run]
/// family = "rloo"
/// budget = 256
/// batch_size = 32
/// ```
///
/// Seed `s` generates the world with seed `world.seed + s` and drives the
/// batch order and rewards with seed `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub run: RunSettings,
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_predictors")]
    pub predictors: Vec<PredictorKind>,
    pub seeds: Vec<u64>,
}

fn default_predictors() -> Vec<PredictorKind> {
    vec![PredictorKind::Gp]
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start].matches('\n').count() + 1)
                .unwrap_or(0);
            VipError::Parse {
                line,
                message: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Rejects empty job lists, bad worlds and infeasible budgets before any run.
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() || self.predictors.is_empty() || self.seeds.is_empty() {
            return Err(VipError::invalid(
                "strategies, predictors and seeds must be non-empty",
            ));
        }
        self.world.validate()?;
        self.run.validate(self.world.prompts)
    }
}

/// Runs every `(seed, strategy, predictor)` combination in parallel. Records
/// come back in that nesting order regardless of scheduling.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let worlds = cfg
        .seeds
        .par_iter()
        .map(|&s| {
            generate_world(&WorldConfig {
                seed: cfg.world.seed.wrapping_add(s),
                ..cfg.world.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, Strategy, PredictorKind)> = (0..cfg.seeds.len())
        .flat_map(|i| {
            cfg.strategies
                .iter()
                .flat_map(move |&st| cfg.predictors.iter().map(move |&pk| (i, st, pk)))
        })
        .collect();
    jobs.par_iter()
        .map(|&(i, strategy, predictor)| {
            run_strategy(&worlds[i], strategy, predictor, &cfg.run, cfg.seeds[i])
        })
        .collect()
}

/// Plot-ready CSV with columns `strategy, seed, step, objective, mae, cum_correct`.
/// The MAE target is clipped like the training signal.
pub fn summary_csv(records: &[RunRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| VipError::Numerical(format!("csv: {e}"));
    w.write_record([
        "strategy",
        "seed",
        "step",
        "objective",
        "mae",
        "cum_correct",
    ])
    .map_err(csv_err)?;
    for r in records {
        let mae = predictor_mae(r, Some(r.settings.clip_eps));
        let label = r.label();
        for (s, m) in r.steps.iter().zip(mae) {
            w.write_record([
                label.clone(),
                r.seed.to_string(),
                s.step.to_string(),
                format!("{:e}", s.objective),
                format!("{m:e}"),
                s.cum_correct.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.into_inner()
        .map_err(|e| VipError::Numerical(format!("csv: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
seeds = [1, 2]
strategies = ["vip", "uniform"]

[world]
prompts = 30
dim = 3
clusters = 2
bumps = 5

[run]
budget = 48
batch_size = 6
steps = 5
"#;

    #[test]
    fn parses_and_runs() {
        let cfg = ExperimentConfig::from_toml(SMALL).unwrap();
        assert_eq!(cfg.predictors, vec![PredictorKind::Gp]);
        let records = run_experiment(&cfg).unwrap();
        assert_eq!(records.len(), 4);
        assert_eq!(records[0].seed, 1);
        assert_eq!(records[1].strategy, Strategy::Uniform);
        let csv = String::from_utf8(summary_csv(&records).unwrap()).unwrap();
        assert!(csv.starts_with("strategy,seed,step,objective,mae,cum_correct\n"));
        assert_eq!(csv.lines().count(), 1 + 4 * 5);
    }

    #[test]
    fn predictor_tables() {
        let text = SMALL.replace(
            "strategies = [\"vip\", \"uniform\"]",
            "strategies = [\"uniform\"]\npredictors = [{ kind = \"gp\" }, { kind = \"moving_average\", window = 64 }]",
        );
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(
            cfg.predictors[1],
            PredictorKind::MovingAverage { window: 64 }
        );
    }

    #[test]
    fn rejects_infeasible_and_unknown_keys() {
        let bad = SMALL.replace("budget = 48", "budget = 4");
        assert!(matches!(
            ExperimentConfig::from_toml(&bad),
            Err(VipError::Infeasible(_))
        ));
        let bad = SMALL.replace("steps = 5", "steps = 5\nbogus = 1");
        assert!(matches!(
            ExperimentConfig::from_toml(&bad),
            Err(VipError::Parse { .. })
        ));
    }
}
