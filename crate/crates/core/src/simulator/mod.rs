//! Synthetic drifting worlds and replay of the allocate → sample → update loop.

pub mod experiment;
pub mod predictor;
pub mod run;
pub mod world;

pub use experiment::{run_experiment, summary_csv, ExperimentConfig};
pub use predictor::{
    moving_average_predict, ridge_predict, History, Predictor, PredictorKind, RateObservation,
};
pub use run::{
    predictor_mae, run_strategy, window_mean, RunRecord, RunSettings, StepRecord, Strategy,
};
pub use world::{generate_world, World, WorldConfig};
