//! Config-driven experiment harness behind the `luring` CLI.

mod config;
mod plots;
mod runner;

pub use config::{AttackSpec, EarlyStopSpec, ExperimentConfig, MapperKind, MimWSpec, TrainSpec};
pub use plots::{render_dr_iar_plot, Series};
pub use runner::{
    common_correct_eval, craft_closure, report as runner_report, run, train_base_model,
    train_mapper_variant, train_models, RunManifest, StageStatus, TrainedModels,
};
