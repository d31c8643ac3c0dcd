//! Desk-scale supervised training with a pluggable backward mode per layer.

mod config;
mod data;
mod model;
mod optim;
mod run;

pub use config::{Activation, ModeSpec, ModelConfig, OptimizerConfig, TrainConfig};
pub use data::{make_synthetic_dataset, Dataset, DatasetSpec, TRAIN_FRACTION};
pub use model::{gelu, gelu_grad, softmax_cross_entropy, Layer, Model, ModelGradients};
pub use optim::Optimizer;
pub use run::{
    build_model, evaluate, marginal_accuracy, mode_sweep, run_experiment, sweep_csv, train,
    EpochRecord, SweepPoint, TrainLog,
};
