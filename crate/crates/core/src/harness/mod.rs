//! Synthetic data, training, evaluation and ablation.

pub mod ablate;
pub mod checks;
pub mod config;
pub mod eval;
pub mod model;
pub mod synth;
pub mod train;

pub use ablate::{AblationTable, Arm, Toggle, ablate, parse_arms};
pub use config::{Toggles, TrainConfig};
pub use eval::{ConstantPredictor, MeshPredictor, ModelPredictor, OraclePredictor, evaluate, parse_seeds};
pub use model::{Model, Mode, init_model, predict};
pub use synth::{Scene, SynthConfig, synth_scene};
pub use train::{Adam, StepLog, TrainResult, load_run, save_run, train, train_on};

