//! Synthetic data, experiment configuration, dataset storage and the CLI.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod experiment;
pub mod manifest;
pub mod scene;

pub use scene::{generate_scenes, insert_adversary, HostContext, Insertion, Modalities, Obstacle, Scene, SceneConfig, Vehicle};
pub use config::{DatasetConfig, EvalConfig, ExperimentConfig, Stage, TrainConfig, SEED_ENV};
pub use experiment::{clean_ap, evaluate_mesh, generate_datasets, train_detector, write_train_log, Datasets, TrainLogRow, AP_SCORE_FLOOR};
pub use dataset::{load_dataset, save_dataset};
pub use manifest::Manifest;
