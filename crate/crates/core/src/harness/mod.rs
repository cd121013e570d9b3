//! Synthetic corpora, configuration and the end-to-end toy training loop.

pub mod config;
pub mod corpus;
pub mod model;
pub mod train;

pub use config::{ExperimentConfig, ModelDims, TrainConfig, KEYS};
pub use corpus::{generate_corpus, CorpusSpec, DurationLaw, Instance, ToyCorpus};
pub use model::ToyModel;
pub use train::{
    align_instance, duration_batches, duration_batches_from, eval_alignment, score_durations,
    train_duration_phase, train_main, train_toy, AlignmentScore, MainRecord, TrainHistory,
};
