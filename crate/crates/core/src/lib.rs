//! Adversarial reweighting for angular-prototypical speaker verification,
//! scaled down to synthetic features and small perceptrons.
//!
//! Layers, bottom up: [`numerics`] and [`model`] provide matrices, seeded
//! streams, perceptrons and optimizers; [`losses`] and [`reweighting`] hold
//! the metric-learning objectives and adversarial weight maps; [`trainer`]
//! alternates learner and adversary; [`data`] and [`eval`] generate biased
//! corpora and report group-wise EER.

// `!(x > 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod reweighting;
pub mod trainer;

pub use data::{Corpus, FeatureBatch, GenConfig, Split};
pub use error::{Error, ErrorClass, FormatError, Result};
pub use eval::{Eer, FairnessReport, TrialSet};
pub use experiment::{ExperimentConfig, ExperimentReport};
pub use model::{LrSchedule, Mlp, OptimizerKind, Role};
pub use numerics::{Matrix, RngStream};
pub use reweighting::{Centroids, PairWeights, PseudoLabels, SpeakerWeights};
pub use trainer::{History, TrainConfig, TrainedModel, Variant};
