//! Factorial discriminative normalizing flows.
//!
//! An invertible flow maps observations to latent codes whose prior is a
//! Gaussian with identity covariance. The prior mean is zero (plain flow),
//! chosen by a class label (discriminative flow), or assembled from one class
//! mean per labelled factor over disjoint slices of the code (factorial flow).
//! Training maximises the exact likelihood; encoding is `f^-1`; a factor is
//! manipulated by shifting its slice of the code between class means and
//! decoding with `f`.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod factorize;
pub mod flow;
pub mod priors;
pub mod synthetic;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use data::{load_dataset, save_dataset, FactorInfo, LabeledDataset};
pub use error::{Error, Result};
pub use flow::{FlowConfig, FlowModel, Mode};
pub use priors::{LatentPartition, PriorSpec, Regime};
pub use synthetic::SyntheticSpec;
pub use trainer::{train, TrainConfig, TrainState};
