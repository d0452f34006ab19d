//! Posterior classifiers, the manipulation protocol and 2-D projections.

mod manipulation;
mod mlp;
mod projection;
pub mod report;

pub use manipulation::{manipulation_eval, ManipulationReport, OtherFactorSummary, PairBreakdown};
pub use mlp::{train_classifier, ClassifierConfig, ClassifierReport, MlpClassifier};
pub use projection::{project_2d, Projection};
