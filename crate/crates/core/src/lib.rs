//! Knowledge-tracing benchmark engine.
//!
//! The crate covers the whole pipeline a KT experiment needs:
//!
//! * [`dataset`]: interactions, student sequences, vocabularies, validation and statistics.
//! * [`ingest`]: the canonical CSV format.
//! * [`preprocess`]: filtering, student-level splitting, KC expansion and windowing.
//! * [`models`]: DKT, DKT+ and SAKT with hand-written backpropagation, Adam and early stopping.
//! * [`protocols`]: leakage-free all-in-one evaluation, the one-by-one audit mode,
//!   KC fusion, long/short subgrouping and multi-step prediction.
//! * [`metrics`]: AUC, accuracy and the paired t-test.
//! * [`synth`]: a seeded logistic student simulator with exact oracle probabilities.
//! * [`runner`]: experiment configs, cross-validation, random search and reporting.

pub mod dataset;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod models;
pub mod preprocess;
pub mod protocols;
pub mod runner;
pub mod synth;

pub use dataset::{Dataset, DatasetStats, Interaction, StudentSequence, ValidationReport, Vocab};
pub use error::{Error, Result};
pub use metrics::{MetricResult, TTestMarker};
pub use models::{Dkt, KtModel, Model, ModelTag, Sakt, TrainConfig};
pub use preprocess::{ExpandedSequence, ExpandedStep, Split, Window};
pub use protocols::{FusionMechanism, MultiStepConfig, MultiStepMode, PredictionRecord};
pub use synth::SimConfig;
