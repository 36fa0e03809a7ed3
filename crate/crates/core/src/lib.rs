//! Exclusion-Inclusion explanations for black-box text predictors.
//!
//! Words are masked to the reserved absence index `0`, the model is
//! re-queried, and the change in loss (importance) and in output (effect) is
//! reported per contiguous phrase as a percentage-change EI score.
//!
//! The pipeline is:
//!
//! 1. [`vocab`] turns text into index rows.
//! 2. [`importance`] (regression with a known target) masks phrases whose
//!    removal does not increase the loss.
//! 3. [`effect`] scores every phrase of the masked row, either exhaustively
//!    with one [`perturbation`] batch per gram size or with the greedy
//!    early-stop scan for long inputs.
//! 4. [`report`] assembles and renders the result.
//!
//! Any model can be plugged in through the [`predictor::Predictor`] trait,
//! including external processes speaking the [`protocol`] wire format.

pub mod cli;
pub mod effect;
pub mod engine;
pub mod error;
pub mod importance;
pub mod perturbation;
pub mod predictor;
mod probe;
pub mod protocol;
pub mod report;
pub mod span;
pub mod vocab;

pub use effect::{ei_score, EiScore, EffectLabel, PhraseEffect};
pub use engine::{explain, ExplainConfig, Mode, Record};
pub use error::{Error, PredictError, ProtocolError, Result};
pub use importance::{ImportanceMask, LossKind, Mark};
pub use perturbation::GramMatrix;
pub use predictor::{
    CallCounts, Counting, LinearModel, Prediction, PredictionBatch, Predictor, Task, TaskKind,
};
pub use report::{ExplanationReport, RecordId};
pub use span::Span;
pub use vocab::{TokenizedSentence, Vocabulary, ABSENT};
