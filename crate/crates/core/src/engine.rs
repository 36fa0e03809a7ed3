//! End-to-end explanation of one input record.

use serde::{Deserialize, Serialize};

use crate::effect::{
    effect_scan_early_stop, effect_scan_exhaustive, EffectOptions, EffectScan, FocusClass,
    ScanMode, DEFAULT_EPSILON, DEFAULT_MAX_GRAM, DEFAULT_TAU,
};
use crate::error::{Error, PredictError, Result};
use crate::importance::{mark_importance_with, skip_importance, ImportanceMask, LossKind};
use crate::predictor::{Counting, Predictor, Task, TaskKind};
use crate::report::{
    ErrorKind, ExplanationReport, ImportanceSummary, PredictionSummary, RecordId,
    ReportError,
};
use crate::vocab::{TokenizedSentence, Vocabulary};

pub use crate::effect::ScanMode as Mode;

/// Sentences longer than this switch to early-stop mode unless a mode was
/// chosen explicitly.
pub const DEFAULT_LONG_THRESHOLD: usize = 512;

/// One input: text plus an optional label (regression target or class
/// index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: RecordId,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FocusPolicy {
    /// Explain the class the model predicts.
    #[default]
    Predicted,
    /// Explain the labelled class when the record has one.
    Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainConfig {
    /// `None` picks exhaustive mode, or early-stop above `long_threshold`.
    pub mode: Option<ScanMode>,
    pub loss: LossKind,
    pub max_gram: usize,
    pub tau: f64,
    pub epsilon: f64,
    pub long_threshold: usize,
    pub focus: FocusPolicy,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            mode: None,
            loss: LossKind::Mae,
            max_gram: DEFAULT_MAX_GRAM,
            tau: DEFAULT_TAU,
            epsilon: DEFAULT_EPSILON,
            long_threshold: DEFAULT_LONG_THRESHOLD,
            focus: FocusPolicy::Predicted,
        }
    }
}

impl ExplainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_gram == 0 {
            return Err(Error::Config("max_gram must be at least 1".into()));
        }
        if !self.tau.is_finite() || self.tau < 0.0 {
            return Err(Error::Config(format!("tau {} must be a non-negative number", self.tau)));
        }
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::Config(format!(
                "epsilon {} must be a non-negative number",
                self.epsilon
            )));
        }
        Ok(())
    }

    pub fn mode_for(&self, n: usize) -> ScanMode {
        match self.mode {
            Some(mode) => mode,
            None if n > self.long_threshold => ScanMode::EarlyStop,
            None => ScanMode::Exhaustive,
        }
    }
}

/// Result of [`explain_sentence`].
#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub mode: ScanMode,
    pub mask: ImportanceMask,
    pub scan: EffectScan,
}

/// Importance (regression with a target) followed by the effect scan.
pub fn explain_sentence<P: Predictor + ?Sized>(
    sentence: &TokenizedSentence,
    target: Option<f64>,
    predictor: &P,
    config: &ExplainConfig,
) -> Result<Explanation> {
    config.validate()?;
    if sentence.is_empty() {
        return Err(Error::EmptyText);
    }
    let mode = config.mode_for(sentence.len());
    let kind = predictor.kind();
    let mask = match (kind, target) {
        (TaskKind::Regression, Some(target)) => {
            let window = (mode == ScanMode::EarlyStop).then_some(config.max_gram);
            mark_importance_with(&sentence.indices, target, predictor, config.loss, window)?
        }
        _ => skip_importance(&sentence.indices),
    };
    let focus = match (kind, config.focus, target) {
        (TaskKind::Classification, FocusPolicy::Label, Some(label)) => {
            if label < 0.0 || label.fract() != 0.0 {
                return Err(Error::Config(format!("label {label} is not a class index")));
            }
            FocusClass::Fixed(label as usize)
        }
        _ => FocusClass::Predicted,
    };
    let options = EffectOptions {
        tau: config.tau,
        epsilon: config.epsilon,
        focus,
    };
    let scan = match mode {
        ScanMode::Exhaustive => effect_scan_exhaustive(&mask, predictor, options)?,
        ScanMode::EarlyStop => effect_scan_early_stop(&mask, predictor, options, config.max_gram)?,
    };
    Ok(Explanation { mode, mask, scan })
}

fn classify_error(err: &Error) -> ErrorKind {
    match err {
        Error::Predict(PredictError::Transport(_)) => ErrorKind::Transport,
        Error::Predict(PredictError::Protocol(_)) => ErrorKind::Protocol,
        Error::Predict(_) | Error::DegenerateBaseline(_) | Error::TaskMismatch(_) => {
            ErrorKind::Model
        }
        _ => ErrorKind::Input,
    }
}

/// Explains one record and packages the outcome as a report.
///
/// Failures do not abort: they are recorded in the report's `error` field
/// together with whatever predictor calls were spent.
pub fn explain<P: Predictor + ?Sized>(
    record: &Record,
    vocab: &Vocabulary,
    predictor: &P,
    config: &ExplainConfig,
) -> ExplanationReport {
    let counting = Counting::new(predictor);
    let kind = counting.kind();
    let default_task = match kind {
        TaskKind::Regression => Task::Regression,
        TaskKind::Classification => Task::Classification { num_classes: 0 },
    };
    let sentence = vocab.tokenize(&record.text);
    let tokens = sentence
        .as_ref()
        .map(|s| s.tokens.clone())
        .unwrap_or_default();
    let mut report = ExplanationReport::new(record.id.clone(), &record.text, tokens, default_task);
    report.target = record.label;

    let outcome = sentence.and_then(|s| {
        report.accounting.mode = config.mode_for(s.len());
        if config.mode.is_none() && report.accounting.mode == ScanMode::EarlyStop {
            report.warnings.push(format!(
                "{} tokens exceed {}: using early-stop mode",
                s.len(),
                config.long_threshold
            ));
        }
        explain_sentence(&s, record.label, &counting, config)
    });

    match outcome {
        Ok(Explanation { mode, mask, scan }) => {
            report.accounting.mode = mode;
            if let Some(q) = scan.baseline.num_classes() {
                report.task = Task::Classification { num_classes: q };
            }
            let full = mask.y_all.clone().unwrap_or_else(|| scan.baseline.clone());
            report.prediction = Some(PredictionSummary {
                predicted_class: full.argmax(),
                output: full,
            });
            if let Some(losses) = mask.losses {
                report.importance = Some(ImportanceSummary {
                    losses,
                    phrases: mask.phrases.clone(),
                });
            }
            report.baseline = Some(scan.baseline);
            report.focus_class = scan.focus_class;
            report.warnings.extend(scan.warnings);
            report.set_effects(scan.effects);
        }
        Err(err) => {
            report.error = Some(ReportError {
                kind: classify_error(&err),
                message: err.to_string(),
            });
        }
    }
    let counts = counting.counts();
    report.accounting.batch_invocations = counts.batch_invocations;
    report.accounting.rows_predicted = counts.rows_predicted;
    report
}
