//! The batch prediction contract and the built-in models.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, PredictError, Result};
use crate::vocab::ABSENT;

/// Probability vectors from built-in models must sum to one within this.
pub const PROBABILITY_TOLERANCE: f64 = 1e-9;

/// Looser bound accepted from external models, whose outputs cross a text
/// encoding.
pub const WIRE_PROBABILITY_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Regression,
    Classification,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Regression => "regression",
            TaskKind::Classification => "classification",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(TaskKind::Regression),
            "classification" => Ok(TaskKind::Classification),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification { num_classes: usize },
}

impl Task {
    pub fn kind(&self) -> TaskKind {
        match self {
            Task::Regression => TaskKind::Regression,
            Task::Classification { .. } => TaskKind::Classification,
        }
    }
}

/// Output for a single row: a score or a probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prediction {
    Score(f64),
    Probabilities(Vec<f64>),
}

impl Prediction {
    /// The scalar followed by the explanation: the score itself, or the
    /// probability of `class`.
    pub fn value(&self, class: Option<usize>) -> f64 {
        match (self, class) {
            (Prediction::Score(y), _) => *y,
            (Prediction::Probabilities(p), Some(c)) => p[c],
            (Prediction::Probabilities(_), None) => {
                panic!("a class is required to read a probability vector")
            }
        }
    }

    pub fn argmax(&self) -> Option<usize> {
        match self {
            Prediction::Score(_) => None,
            Prediction::Probabilities(p) => p
                .iter()
                .enumerate()
                .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
                    Some((_, b)) if b >= v => best,
                    _ => Some((i, v)),
                })
                .map(|(i, _)| i),
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self {
            Prediction::Score(_) => None,
            Prediction::Probabilities(p) => Some(p.len()),
        }
    }
}

/// One output per input row, in row order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PredictionBatch {
    Regression(Vec<f64>),
    Classification(Vec<Vec<f64>>),
}

impl PredictionBatch {
    pub fn len(&self) -> usize {
        match self {
            PredictionBatch::Regression(v) => v.len(),
            PredictionBatch::Classification(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            PredictionBatch::Regression(_) => TaskKind::Regression,
            PredictionBatch::Classification(_) => TaskKind::Classification,
        }
    }

    pub fn get(&self, row: usize) -> Prediction {
        match self {
            PredictionBatch::Regression(v) => Prediction::Score(v[row]),
            PredictionBatch::Classification(v) => Prediction::Probabilities(v[row].clone()),
        }
    }

    pub fn value(&self, row: usize, class: Option<usize>) -> f64 {
        match (self, class) {
            (PredictionBatch::Regression(v), _) => v[row],
            (PredictionBatch::Classification(v), Some(c)) => v[row][c],
            (PredictionBatch::Classification(_), None) => {
                panic!("a class is required to read a probability vector")
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Prediction> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    /// Checks row count, task, finiteness and probability normalization.
    pub fn validate(
        &self,
        kind: TaskKind,
        expected_rows: usize,
        tolerance: f64,
    ) -> std::result::Result<(), crate::error::ProtocolError> {
        use crate::error::ProtocolError;
        if self.len() != expected_rows {
            return Err(ProtocolError::LengthMismatch {
                expected: expected_rows,
                found: self.len(),
            });
        }
        match (self, kind) {
            (PredictionBatch::Regression(values), TaskKind::Regression) => {
                if let Some(row) = values.iter().position(|v| !v.is_finite()) {
                    return Err(ProtocolError::Malformed(format!(
                        "non-finite output at row {row}"
                    )));
                }
            }
            (PredictionBatch::Classification(rows), TaskKind::Classification) => {
                let width = rows.first().map_or(0, Vec::len);
                for (row, p) in rows.iter().enumerate() {
                    let reason = if p.len() < 2 {
                        Some(format!("{} classes, need at least 2", p.len()))
                    } else if p.len() != width {
                        Some(format!("{} classes, previous rows have {width}", p.len()))
                    } else if let Some(v) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                        Some(format!("entry {v} outside [0, 1]"))
                    } else {
                        let sum: f64 = p.iter().sum();
                        ((sum - 1.0).abs() > tolerance).then(|| format!("entries sum to {sum}"))
                    };
                    if let Some(reason) = reason {
                        return Err(ProtocolError::InvalidProbabilities { row, reason });
                    }
                }
            }
            (_, kind) => {
                return Err(ProtocolError::Malformed(format!(
                    "outputs do not match task {}",
                    kind.as_str()
                )))
            }
        }
        Ok(())
    }
}

/// A black-box model queried in batches of index rows.
///
/// Implementations must be pure: the same row always yields the same output,
/// whether predicted alone or inside a larger batch. Index `0` in a row means
/// the token is absent.
pub trait Predictor: Send + Sync {
    fn kind(&self) -> TaskKind;

    fn predict(&self, rows: &[Vec<u32>]) -> std::result::Result<PredictionBatch, PredictError>;

    /// Whether independent calls may be issued from several threads at once.
    fn concurrent(&self) -> bool {
        false
    }
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn kind(&self) -> TaskKind {
        (**self).kind()
    }
    fn predict(&self, rows: &[Vec<u32>]) -> std::result::Result<PredictionBatch, PredictError> {
        (**self).predict(rows)
    }
    fn concurrent(&self) -> bool {
        (**self).concurrent()
    }
}

impl<P: Predictor + ?Sized> Predictor for Box<P> {
    fn kind(&self) -> TaskKind {
        (**self).kind()
    }
    fn predict(&self, rows: &[Vec<u32>]) -> std::result::Result<PredictionBatch, PredictError> {
        (**self).predict(rows)
    }
    fn concurrent(&self) -> bool {
        (**self).concurrent()
    }
}

impl<P: Predictor + ?Sized> Predictor for Arc<P> {
    fn kind(&self) -> TaskKind {
        (**self).kind()
    }
    fn predict(&self, rows: &[Vec<u32>]) -> std::result::Result<PredictionBatch, PredictError> {
        (**self).predict(rows)
    }
    fn concurrent(&self) -> bool {
        (**self).concurrent()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub batch_invocations: u64,
    pub rows_predicted: u64,
}

/// Wraps a predictor and records how many batches and rows it was asked for.
#[derive(Debug, Default)]
pub struct Counting<P> {
    inner: P,
    invocations: AtomicU64,
    rows: AtomicU64,
}

impl<P> Counting<P> {
    pub fn new(inner: P) -> Self {
        Counting {
            inner,
            invocations: AtomicU64::new(0),
            rows: AtomicU64::new(0),
        }
    }

    pub fn counts(&self) -> CallCounts {
        CallCounts {
            batch_invocations: self.invocations.load(Ordering::SeqCst),
            rows_predicted: self.rows.load(Ordering::SeqCst),
        }
    }

    pub fn reset(&self) {
        self.invocations.store(0, Ordering::SeqCst);
        self.rows.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    pub fn into_inner(self) -> P {
        self.inner
    }
}

impl<P: Predictor> Predictor for Counting<P> {
    fn kind(&self) -> TaskKind {
        self.inner.kind()
    }

    fn predict(&self, rows: &[Vec<u32>]) -> std::result::Result<PredictionBatch, PredictError> {
        self.invocations.fetch_add(1, Ordering::SeqCst);
        self.rows.fetch_add(rows.len() as u64, Ordering::SeqCst);
        self.inner.predict(rows)
    }

    fn concurrent(&self) -> bool {
        self.inner.concurrent()
    }
}

/// Linear model over token indices: a bias plus one coefficient per index.
///
/// The classification form keeps one bias and coefficient table per class
/// and normalizes the class scores with a softmax. The absent index always
/// contributes zero.
#[derive(Debug, Clone, PartialEq)]
pub enum LinearModel {
    Regression {
        bias: f64,
        coefficients: HashMap<u32, f64>,
    },
    Classification {
        biases: Vec<f64>,
        coefficients: Vec<HashMap<u32, f64>>,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct ModelFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    coefficients: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_biases: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_coefficients: Option<Vec<BTreeMap<String, f64>>>,
}

fn parse_coefficients(raw: BTreeMap<String, f64>) -> Result<HashMap<u32, f64>> {
    raw.into_iter()
        .filter_map(|(key, value)| {
            let index = match key.parse::<u32>() {
                Ok(i) => i,
                Err(_) => {
                    return Some(Err(Error::InvalidModel(format!(
                        "coefficient key {key:?} is not a token index"
                    ))))
                }
            };
            if !value.is_finite() {
                return Some(Err(Error::InvalidModel(format!(
                    "coefficient for {index} is not finite"
                ))));
            }
            if index == ABSENT {
                return if value == 0.0 {
                    None
                } else {
                    Some(Err(Error::InvalidModel(
                        "index 0 is reserved for absence and cannot carry a coefficient".into(),
                    )))
                };
            }
            Some(Ok((index, value)))
        })
        .collect()
}

fn encode_coefficients(coefficients: &HashMap<u32, f64>) -> BTreeMap<String, f64> {
    coefficients
        .iter()
        .map(|(k, v)| (k.to_string(), *v))
        .collect()
}

impl LinearModel {
    pub fn regression(bias: f64, coefficients: impl IntoIterator<Item = (u32, f64)>) -> Self {
        LinearModel::Regression {
            bias,
            coefficients: coefficients
                .into_iter()
                .filter(|(i, _)| *i != ABSENT)
                .collect(),
        }
    }

    pub fn classification(
        biases: Vec<f64>,
        coefficients: Vec<HashMap<u32, f64>>,
    ) -> Result<Self> {
        if biases.len() < 2 {
            return Err(Error::InvalidModel("classification needs at least 2 classes".into()));
        }
        if biases.len() != coefficients.len() {
            return Err(Error::InvalidModel(format!(
                "{} class biases but {} coefficient tables",
                biases.len(),
                coefficients.len()
            )));
        }
        let coefficients = coefficients
            .into_iter()
            .map(|mut table| {
                table.remove(&ABSENT);
                table
            })
            .collect();
        Ok(LinearModel::Classification {
            biases,
            coefficients,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        match file {
            ModelFile {
                bias,
                coefficients,
                class_biases: None,
                class_coefficients: None,
            } if bias.is_some() || coefficients.is_some() => {
                let bias = bias.unwrap_or(0.0);
                if !bias.is_finite() {
                    return Err(Error::InvalidModel("bias is not finite".into()));
                }
                Ok(LinearModel::Regression {
                    bias,
                    coefficients: parse_coefficients(coefficients.unwrap_or_default())?,
                })
            }
            ModelFile {
                bias: None,
                coefficients: None,
                class_biases: Some(biases),
                class_coefficients: Some(tables),
            } => {
                if biases.iter().any(|b| !b.is_finite()) {
                    return Err(Error::InvalidModel("class bias is not finite".into()));
                }
                let tables = tables
                    .into_iter()
                    .map(parse_coefficients)
                    .collect::<Result<Vec<_>>>()?;
                LinearModel::classification(biases, tables)
            }
            _ => Err(Error::InvalidModel(
                "expected either \"bias\"/\"coefficients\" or \"class_biases\"/\"class_coefficients\""
                    .into(),
            )),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        LinearModel::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let file = match self {
            LinearModel::Regression { bias, coefficients } => ModelFile {
                bias: Some(*bias),
                coefficients: Some(encode_coefficients(coefficients)),
                ..Default::default()
            },
            LinearModel::Classification {
                biases,
                coefficients,
            } => ModelFile {
                class_biases: Some(biases.clone()),
                class_coefficients: Some(coefficients.iter().map(encode_coefficients).collect()),
                ..Default::default()
            },
        };
        serde_json::to_string(&file).expect("model serializes")
    }

    pub fn task(&self) -> Task {
        match self {
            LinearModel::Regression { .. } => Task::Regression,
            LinearModel::Classification { biases, .. } => Task::Classification {
                num_classes: biases.len(),
            },
        }
    }

    /// Coefficient of `index` (for `class` in the classification form).
    pub fn coefficient(&self, index: u32, class: Option<usize>) -> f64 {
        if index == ABSENT {
            return 0.0;
        }
        let table = match self {
            LinearModel::Regression { coefficients, .. } => coefficients,
            LinearModel::Classification { coefficients, .. } => &coefficients[class.unwrap_or(0)],
        };
        table.get(&index).copied().unwrap_or(0.0)
    }

    fn score(bias: f64, coefficients: &HashMap<u32, f64>, row: &[u32]) -> f64 {
        row.iter()
            .filter(|&&i| i != ABSENT)
            .fold(bias, |acc, i| acc + coefficients.get(i).copied().unwrap_or(0.0))
    }

    /// Evaluates one row.
    pub fn predict_row(&self, row: &[u32]) -> Prediction {
        match self {
            LinearModel::Regression { bias, coefficients } => {
                Prediction::Score(Self::score(*bias, coefficients, row))
            }
            LinearModel::Classification {
                biases,
                coefficients,
            } => {
                let logits: Vec<f64> = biases
                    .iter()
                    .zip(coefficients)
                    .map(|(&b, table)| Self::score(b, table, row))
                    .collect();
                Prediction::Probabilities(softmax(&logits))
            }
        }
    }
}

/// Exponentiates and normalizes; the maximum is subtracted first so large
/// scores do not overflow.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

const PARALLEL_ROWS: usize = 64;

impl Predictor for LinearModel {
    fn kind(&self) -> TaskKind {
        self.task().kind()
    }

    fn predict(&self, rows: &[Vec<u32>]) -> std::result::Result<PredictionBatch, PredictError> {
        if let Some(i) = rows.iter().position(Vec::is_empty) {
            return Err(PredictError::InvalidRows(format!("row {i} is empty")));
        }
        let parallel = rows.len() >= PARALLEL_ROWS;
        Ok(match self {
            LinearModel::Regression { bias, coefficients } => {
                let eval = |row: &Vec<u32>| Self::score(*bias, coefficients, row);
                PredictionBatch::Regression(if parallel {
                    rows.par_iter().map(eval).collect()
                } else {
                    rows.iter().map(eval).collect()
                })
            }
            LinearModel::Classification { .. } => {
                let eval = |row: &Vec<u32>| match self.predict_row(row) {
                    Prediction::Probabilities(p) => p,
                    Prediction::Score(_) => unreachable!(),
                };
                PredictionBatch::Classification(if parallel {
                    rows.par_iter().map(eval).collect()
                } else {
                    rows.iter().map(eval).collect()
                })
            }
        })
    }

    fn concurrent(&self) -> bool {
        true
    }
}
