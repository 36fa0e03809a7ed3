//! Loss-pivot importance scan for regression.
//!
//! Starting from the left, each position is tentatively omitted on top of
//! everything already masked. If the loss against the known target does not
//! grow, the omission is grown rightwards while the loss keeps not growing,
//! and the whole phrase is masked as unimportant. Otherwise the phrase is
//! grown while the loss keeps strictly growing and is kept as important.
//!
//! Every accepted mask is non-increasing in loss relative to the running
//! state, so the loss on the final masked row never exceeds the loss on the
//! full sentence.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::{Prediction, Predictor, TaskKind};
use crate::probe::{ExtensionProbe, Waves};
use crate::span::Span;
use crate::vocab::ABSENT;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mae,
    Mse,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Mae => "mae",
            LossKind::Mse => "mse",
        })
    }
}

pub fn loss(prediction: f64, target: f64, kind: LossKind) -> f64 {
    let diff = prediction - target;
    match kind {
        LossKind::Mae => diff.abs(),
        LossKind::Mse => diff * diff,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mark {
    Important,
    Unimportant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkedSpan {
    #[serde(flatten)]
    pub span: Span,
    pub mark: Mark,
}

/// Losses recorded by [`mark_importance`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub kind: LossKind,
    pub target: f64,
    /// Loss with every token present.
    pub loss_all: f64,
    /// Loss with the unimportant tokens masked.
    pub loss_imp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMask {
    pub marks: Vec<Mark>,
    /// Input row with unimportant positions set to the absent index.
    pub masked_row: Vec<u32>,
    /// Maximal runs of equal marks; they tile the sentence.
    pub phrases: Vec<MarkedSpan>,
    /// Prediction on the full sentence, when it was computed.
    pub y_all: Option<Prediction>,
    /// Prediction on `masked_row`, when it was computed.
    pub y_imp: Option<Prediction>,
    /// Present only when the loss scan ran.
    pub losses: Option<LossSummary>,
}

impl ImportanceMask {
    pub fn len(&self) -> usize {
        self.marks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marks.is_empty()
    }

    pub fn is_important(&self, position: usize) -> bool {
        self.marks[position] == Mark::Important
    }

    /// True when every position of `span` was marked unimportant.
    pub fn all_unimportant(&self, span: Span) -> bool {
        span.positions().all(|k| !self.is_important(k))
    }

    pub fn unimportant_spans(&self) -> impl Iterator<Item = Span> + '_ {
        self.phrases
            .iter()
            .filter(|p| p.mark == Mark::Unimportant)
            .map(|p| p.span)
    }
}

fn merge_marks(marks: &[Mark]) -> Vec<MarkedSpan> {
    let mut phrases: Vec<MarkedSpan> = Vec::new();
    for (k, &mark) in marks.iter().enumerate() {
        match phrases.last_mut() {
            Some(last) if last.mark == mark => last.span.end = k + 1,
            _ => phrases.push(MarkedSpan {
                span: Span::new(k, k + 1),
                mark,
            }),
        }
    }
    phrases
}

/// Keeps every position; used for classification and for regression
/// without a target.
pub fn skip_importance(row: &[u32]) -> ImportanceMask {
    let marks = vec![Mark::Important; row.len()];
    ImportanceMask {
        phrases: merge_marks(&marks),
        marks,
        masked_row: row.to_vec(),
        y_all: None,
        y_imp: None,
        losses: None,
    }
}

/// Runs the loss scan with one predictor call per marked phrase.
pub fn mark_importance<P: Predictor + ?Sized>(
    row: &[u32],
    target: f64,
    predictor: &P,
    kind: LossKind,
) -> Result<ImportanceMask> {
    mark_importance_with(row, target, predictor, kind, None)
}

/// As [`mark_importance`]; `window` bounds how many extensions are predicted
/// per call, trading calls for rows on long inputs.
pub fn mark_importance_with<P: Predictor + ?Sized>(
    row: &[u32],
    target: f64,
    predictor: &P,
    kind: LossKind,
    window: Option<usize>,
) -> Result<ImportanceMask> {
    if predictor.kind() != TaskKind::Regression {
        return Err(Error::TaskMismatch(
            "importance marking needs a regression predictor".into(),
        ));
    }
    if row.is_empty() {
        return Err(Error::EmptyText);
    }
    if !target.is_finite() {
        return Err(Error::Config(format!("target {target} is not finite")));
    }
    let waves = window.map_or(Waves::Unbounded, Waves::doubling);
    let n = row.len();
    let mut current = row.to_vec();
    let mut marks = vec![Mark::Important; n];
    let mut full: Option<(f64, f64)> = None;
    let mut state = (0.0, 0.0);

    let mut k = 0;
    while k < n {
        let mut probe = ExtensionProbe::new(predictor, &current, k, n, waves);
        if full.is_none() {
            probe = probe.with_leading_row(row.to_vec());
        }
        let y0 = probe.get(0)?.expect("position in range").value(None);
        if full.is_none() {
            let y_all = probe.leading_result().expect("leading row predicted").value(None);
            let l_all = loss(y_all, target, kind);
            full = Some((y_all, l_all));
            state = (y_all, l_all);
        }
        let l0 = loss(y0, target, kind);
        let dispensable = l0 <= state.1;

        let (mut j, mut prev_y, mut prev_l) = (0, y0, l0);
        while let Some(next) = probe.get(j + 1)? {
            let y = next.value(None);
            let l = loss(y, target, kind);
            let extend = if dispensable { l <= prev_l } else { l > prev_l };
            if !extend {
                break;
            }
            j += 1;
            prev_y = y;
            prev_l = l;
        }
        drop(probe);

        let span = Span::new(k, k + j + 1);
        if dispensable {
            marks[span.start..span.end].fill(Mark::Unimportant);
            current[span.start..span.end].fill(ABSENT);
            state = (prev_y, prev_l);
        }
        k = span.end;
    }

    let (y_all, loss_all) = full.expect("at least one position scanned");
    let (y_imp, loss_imp) = state;
    Ok(ImportanceMask {
        phrases: merge_marks(&marks),
        marks,
        masked_row: current,
        y_all: Some(Prediction::Score(y_all)),
        y_imp: Some(Prediction::Score(y_imp)),
        losses: Some(LossSummary {
            kind,
            target,
            loss_all,
            loss_imp,
        }),
    })
}
