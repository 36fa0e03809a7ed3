//! Signed phrase effects and EI scores.
//!
//! The EI score of a phrase is the percentage change of the model output
//! when the phrase is excluded, relative to the output with it included:
//! `(baseline - excluded) / baseline * 100`. The baseline is the prediction
//! on the importance-masked row for regression, or the class probability on
//! the full sentence for classification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::{skip_importance, ImportanceMask};
use crate::perturbation::{predict_rows, GramMatrix};
use crate::predictor::{Prediction, Predictor, TaskKind};
use crate::probe::{ExtensionProbe, Waves};
use crate::span::Span;

/// Baselines closer to zero than this have no meaningful percentage change.
pub const DEFAULT_EPSILON: f64 = 1e-12;
/// Scores within this distance of zero are neutral.
pub const DEFAULT_TAU: f64 = 1e-9;
pub const DEFAULT_MAX_GRAM: usize = 64;

/// Percentage change of the output when a phrase is excluded.
pub fn ei_score(baseline: f64, excluded: f64) -> Result<f64> {
    ei_score_with(baseline, excluded, DEFAULT_EPSILON)
}

pub fn ei_score_with(baseline: f64, excluded: f64, epsilon: f64) -> Result<f64> {
    if baseline.is_nan() || baseline.abs() < epsilon {
        return Err(Error::DegenerateBaseline(baseline));
    }
    Ok((baseline - excluded) / baseline * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectLabel {
    Positive,
    Negative,
    Neutral,
}

impl EffectLabel {
    pub fn from_score(value: f64, tau: f64) -> Self {
        if value > tau {
            EffectLabel::Positive
        } else if value < -tau {
            EffectLabel::Negative
        } else {
            EffectLabel::Neutral
        }
    }
}

/// Score of one phrase for one output channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EiScore {
    /// Class index for classification; absent for regression.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
    pub value: f64,
    pub baseline: f64,
    pub excluded: f64,
    /// Set when the baseline was degenerate and `value` holds the raw
    /// difference `baseline - excluded` instead of a percentage.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub raw_difference: bool,
    pub label: EffectLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseEffect {
    #[serde(flatten)]
    pub span: Span,
    pub label: EffectLabel,
    /// Score of the governing channel (the focus class for
    /// classification). Absent for unscored phrases.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ei: Option<f64>,
    /// One score for regression, one per class for classification. Empty
    /// for phrases lying wholly in unimportant regions.
    pub scores: Vec<EiScore>,
}

impl PhraseEffect {
    fn unscored(span: Span) -> Self {
        PhraseEffect {
            span,
            label: EffectLabel::Neutral,
            ei: None,
            scores: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FocusClass {
    /// The argmax of the baseline probabilities.
    #[default]
    Predicted,
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectOptions {
    pub tau: f64,
    pub epsilon: f64,
    pub focus: FocusClass,
}

impl Default for EffectOptions {
    fn default() -> Self {
        EffectOptions {
            tau: DEFAULT_TAU,
            epsilon: DEFAULT_EPSILON,
            focus: FocusClass::Predicted,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectScan {
    /// Prediction on the masked row that all scores are relative to.
    pub baseline: Prediction,
    pub focus_class: Option<usize>,
    pub effects: Vec<PhraseEffect>,
    /// Length of the longest scored span.
    pub max_span_len: usize,
    pub warnings: Vec<String>,
}

struct Scorer {
    baseline: Prediction,
    focus: Option<usize>,
    options: EffectOptions,
    warnings: Vec<String>,
}

impl Scorer {
    fn new(baseline: Prediction, options: EffectOptions) -> Result<Self> {
        let focus = match (&baseline, options.focus) {
            (Prediction::Score(_), _) => None,
            (Prediction::Probabilities(_), FocusClass::Predicted) => baseline.argmax(),
            (Prediction::Probabilities(p), FocusClass::Fixed(c)) => {
                if c >= p.len() {
                    return Err(Error::Config(format!(
                        "focus class {c} is out of range for {} classes",
                        p.len()
                    )));
                }
                Some(c)
            }
        };
        Ok(Scorer {
            baseline,
            focus,
            options,
            warnings: Vec::new(),
        })
    }

    fn channel(&self, class: Option<usize>, base: f64, excluded: f64) -> (EiScore, bool) {
        let (value, raw) = match ei_score_with(base, excluded, self.options.epsilon) {
            Ok(v) => (v, false),
            Err(_) => (base - excluded, true),
        };
        let score = EiScore {
            class,
            value,
            baseline: base,
            excluded,
            raw_difference: raw,
            label: EffectLabel::from_score(value, self.options.tau),
        };
        (score, raw)
    }

    /// Governing EI value of `excluded` without building the full record.
    fn focus_value(&self, excluded: &Prediction) -> f64 {
        let base = self.baseline.value(self.focus);
        let out = excluded.value(self.focus);
        ei_score_with(base, out, self.options.epsilon).unwrap_or(base - out)
    }

    fn score(&mut self, span: Span, excluded: &Prediction) -> PhraseEffect {
        let mut scores = Vec::new();
        let mut degenerate = false;
        match (&self.baseline, excluded) {
            (Prediction::Score(b), Prediction::Score(e)) => {
                let (s, raw) = self.channel(None, *b, *e);
                degenerate |= raw;
                scores.push(s);
            }
            (Prediction::Probabilities(b), Prediction::Probabilities(e)) => {
                for (c, (&pb, &pe)) in b.iter().zip(e).enumerate() {
                    let (s, raw) = self.channel(Some(c), pb, pe);
                    degenerate |= raw && Some(c) == self.focus;
                    scores.push(s);
                }
            }
            _ => unreachable!("prediction kinds validated against the task"),
        }
        if degenerate {
            self.warnings.push(format!(
                "span {span}: baseline is within {:e} of zero, reporting the raw difference",
                self.options.epsilon
            ));
        }
        let governing = match self.focus {
            Some(c) => &scores[c],
            None => &scores[0],
        };
        PhraseEffect {
            span,
            label: governing.label,
            ei: Some(governing.value),
            scores,
        }
    }

    fn finish(self, effects: Vec<PhraseEffect>) -> EffectScan {
        let max_span_len = effects
            .iter()
            .filter(|e| !e.scores.is_empty())
            .map(|e| e.span.len())
            .max()
            .unwrap_or(0);
        EffectScan {
            baseline: self.baseline,
            focus_class: self.focus,
            effects,
            max_span_len,
            warnings: self.warnings,
        }
    }
}

fn check_mask(mask: &ImportanceMask) -> Result<()> {
    if mask.is_empty() {
        return Err(Error::EmptyText);
    }
    Ok(())
}

/// Scores every contiguous phrase of the masked row.
///
/// Each gram size is one predictor call, so a sentence of `n` tokens costs
/// exactly `n` calls and `n(n+1)/2` rows. When the mask carries no baseline,
/// the masked row itself rides along in the unigram call.
pub fn effect_scan_exhaustive<P: Predictor + ?Sized>(
    mask: &ImportanceMask,
    predictor: &P,
    options: EffectOptions,
) -> Result<EffectScan> {
    check_mask(mask)?;
    let n = mask.len();
    let mut scorer: Option<Scorer> = mask
        .y_imp
        .clone()
        .map(|b| Scorer::new(b, options))
        .transpose()?;
    let mut effects = Vec::with_capacity(n * (n + 1) / 2);
    for gram in 1..=n {
        let matrix = GramMatrix::build(&mask.masked_row, gram)?;
        let spans: Vec<Span> = matrix.spans().collect();
        let mut rows = matrix.into_rows();
        let with_baseline = scorer.is_none();
        if with_baseline {
            rows.insert(0, mask.masked_row.clone());
        }
        let out = predict_rows(predictor, &rows)?;
        let offset = usize::from(with_baseline);
        if with_baseline {
            scorer = Some(Scorer::new(out.get(0), options)?);
        }
        let scorer = scorer.as_mut().expect("baseline set");
        for (r, span) in spans.into_iter().enumerate() {
            if mask.all_unimportant(span) {
                effects.push(PhraseEffect::unscored(span));
            } else {
                effects.push(scorer.score(span, &out.get(r + offset)));
            }
        }
    }
    Ok(scorer.expect("n >= 1").finish(effects))
}

/// Greedy scan for long inputs.
///
/// From each start position the omission grows rightwards while the
/// governing EI keeps moving further in the direction set by the first
/// token, capped at `max_gram` tokens. The resulting phrase is recorded and
/// the scan resumes after it. Phrases never cross unimportant positions;
/// those are reported as unscored neutral runs, so the output tiles the
/// sentence.
pub fn effect_scan_early_stop<P: Predictor + ?Sized>(
    mask: &ImportanceMask,
    predictor: &P,
    options: EffectOptions,
    max_gram: usize,
) -> Result<EffectScan> {
    check_mask(mask)?;
    if max_gram == 0 {
        return Err(Error::Config("max_gram must be at least 1".into()));
    }
    let row = &mask.masked_row;
    let mut scorer: Option<Scorer> = mask
        .y_imp
        .clone()
        .map(|b| Scorer::new(b, options))
        .transpose()?;
    let mut effects = Vec::new();

    for region in &mask.phrases {
        if region.mark != crate::importance::Mark::Important {
            effects.push(PhraseEffect::unscored(region.span));
            continue;
        }
        let mut i = region.span.start;
        while i < region.span.end {
            let limit = region.span.end.min(i + max_gram);
            let mut probe = ExtensionProbe::new(predictor, row, i, limit, Waves::doubling(max_gram));
            if scorer.is_none() {
                probe = probe.with_leading_row(row.clone());
            }
            let first = probe.get(0)?.expect("position in range").clone();
            if scorer.is_none() {
                let baseline = probe.leading_result().expect("leading row predicted").clone();
                scorer = Some(Scorer::new(baseline, options)?);
            }
            let s = scorer.as_mut().expect("baseline set");

            let first_value = s.focus_value(&first);
            let direction = EffectLabel::from_score(first_value, options.tau);
            let (mut j, mut last, mut last_value) = (0, first, first_value);
            if direction != EffectLabel::Neutral {
                while let Some(next) = probe.get(j + 1)? {
                    let value = s.focus_value(next);
                    let further = match direction {
                        EffectLabel::Positive => value > last_value,
                        _ => value < last_value,
                    };
                    if !further {
                        break;
                    }
                    j += 1;
                    last = next.clone();
                    last_value = value;
                }
            }
            let span = Span::new(i, i + j + 1);
            effects.push(s.score(span, &last));
            i = span.end;
        }
    }
    Ok(match scorer {
        Some(s) => s.finish(effects),
        // every position unimportant: nothing was scored, but the baseline
        // is still part of the result
        None => {
            let out = predict_rows(predictor, std::slice::from_ref(row))?;
            Scorer::new(out.get(0), options)?.finish(effects)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ScanMode {
    #[default]
    Exhaustive,
    EarlyStop,
}

/// Per-class effects on the full sentence; classification has no
/// importance step.
pub fn classify_effects<P: Predictor + ?Sized>(
    row: &[u32],
    predictor: &P,
    mode: ScanMode,
    options: EffectOptions,
    max_gram: usize,
) -> Result<EffectScan> {
    if predictor.kind() != TaskKind::Classification {
        return Err(Error::TaskMismatch(
            "classify_effects needs a classification predictor".into(),
        ));
    }
    let mask = skip_importance(row);
    match mode {
        ScanMode::Exhaustive => effect_scan_exhaustive(&mask, predictor, options),
        ScanMode::EarlyStop => effect_scan_early_stop(&mask, predictor, options, max_gram),
    }
}

/// Number of rows the exhaustive scan predicts for a sentence of `n` tokens.
pub fn exhaustive_row_count(n: usize) -> usize {
    n * (n + 1) / 2
}
