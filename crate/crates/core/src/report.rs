//! Explanation reports and their renderings.
//!
//! Positive phrases are shown in green and negative ones in red; neutral
//! text is left plain.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::effect::{EffectLabel, PhraseEffect, ScanMode};
use crate::error::Result;
use crate::importance::{LossSummary, MarkedSpan};
use crate::predictor::{Prediction, Task};
use crate::span::Span;

pub const SCHEMA: &str = "ei-report/1";

/// Identifier of an input record: the `id` field if present, otherwise
/// its line number.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RecordId {
    Int(i64),
    Str(String),
}

impl std::fmt::Display for RecordId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RecordId::Int(i) => write!(f, "{i}"),
            RecordId::Str(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSummary {
    /// Model output on the full sentence.
    pub output: Prediction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceSummary {
    #[serde(flatten)]
    pub losses: LossSummary,
    pub phrases: Vec<MarkedSpan>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounting {
    pub batch_invocations: u64,
    pub rows_predicted: u64,
    pub mode: ScanMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Input,
    Transport,
    Protocol,
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportError {
    pub kind: ErrorKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub schema: String,
    pub id: RecordId,
    pub text: String,
    pub tokens: Vec<String>,
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<PredictionSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    /// Present when the loss-based importance scan ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub importance: Option<ImportanceSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Prediction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focus_class: Option<usize>,
    pub effects: Vec<PhraseEffect>,
    /// Non-overlapping selection of `effects` used by the human renderings.
    pub display: Vec<Span>,
    pub accounting: Accounting,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ReportError>,
}

impl ExplanationReport {
    pub fn new(id: RecordId, text: impl Into<String>, tokens: Vec<String>, task: Task) -> Self {
        ExplanationReport {
            schema: SCHEMA.to_string(),
            id,
            text: text.into(),
            tokens,
            task,
            prediction: None,
            target: None,
            importance: None,
            baseline: None,
            focus_class: None,
            effects: Vec::new(),
            display: Vec::new(),
            accounting: Accounting::default(),
            warnings: Vec::new(),
            error: None,
        }
    }

    /// Replaces the effects and recomputes the display cover.
    pub fn set_effects(&mut self, effects: Vec<PhraseEffect>) {
        self.display = display_cover(&effects);
        self.effects = effects;
    }

    pub fn effect_at(&self, span: Span) -> Option<&PhraseEffect> {
        self.effects.iter().find(|e| e.span == span)
    }

    pub fn count_labels(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for e in &self.effects {
            counts[match e.label {
                EffectLabel::Positive => 0,
                EffectLabel::Negative => 1,
                EffectLabel::Neutral => 2,
            }] += 1;
        }
        counts
    }

    /// Displayed phrases in token order, with their labels and scores.
    fn displayed(&self) -> Vec<&PhraseEffect> {
        let mut shown: Vec<&PhraseEffect> = self
            .display
            .iter()
            .filter_map(|s| self.effect_at(*s))
            .filter(|e| e.label != EffectLabel::Neutral && e.span.end <= self.tokens.len())
            .collect();
        shown.sort_by_key(|e| e.span);
        shown
    }
}

/// Greedy non-overlapping cover by descending `|EI|`.
///
/// Ties prefer the earlier, then the shorter span, so the result does not
/// depend on the input order.
pub fn display_cover(effects: &[PhraseEffect]) -> Vec<Span> {
    let mut candidates: Vec<(f64, Span)> = effects
        .iter()
        .filter(|e| e.label != EffectLabel::Neutral)
        .filter_map(|e| e.ei.map(|v| (v.abs(), e.span)))
        .collect();
    candidates.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.start.cmp(&b.1.start))
            .then(a.1.len().cmp(&b.1.len()))
    });
    let mut chosen: Vec<Span> = Vec::new();
    for (_, span) in candidates {
        if chosen.iter().all(|c| !c.overlaps(&span)) {
            chosen.push(span);
        }
    }
    chosen.sort();
    chosen
}

pub fn render_json(report: &ExplanationReport) -> String {
    serde_json::to_string(report).expect("reports serialize")
}

pub fn parse_json(document: &str) -> Result<ExplanationReport> {
    Ok(serde_json::from_str(document)?)
}

const GREEN: &str = "\x1b[1;32m";
const RED: &str = "\x1b[1;31m";
const RESET: &str = "\x1b[0m";

/// Sentence with displayed phrases highlighted.
///
/// With `color` off, positive phrases are wrapped as `[+...+]` and negative
/// ones as `[-...-]`.
pub fn render_ansi(report: &ExplanationReport, color: bool) -> String {
    let mut out = String::new();
    let mut pos = 0;
    let push_tokens = |out: &mut String, tokens: &[String]| {
        for t in tokens {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(t);
        }
    };
    for e in report.displayed() {
        push_tokens(&mut out, &report.tokens[pos..e.span.start]);
        if !out.is_empty() {
            out.push(' ');
        }
        let (open, close) = match (e.label, color) {
            (EffectLabel::Positive, true) => (GREEN, RESET),
            (EffectLabel::Negative, true) => (RED, RESET),
            (EffectLabel::Positive, false) => ("[+", "+]"),
            _ => ("[-", "-]"),
        };
        out.push_str(open);
        out.push_str(&report.tokens[e.span.start..e.span.end].join(" "));
        out.push_str(close);
        pos = e.span.end;
    }
    push_tokens(&mut out, &report.tokens[pos..]);
    out
}

/// Multi-line terminal summary: header, highlighted sentence, then one line
/// per displayed phrase with its score.
pub fn render_ansi_summary(report: &ExplanationReport, color: bool) -> String {
    let mut out = format!("# {}", report.id);
    match &report.prediction {
        Some(PredictionSummary {
            output: Prediction::Score(y),
            ..
        }) => write!(out, "  prediction {y:.2}").unwrap(),
        Some(PredictionSummary {
            predicted_class: Some(c),
            output: Prediction::Probabilities(p),
        }) => write!(out, "  predicted class {c} (p = {:.2})", p[*c]).unwrap(),
        _ => {}
    }
    if let Some(c) = report.focus_class {
        write!(out, "  focus class {c}").unwrap();
    }
    out.push('\n');
    if let Some(err) = &report.error {
        writeln!(out, "  error: {}", err.message).unwrap();
        return out;
    }
    writeln!(out, "  {}", render_ansi(report, color)).unwrap();
    for e in report.displayed() {
        let phrase = report.tokens[e.span.start..e.span.end].join(" ");
        writeln!(out, "    {:+8.2}  {phrase}", e.ei.unwrap_or(0.0)).unwrap();
    }
    out
}

fn escape_html(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for ch in text.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

const STYLE: &str = "body{font-family:sans-serif;max-width:60em;margin:2em auto;line-height:1.8}\
.ei-pos{background:#b6f2b6}.ei-neg{background:#f5b5b5}\
.ei-pos,.ei-neg{padding:0 .2em;border-radius:.2em}\
table{border-collapse:collapse}td{padding:0 .8em}.err{color:#a00}";

fn html_section(report: &ExplanationReport) -> String {
    let mut out = String::new();
    writeln!(out, "<section>").unwrap();
    writeln!(out, "<h2>{}</h2>", escape_html(&report.id.to_string())).unwrap();
    if let Some(err) = &report.error {
        writeln!(out, "<p class=\"err\">{}</p>", escape_html(&err.message)).unwrap();
    }
    out.push_str("<p class=\"sentence\">");
    let shown = report.displayed();
    let mut pos = 0;
    let mut first = true;
    let mut sep = |out: &mut String| {
        if !first {
            out.push(' ');
        }
        first = false;
    };
    for e in &shown {
        for t in &report.tokens[pos..e.span.start] {
            sep(&mut out);
            out.push_str(&escape_html(t));
        }
        sep(&mut out);
        let class = if e.label == EffectLabel::Positive {
            "ei-pos"
        } else {
            "ei-neg"
        };
        let mut title = format!("EI {:+.2}%", e.ei.unwrap_or(0.0));
        if let Some(c) = report.focus_class {
            write!(title, " (class {c})").unwrap();
        }
        write!(
            out,
            "<span class=\"{class}\" title=\"{}\">{}</span>",
            escape_html(&title),
            escape_html(&report.tokens[e.span.start..e.span.end].join(" "))
        )
        .unwrap();
        pos = e.span.end;
    }
    for t in &report.tokens[pos..] {
        sep(&mut out);
        out.push_str(&escape_html(t));
    }
    out.push_str("</p>\n");
    if !shown.is_empty() {
        out.push_str("<table>\n");
        for e in &shown {
            writeln!(
                out,
                "<tr><td>{:+.2}</td><td>{}</td></tr>",
                e.ei.unwrap_or(0.0),
                escape_html(&report.tokens[e.span.start..e.span.end].join(" "))
            )
            .unwrap();
        }
        out.push_str("</table>\n");
    }
    out.push_str("</section>\n");
    out
}

/// Self-contained HTML page for one report.
pub fn render_html(report: &ExplanationReport) -> String {
    render_html_document(std::slice::from_ref(report))
}

/// Self-contained HTML page holding several reports.
pub fn render_html_document(reports: &[ExplanationReport]) -> String {
    let mut out = String::new();
    out.push_str("<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n");
    out.push_str("<title>EI explanations</title>\n");
    writeln!(out, "<style>{STYLE}</style>").unwrap();
    out.push_str("</head>\n<body>\n");
    for r in reports {
        out.push_str(&html_section(r));
    }
    out.push_str("</body>\n</html>\n");
    out
}
