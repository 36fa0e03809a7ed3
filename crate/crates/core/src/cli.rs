//! Command-line front end: `exin explain` and `exin serve`.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::effect::{ScanMode, DEFAULT_EPSILON, DEFAULT_MAX_GRAM, DEFAULT_TAU};
use crate::engine::{explain, ExplainConfig, FocusPolicy, Record, DEFAULT_LONG_THRESHOLD};
use crate::error::{Error, Result};
use crate::importance::LossKind;
use crate::predictor::{LinearModel, Predictor, TaskKind};
use crate::protocol::{self, RemotePredictor};
use crate::report::{
    self, render_ansi_summary, render_html_document, ErrorKind, ExplanationReport, RecordId,
};
use crate::vocab::Vocabulary;

#[derive(Debug, Parser)]
#[command(name = "exin", version, about = "Phrase-level Exclusion-Inclusion explanations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Explain every record of a JSONL file.
    Explain(ExplainArgs),
    /// Serve a linear model over ei-predict/1 on stdin/stdout.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Ansi,
    Html,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Regression,
    Classification,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Regression => TaskKind::Regression,
            TaskArg::Classification => TaskKind::Classification,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ExplainArgs {
    /// Task; required for external models, checked against built-in ones.
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    /// Effect scan mode. Defaults to exhaustive, or early-stop for long inputs.
    #[arg(long, value_enum)]
    pub mode: Option<ScanMode>,
    #[arg(long, value_enum, default_value_t = LossKind::Mae)]
    pub loss: LossKind,
    #[arg(long, default_value_t = DEFAULT_MAX_GRAM)]
    pub max_gram: usize,
    /// Neutral band for EI scores.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    /// Smallest baseline magnitude that still gets a percentage score.
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Token count above which early-stop mode engages automatically.
    #[arg(long, default_value_t = DEFAULT_LONG_THRESHOLD)]
    pub long_threshold: usize,
    /// Which class drives the rendered labels for classification.
    #[arg(long, value_enum, default_value_t = FocusPolicy::Predicted)]
    pub focus: FocusPolicy,
    /// builtin:<model.json> | cmd:<command line> | tcp:<host:port>
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Output file (or directory with --html-per-record); stdout if omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Write one HTML file per record into the --output directory.
    #[arg(long)]
    pub html_per_record: bool,
    /// Disable ANSI colors (also honored via NO_COLOR).
    #[arg(long)]
    pub no_color: bool,
    /// Seconds to wait for an external model's handshake.
    #[arg(long, default_value_t = 10.0)]
    pub handshake_timeout: f64,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    /// Linear model file (JSON).
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelSource {
    Builtin(PathBuf),
    Command(Vec<String>),
    Tcp(String),
}

impl std::str::FromStr for ModelSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(path) = s.strip_prefix("builtin:") {
            Ok(ModelSource::Builtin(path.into()))
        } else if let Some(cmd) = s.strip_prefix("cmd:") {
            let argv = shlex::split(cmd)
                .filter(|a| !a.is_empty())
                .ok_or_else(|| Error::Config(format!("cannot parse command {cmd:?}")))?;
            Ok(ModelSource::Command(argv))
        } else if let Some(addr) = s.strip_prefix("tcp:") {
            Ok(ModelSource::Tcp(addr.into()))
        } else {
            Err(Error::Config(format!(
                "model source {s:?} must start with builtin:, cmd: or tcp:"
            )))
        }
    }
}

pub fn open_predictor(
    source: &ModelSource,
    task: Option<TaskKind>,
    handshake_timeout: Duration,
) -> Result<Box<dyn Predictor>> {
    match source {
        ModelSource::Builtin(path) => {
            let model = LinearModel::load(path)?;
            if let Some(task) = task {
                if task != model.task().kind() {
                    return Err(Error::TaskMismatch(format!(
                        "--task {} but the model is a {} model",
                        task.as_str(),
                        model.task().kind().as_str()
                    )));
                }
            }
            Ok(Box::new(model))
        }
        ModelSource::Command(argv) => {
            let task = task.ok_or_else(|| Error::Config("--task is required for cmd: models".into()))?;
            Ok(Box::new(RemotePredictor::spawn(argv, task, handshake_timeout)?))
        }
        ModelSource::Tcp(addr) => {
            let task = task.ok_or_else(|| Error::Config("--task is required for tcp: models".into()))?;
            Ok(Box::new(RemotePredictor::connect_tcp(addr, task, handshake_timeout)?))
        }
    }
}

/// A skipped input line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub records: Vec<Record>,
    pub diagnostics: Vec<Diagnostic>,
}

fn parse_record(line: &str, line_no: usize) -> std::result::Result<Record, String> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let object = value.as_object().ok_or("not a JSON object")?;
    let text = object
        .get("text")
        .ok_or("missing \"text\"")?
        .as_str()
        .ok_or("\"text\" is not a string")?
        .to_string();
    let id = match object.get("id") {
        None | Some(serde_json::Value::Null) => RecordId::Int(line_no as i64),
        Some(serde_json::Value::String(s)) => RecordId::Str(s.clone()),
        Some(v) => RecordId::Int(v.as_i64().ok_or("\"id\" must be a string or integer")?),
    };
    let label = match object.get("label") {
        None | Some(serde_json::Value::Null) => None,
        Some(v) => Some(v.as_f64().ok_or("\"label\" is not a number")?),
    };
    Ok(Record { id, text, label })
}

/// Reads JSONL records; bad lines become diagnostics.
pub fn ingest_reader(reader: impl BufRead) -> Result<Ingested> {
    let mut records = Vec::new();
    let mut diagnostics = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io("<input>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(&line, line_no) {
            Ok(r) => records.push(r),
            Err(message) => diagnostics.push(Diagnostic {
                line: line_no,
                message,
            }),
        }
    }
    if records.is_empty() {
        return Err(Error::Config("input contains no valid records".into()));
    }
    Ok(Ingested {
        records,
        diagnostics,
    })
}

pub fn ingest(path: impl AsRef<Path>) -> Result<Ingested> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(BufReader::new(file))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub records: usize,
    pub failed: usize,
    pub skipped_lines: usize,
    pub positive: usize,
    pub negative: usize,
    pub neutral: usize,
    pub batch_invocations: u64,
    pub rows_predicted: u64,
    /// A transport or protocol failure stopped the run early.
    pub aborted: Option<String>,
}

impl RunSummary {
    fn add(&mut self, report: &ExplanationReport) {
        self.records += 1;
        if report.error.is_some() {
            self.failed += 1;
        }
        let [p, n, z] = report.count_labels();
        self.positive += p;
        self.negative += n;
        self.neutral += z;
        self.batch_invocations += report.accounting.batch_invocations;
        self.rows_predicted += report.accounting.rows_predicted;
    }
}

impl std::fmt::Display for RunSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} records ({} failed, {} lines skipped); spans: {} positive, {} negative, {} neutral; {} batch invocations, {} rows",
            self.records,
            self.failed,
            self.skipped_lines,
            self.positive,
            self.negative,
            self.neutral,
            self.batch_invocations,
            self.rows_predicted
        )?;
        if let Some(reason) = &self.aborted {
            write!(f, "; aborted: {reason}")?;
        }
        Ok(())
    }
}

enum Sink {
    Json(Box<dyn Write>),
    Ansi(Box<dyn Write>, bool),
    Html(Option<Box<dyn Write>>, Vec<ExplanationReport>),
    HtmlDir(PathBuf, usize),
}

fn file_name_part(id: &RecordId) -> String {
    id.to_string()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .take(64)
        .collect()
}

impl Sink {
    fn open(args: &ExplainArgs) -> Result<Self> {
        let writer = |path: &Option<PathBuf>| -> Result<Box<dyn Write>> {
            Ok(match path {
                Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
                None => Box::new(BufWriter::new(io::stdout())),
            })
        };
        Ok(match args.format {
            Format::Json => Sink::Json(writer(&args.output)?),
            Format::Ansi => {
                let color = !args.no_color && std::env::var_os("NO_COLOR").is_none();
                Sink::Ansi(writer(&args.output)?, color)
            }
            Format::Html if args.html_per_record => {
                let dir = args.output.clone().ok_or_else(|| {
                    Error::Config("--html-per-record needs an --output directory".into())
                })?;
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                Sink::HtmlDir(dir, 0)
            }
            Format::Html => Sink::Html(Some(writer(&args.output)?), Vec::new()),
        })
    }

    fn write(&mut self, report: &ExplanationReport) -> Result<()> {
        let io_err = |e| Error::io("<output>", e);
        match self {
            Sink::Json(w) => {
                writeln!(w, "{}", report::render_json(report)).map_err(io_err)?;
                w.flush().map_err(io_err)
            }
            Sink::Ansi(w, color) => {
                write!(w, "{}", render_ansi_summary(report, *color)).map_err(io_err)?;
                w.flush().map_err(io_err)
            }
            Sink::Html(_, reports) => {
                reports.push(report.clone());
                Ok(())
            }
            Sink::HtmlDir(dir, count) => {
                *count += 1;
                let path = dir.join(format!("{:05}-{}.html", count, file_name_part(&report.id)));
                std::fs::write(&path, report::render_html(report)).map_err(|e| Error::io(&path, e))
            }
        }
    }

    fn finish(self) -> Result<()> {
        if let Sink::Html(Some(mut w), reports) = self {
            w.write_all(render_html_document(&reports).as_bytes())
                .and_then(|_| w.flush())
                .map_err(|e| Error::io("<output>", e))?;
        }
        Ok(())
    }
}

/// Records explained in parallel per step when the model allows it.
const PARALLEL_CHUNK: usize = 64;

/// Runs `exin explain`. Per-record failures are reported inline; transport
/// and protocol failures stop the run after flushing what was written.
pub fn run_explain(args: &ExplainArgs) -> Result<RunSummary> {
    let config = ExplainConfig {
        mode: args.mode,
        loss: args.loss,
        max_gram: args.max_gram,
        tau: args.tau,
        epsilon: args.epsilon,
        long_threshold: args.long_threshold,
        focus: args.focus,
    };
    config.validate()?;
    if !args.handshake_timeout.is_finite() || args.handshake_timeout <= 0.0 {
        return Err(Error::Config("--handshake-timeout must be positive".into()));
    }
    let source: ModelSource = args.model.parse()?;
    let vocab = Vocabulary::load(&args.vocab)?;
    let ingested = ingest(&args.input)?;
    for d in &ingested.diagnostics {
        eprintln!("{}:{}: skipped: {}", args.input.display(), d.line, d.message);
    }
    let predictor = open_predictor(
        &source,
        args.task.map(Into::into),
        Duration::from_secs_f64(args.handshake_timeout),
    )?;

    let mut sink = Sink::open(args)?;
    let mut summary = RunSummary {
        skipped_lines: ingested.diagnostics.len(),
        ..Default::default()
    };
    let chunk = if predictor.concurrent() { PARALLEL_CHUNK } else { 1 };
    'records: for records in ingested.records.chunks(chunk) {
        let reports: Vec<ExplanationReport> = if records.len() > 1 {
            records
                .par_iter()
                .map(|r| explain(r, &vocab, &*predictor, &config))
                .collect()
        } else {
            records
                .iter()
                .map(|r| explain(r, &vocab, &*predictor, &config))
                .collect()
        };
        for report in &reports {
            sink.write(report)?;
            summary.add(report);
            if let Some(err) = &report.error {
                if matches!(err.kind, ErrorKind::Transport | ErrorKind::Protocol) {
                    summary.aborted = Some(err.message.clone());
                    break 'records;
                }
            }
        }
    }
    sink.finish()?;
    Ok(summary)
}

pub fn run_serve(args: &ServeArgs) -> Result<()> {
    let model = LinearModel::load(&args.model)?;
    let stdin = io::stdin();
    let stdout = io::stdout();
    protocol::serve(&model, stdin.lock(), stdout.lock()).map_err(|e| Error::io("<stdio>", e))
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match cli.command {
        Command::Explain(args) => match run_explain(&args) {
            Ok(summary) => {
                eprintln!("{summary}");
                i32::from(summary.aborted.is_some())
            }
            Err(e) => {
                eprintln!("error: {e}");
                1
            }
        },
        Command::Serve(args) => match run_serve(&args) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                1
            }
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn ingest_two_lines() {
        let input = "{\"text\": \"good movie\", \"label\": 1.5}\n{\"id\": \"x\", \"text\": \"bad\"}\n";
        let got = ingest_reader(Cursor::new(input)).unwrap();
        assert_eq!(got.records.len(), 2);
        assert_eq!(got.records[0].id, RecordId::Int(1));
        assert_eq!(got.records[0].label, Some(1.5));
        assert_eq!(got.records[1].id, RecordId::Str("x".into()));
        assert!(got.diagnostics.is_empty());
    }

    #[test]
    fn ingest_skips_bad_lines() {
        let input = "{\"label\": 1}\nnot json\n{\"text\": 3}\n\n{\"text\": \"ok\"}\n";
        let got = ingest_reader(Cursor::new(input)).unwrap();
        assert_eq!(got.records.len(), 1);
        assert_eq!(got.records[0].id, RecordId::Int(5));
        let lines: Vec<usize> = got.diagnostics.iter().map(|d| d.line).collect();
        assert_eq!(lines, vec![1, 2, 3]);
        assert!(got.diagnostics[0].message.contains("text"));
    }

    #[test]
    fn ingest_requires_a_record() {
        assert!(ingest_reader(Cursor::new("{}\n")).is_err());
        assert!(ingest("/nonexistent/input.jsonl").is_err());
    }

    #[test]
    fn model_sources() {
        assert_eq!(
            "builtin:m.json".parse::<ModelSource>().unwrap(),
            ModelSource::Builtin("m.json".into())
        );
        assert_eq!(
            "cmd:python3 'server x.py' --flag".parse::<ModelSource>().unwrap(),
            ModelSource::Command(vec!["python3".into(), "server x.py".into(), "--flag".into()])
        );
        assert_eq!(
            "tcp:127.0.0.1:9000".parse::<ModelSource>().unwrap(),
            ModelSource::Tcp("127.0.0.1:9000".into())
        );
        assert!("m.json".parse::<ModelSource>().is_err());
        assert!("cmd:".parse::<ModelSource>().is_err());
    }

    #[test]
    fn cli_parses_flags() {
        let cli = Cli::try_parse_from([
            "exin", "explain", "--task", "regression", "--mode", "early-stop", "--loss", "mse",
            "--max-gram", "8", "--tau", "0.5", "--model", "builtin:m.json", "--vocab", "v.json",
            "--input", "in.jsonl", "--format", "html",
        ])
        .unwrap();
        let Command::Explain(args) = cli.command else {
            panic!()
        };
        assert_eq!(args.mode, Some(ScanMode::EarlyStop));
        assert_eq!(args.loss, LossKind::Mse);
        assert_eq!(args.max_gram, 8);
        assert_eq!(args.format, Format::Html);
    }
}
