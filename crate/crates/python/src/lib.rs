//! Python bindings for the EI explanation engine.

use std::time::Duration;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyList;

use exin::effect::{DEFAULT_EPSILON, DEFAULT_MAX_GRAM, DEFAULT_TAU};
use exin::engine::{FocusPolicy, DEFAULT_LONG_THRESHOLD};
use exin::importance::{mark_importance, Mark};
use exin::protocol::RemotePredictor;
use exin::report::{render_ansi, render_ansi_summary, render_html, render_html_document};
use exin::{
    ExplainConfig, ExplanationReport, LinearModel, LossKind, Mode, PredictError, PredictionBatch,
    Predictor, Record, RecordId, TaskKind, Vocabulary,
};

create_exception!(exin, ExinError, PyException);
create_exception!(exin, PredictorError, ExinError);

fn to_py(err: exin::Error) -> PyErr {
    match err {
        exin::Error::Predict(e) => PredictorError::new_err(e.to_string()),
        e => ExinError::new_err(e.to_string()),
    }
}

fn parse_task(task: &str) -> PyResult<TaskKind> {
    task.parse()
        .map_err(|_| PyValueError::new_err(format!("unknown task {task:?}")))
}

fn seconds(value: f64) -> PyResult<Duration> {
    Duration::try_from_secs_f64(value)
        .ok()
        .filter(|d| !d.is_zero())
        .ok_or_else(|| PyValueError::new_err(format!("timeout {value} must be positive")))
}

#[pyclass(name = "Vocabulary", module = "exin", frozen)]
struct PyVocabulary(Vocabulary);

#[pymethods]
impl PyVocabulary {
    /// Indices are assigned from 1 in first-seen order.
    #[new]
    fn new(tokens: Vec<String>) -> Self {
        PyVocabulary(Vocabulary::from_tokens(tokens))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Vocabulary::from_json(text).map(PyVocabulary).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Vocabulary::load(path).map(PyVocabulary).map_err(to_py)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    #[getter]
    fn oov_index(&self) -> u32 {
        self.0.oov_index()
    }

    fn index_of(&self, token: &str) -> u32 {
        self.0.index_of(token)
    }

    fn tokenize(&self, text: &str) -> PyResult<Vec<u32>> {
        self.0.tokenize(text).map(|s| s.indices).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __contains__(&self, token: &str) -> bool {
        self.0.contains(token)
    }
}

#[pyclass(name = "LinearModel", module = "exin", frozen)]
struct PyLinearModel(LinearModel);

#[pymethods]
impl PyLinearModel {
    #[staticmethod]
    #[pyo3(signature = (bias, coefficients))]
    fn regression(bias: f64, coefficients: std::collections::HashMap<u32, f64>) -> Self {
        PyLinearModel(LinearModel::regression(bias, coefficients))
    }

    #[staticmethod]
    fn classification(
        biases: Vec<f64>,
        coefficients: Vec<std::collections::HashMap<u32, f64>>,
    ) -> PyResult<Self> {
        LinearModel::classification(biases, coefficients)
            .map(PyLinearModel)
            .map_err(to_py)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        LinearModel::from_json(text).map(PyLinearModel).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        LinearModel::load(path).map(PyLinearModel).map_err(to_py)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    #[getter]
    fn task(&self) -> &'static str {
        self.0.task().kind().as_str()
    }

    /// Scores for regression, probability lists for classification.
    fn predict<'py>(&self, py: Python<'py>, rows: Vec<Vec<u32>>) -> PyResult<Bound<'py, PyAny>> {
        let out = self.0.predict(&rows).map_err(|e| to_py(e.into()))?;
        batch_to_py(py, out)
    }
}

fn batch_to_py(py: Python<'_>, batch: PredictionBatch) -> PyResult<Bound<'_, PyAny>> {
    Ok(match batch {
        PredictionBatch::Regression(v) => PyList::new(py, v)?.into_any(),
        PredictionBatch::Classification(v) => PyList::new(py, v)?.into_any(),
    })
}

/// Wraps a Python callable `rows -> outputs` as a predictor.
///
/// The callable receives a list of index lists and returns a list of floats
/// (regression) or a list of probability lists (classification).
#[pyclass(name = "CallablePredictor", module = "exin", frozen)]
struct CallablePredictor {
    callable: Py<PyAny>,
    task: TaskKind,
}

#[pymethods]
impl CallablePredictor {
    #[new]
    #[pyo3(signature = (callable, task = "regression"))]
    fn new(callable: Py<PyAny>, task: &str) -> PyResult<Self> {
        Ok(CallablePredictor {
            callable,
            task: parse_task(task)?,
        })
    }

    #[getter]
    fn task(&self) -> &'static str {
        self.task.as_str()
    }
}

impl Predictor for CallablePredictor {
    fn kind(&self) -> TaskKind {
        self.task
    }

    fn predict(&self, rows: &[Vec<u32>]) -> Result<PredictionBatch, PredictError> {
        Python::attach(|py| {
            let out = self
                .callable
                .call1(py, (rows.to_vec(),))
                .map_err(|e| PredictError::Model(e.to_string()))?;
            let out = out.bind(py);
            let batch = match self.task {
                TaskKind::Regression => out.extract::<Vec<f64>>().map(PredictionBatch::Regression),
                TaskKind::Classification => out
                    .extract::<Vec<Vec<f64>>>()
                    .map(PredictionBatch::Classification),
            };
            batch.map_err(|e| PredictError::Model(format!("bad predictor output: {e}")))
        })
    }
}

/// An external model speaking the line protocol over a child process or TCP.
#[pyclass(name = "RemoteModel", module = "exin", frozen)]
struct RemoteModel(RemotePredictor);

#[pymethods]
impl RemoteModel {
    #[staticmethod]
    #[pyo3(signature = (argv, task, handshake_timeout = 10.0))]
    fn spawn(py: Python<'_>, argv: Vec<String>, task: &str, handshake_timeout: f64) -> PyResult<Self> {
        let task = parse_task(task)?;
        let timeout = seconds(handshake_timeout)?;
        py.detach(|| RemotePredictor::spawn(&argv, task, timeout))
            .map(RemoteModel)
            .map_err(|e| to_py(e.into()))
    }

    #[staticmethod]
    #[pyo3(signature = (address, task, handshake_timeout = 10.0))]
    fn connect(py: Python<'_>, address: String, task: &str, handshake_timeout: f64) -> PyResult<Self> {
        let task = parse_task(task)?;
        let timeout = seconds(handshake_timeout)?;
        py.detach(|| RemotePredictor::connect_tcp(&address, task, timeout))
            .map(RemoteModel)
            .map_err(|e| to_py(e.into()))
    }

    #[getter]
    fn task(&self) -> &'static str {
        self.0.kind().as_str()
    }

    fn predict<'py>(&self, py: Python<'py>, rows: Vec<Vec<u32>>) -> PyResult<Bound<'py, PyAny>> {
        let out = py
            .detach(|| self.0.predict(&rows))
            .map_err(|e| to_py(e.into()))?;
        batch_to_py(py, out)
    }
}

enum Model<'py> {
    Linear(Bound<'py, PyLinearModel>),
    Callable(Bound<'py, CallablePredictor>),
    Remote(Bound<'py, RemoteModel>),
}

impl<'py> Model<'py> {
    fn extract(obj: &Bound<'py, PyAny>) -> PyResult<Self> {
        if let Ok(m) = obj.cast::<PyLinearModel>() {
            Ok(Model::Linear(m.clone()))
        } else if let Ok(m) = obj.cast::<CallablePredictor>() {
            Ok(Model::Callable(m.clone()))
        } else if let Ok(m) = obj.cast::<RemoteModel>() {
            Ok(Model::Remote(m.clone()))
        } else {
            Err(PyValueError::new_err(
                "model must be a LinearModel, CallablePredictor or RemoteModel",
            ))
        }
    }

    fn predictor(&self) -> &(dyn Predictor + 'static) {
        match self {
            Model::Linear(m) => &m.get().0,
            Model::Callable(m) => m.get(),
            Model::Remote(m) => &m.get().0,
        }
    }
}

/// One explanation; render it or read it back as JSON.
#[pyclass(name = "Report", module = "exin", frozen)]
struct PyReport(ExplanationReport);

#[pymethods]
impl PyReport {
    fn to_json(&self) -> String {
        exin::report::render_json(&self.0)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        exin::report::parse_json(text).map(PyReport).map_err(to_py)
    }

    /// The report as plain Python objects.
    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        py.import("json")?.call_method1("loads", (self.to_json(),))
    }

    #[pyo3(signature = (color = true))]
    fn render_ansi(&self, color: bool) -> String {
        render_ansi(&self.0, color)
    }

    #[pyo3(signature = (color = true))]
    fn render_summary(&self, color: bool) -> String {
        render_ansi_summary(&self.0, color)
    }

    fn render_html(&self) -> String {
        render_html(&self.0)
    }

    #[getter]
    fn tokens(&self) -> Vec<String> {
        self.0.tokens.clone()
    }

    #[getter]
    fn error(&self) -> Option<String> {
        self.0.error.as_ref().map(|e| e.message.clone())
    }

    #[getter]
    fn batch_invocations(&self) -> u64 {
        self.0.accounting.batch_invocations
    }

    #[getter]
    fn rows_predicted(&self) -> u64 {
        self.0.accounting.rows_predicted
    }

    /// `(start, end, label, ei)` per scored or unscored phrase.
    #[getter]
    fn effects(&self) -> Vec<(usize, usize, String, Option<f64>)> {
        self.0
            .effects
            .iter()
            .map(|e| {
                let label = serde_json::to_value(e.label)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from))
                    .unwrap_or_default();
                (e.span.start, e.span.end, label, e.ei)
            })
            .collect()
    }

    /// Spans chosen for highlighting.
    #[getter]
    fn display(&self) -> Vec<(usize, usize)> {
        self.0.display.iter().map(|s| (s.start, s.end)).collect()
    }

    fn __repr__(&self) -> String {
        format!("Report(id={}, tokens={})", self.0.id, self.0.tokens.len())
    }
}

fn record_id(id: Option<&Bound<'_, PyAny>>) -> PyResult<RecordId> {
    match id {
        None => Ok(RecordId::Int(0)),
        Some(v) => {
            if let Ok(i) = v.extract::<i64>() {
                Ok(RecordId::Int(i))
            } else {
                Ok(RecordId::Str(v.extract::<String>()?))
            }
        }
    }
}

fn parse_enum<T: clap::ValueEnum>(value: &str, what: &str) -> PyResult<T> {
    T::from_str(value, true).map_err(|_| PyValueError::new_err(format!("unknown {what} {value:?}")))
}

/// Explains `text` with `model` and returns a [`Report`].
#[pyfunction]
#[pyo3(signature = (
    text, vocab, model, *, label = None, id = None, mode = None, loss = "mae",
    max_gram = DEFAULT_MAX_GRAM, tau = DEFAULT_TAU, epsilon = DEFAULT_EPSILON,
    long_threshold = DEFAULT_LONG_THRESHOLD, focus = "predicted"
))]
#[allow(clippy::too_many_arguments)]
fn explain(
    py: Python<'_>,
    text: String,
    vocab: &Bound<'_, PyVocabulary>,
    model: &Bound<'_, PyAny>,
    label: Option<f64>,
    id: Option<&Bound<'_, PyAny>>,
    mode: Option<&str>,
    loss: &str,
    max_gram: usize,
    tau: f64,
    epsilon: f64,
    long_threshold: usize,
    focus: &str,
) -> PyResult<PyReport> {
    let config = ExplainConfig {
        mode: mode.map(|m| parse_enum::<Mode>(m, "mode")).transpose()?,
        loss: parse_enum::<LossKind>(loss, "loss")?,
        max_gram,
        tau,
        epsilon,
        long_threshold,
        focus: parse_enum::<FocusPolicy>(focus, "focus policy")?,
    };
    config.validate().map_err(to_py)?;
    let record = Record {
        id: record_id(id)?,
        text,
        label,
    };
    let model = Model::extract(model)?;
    let predictor = model.predictor();
    let vocab = &vocab.get().0;
    let report = py.detach(|| exin::explain(&record, vocab, predictor, &config));
    Ok(PyReport(report))
}

/// Rows of the gram matrix: row `r` has positions `r..r+gram` zeroed.
#[pyfunction]
fn build_gram_matrix(row: Vec<u32>, gram: usize) -> PyResult<Vec<Vec<u32>>> {
    exin::perturbation::build_gram_matrix(&row, gram)
        .map(|m| m.into_rows())
        .map_err(to_py)
}

/// EI in percent; raises when the baseline is too close to zero.
#[pyfunction]
#[pyo3(signature = (baseline, excluded, epsilon = DEFAULT_EPSILON))]
fn ei_score(baseline: f64, excluded: f64, epsilon: f64) -> PyResult<f64> {
    exin::effect::ei_score_with(baseline, excluded, epsilon).map_err(to_py)
}

type ImportanceResult = (Vec<bool>, Vec<u32>, (f64, f64));

/// Marks each position important or not; returns the marks, the masked
/// row and `(loss_all, loss_imp)`.
#[pyfunction]
#[pyo3(signature = (row, target, model, loss = "mae"))]
fn importance(
    py: Python<'_>,
    row: Vec<u32>,
    target: f64,
    model: &Bound<'_, PyAny>,
    loss: &str,
) -> PyResult<ImportanceResult> {
    let kind = parse_enum::<LossKind>(loss, "loss")?;
    let model = Model::extract(model)?;
    let predictor = model.predictor();
    let mask = py
        .detach(|| mark_importance(&row, target, predictor, kind))
        .map_err(to_py)?;
    let losses = mask.losses.expect("loss scan ran");
    Ok((
        mask.marks.iter().map(|m| *m == Mark::Important).collect(),
        mask.masked_row,
        (losses.loss_all, losses.loss_imp),
    ))
}

/// One HTML page holding all `reports`.
#[pyfunction]
fn render_html_page(reports: Vec<PyRef<'_, PyReport>>) -> String {
    let reports: Vec<ExplanationReport> = reports.iter().map(|r| r.0.clone()).collect();
    render_html_document(&reports)
}

#[pymodule]
#[pyo3(name = "exin")]
fn exin_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PROTOCOL", exin::protocol::PROTOCOL)?;
    m.add("ABSENT", exin::ABSENT)?;
    m.add("ExinError", m.py().get_type::<ExinError>())?;
    m.add("PredictorError", m.py().get_type::<PredictorError>())?;
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyLinearModel>()?;
    m.add_class::<CallablePredictor>()?;
    m.add_class::<RemoteModel>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(explain, m)?)?;
    m.add_function(wrap_pyfunction!(build_gram_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(ei_score, m)?)?;
    m.add_function(wrap_pyfunction!(importance, m)?)?;
    m.add_function(wrap_pyfunction!(render_html_page, m)?)?;
    Ok(())
}
