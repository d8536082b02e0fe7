//! Python bindings: run configuration, training, checkpoint evaluation,
//! corpus statistics, the oracle suite and the closed-form losses.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyFloat, PyInt, PyString};

use clipbench::checkpoint::Checkpoint;
use clipbench::config::{prompt_set, ConfigError, RunConfig};
use clipbench::corpus::{CorpusReport, CorpusStats as CoreStats};
use clipbench::data::{read_manifest, TokenBatch, Vocab};
use clipbench::encoders::ClipModel;
use clipbench::supervision::info_nce_value;
use clipbench::trainer::{self, load_for_eval, EvalSet, PairSet, RunOptions, StepRecord, TrainError, Trainer as CoreTrainer};
use clipbench::verify;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn config_err(e: ConfigError) -> PyErr {
    match e {
        ConfigError::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => value_err(e),
    }
}

fn train_err(e: TrainError) -> PyErr {
    match e {
        TrainError::Io { .. } => PyOSError::new_err(e.to_string()),
        TrainError::Config(_) | TrainError::Data(_) => value_err(e),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Renders a Python scalar as a TOML literal for `RunConfig::resolve`.
fn toml_literal(v: &Bound<'_, PyAny>) -> PyResult<String> {
    if v.is_instance_of::<PyBool>() {
        Ok(v.extract::<bool>()?.to_string())
    } else if v.is_instance_of::<PyInt>() {
        Ok(v.extract::<i64>()?.to_string())
    } else if v.is_instance_of::<PyFloat>() {
        let x: f64 = v.extract()?;
        Ok(format!("{x:?}"))
    } else if v.is_instance_of::<PyString>() {
        let s: String = v.extract()?;
        Ok(format!("{s:?}"))
    } else {
        Err(value_err(format!("unsupported override value {v}; use bool, int, float or str")))
    }
}

/// A resolved run configuration.
#[pyclass(frozen, skip_from_py_object, module = "pyclipbench")]
#[derive(Clone)]
struct Config {
    inner: RunConfig,
}

#[pymethods]
impl Config {
    /// `Config(path=None, overrides={"train.epochs": 3, "train.variant": "filip"})`
    #[new]
    #[pyo3(signature = (path=None, overrides=None))]
    fn new(path: Option<PathBuf>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut pairs = Vec::new();
        if let Some(d) = overrides {
            for (k, v) in d.iter() {
                pairs.push((k.extract::<String>()?, toml_literal(&v)?));
            }
        }
        let inner = RunConfig::resolve(path.as_deref(), &pairs).map_err(config_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.train.variant.name().to_string()
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.inner.out_dir.clone()
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn __repr__(&self) -> String {
        format!("Config(variant={:?}, out_dir={:?})", self.variant(), self.inner.out_dir)
    }
}

fn step_dict<'py>(py: Python<'py>, r: &StepRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", r.epoch)?;
    d.set_item("step", r.step)?;
    d.set_item("lr", r.lr)?;
    d.set_item("tau", r.tau)?;
    d.set_item("loss", r.breakdown.total)?;
    let terms = PyDict::new(py);
    for (t, v) in &r.breakdown.terms {
        terms.set_item(t.label(), v)?;
    }
    d.set_item("terms", terms)?;
    d.set_item("log_line", r.log_line())?;
    Ok(d)
}

/// Training state over the data named by a `Config`.
#[pyclass(module = "pyclipbench")]
struct Trainer {
    config: RunConfig,
    inner: CoreTrainer,
    val: EvalSet,
    prompts: clipbench::zeroshot::PromptSet,
}

fn load_data(config: &RunConfig) -> PyResult<(Vocab, PairSet, EvalSet, clipbench::zeroshot::PromptSet)> {
    let size = config.model.image.image_size();
    let train = config.train_records().map_err(value_err)?;
    let val = config.val_records().map_err(value_err)?;
    let prompts = config.prompts().map_err(value_err)?;
    let vocab = config.vocab(&train);
    Ok((
        vocab,
        PairSet::from_records(&train, size).map_err(train_err)?,
        EvalSet::from_records(&val, size).map_err(train_err)?,
        prompts,
    ))
}

#[pymethods]
impl Trainer {
    #[new]
    fn new(config: &Config) -> PyResult<Self> {
        let (vocab, train, val, prompts) = load_data(&config.inner)?;
        let inner = CoreTrainer::new(config.inner.settings(), vocab, train).map_err(train_err)?;
        Ok(Self {
            config: config.inner.clone(),
            inner,
            val,
            prompts,
        })
    }

    /// Continues from a checkpoint; `config` supplies the data.
    #[staticmethod]
    fn resume(path: PathBuf, config: &Config) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(|e| PyOSError::new_err(format!("{}: {e}", path.display())))?;
        let (_, train, val, prompts) = load_data(&config.inner)?;
        let inner = CoreTrainer::resume(&ckpt, train).map_err(train_err)?;
        Ok(Self {
            config: config.inner.clone(),
            inner,
            val,
            prompts,
        })
    }

    #[getter]
    fn step_count(&self) -> u64 {
        self.inner.step_count()
    }

    #[getter]
    fn total_steps(&self) -> u64 {
        self.inner.total_steps()
    }

    #[getter]
    fn temperature(&self) -> f64 {
        self.inner.model().temperature()
    }

    /// One optimizer step; returns its metrics.
    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let r = py.detach(|| self.inner.step()).map_err(train_err)?;
        step_dict(py, &r)
    }

    /// Zero-shot top-1 accuracy on the validation set.
    fn evaluate(&self, py: Python<'_>) -> PyResult<f64> {
        let r = py.detach(|| self.inner.evaluate(&self.val, &self.prompts)).map_err(train_err)?;
        Ok(r.accuracy)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ckpt = self.inner.checkpoint().map_err(train_err)?;
        ckpt.save(&path).map_err(|e| PyOSError::new_err(format!("{}: {e}", path.display())))
    }

    /// Trains to the end, writing the run directory, and returns the final
    /// validation accuracy (None when no step remained).
    fn run(&mut self, py: Python<'_>) -> PyResult<Option<f64>> {
        let config = &self.config;
        let (inner, val, prompts) = (&mut self.inner, &self.val, &self.prompts);
        let summary = py
            .detach(|| {
                config.write_to(&config.out_dir).map_err(|e| TrainError::Config(e.to_string()))?;
                trainer::run(
                    inner,
                    &RunOptions {
                        out_dir: &config.out_dir,
                        eval: Some(val),
                        prompts,
                        progress: None,
                    },
                )
            })
            .map_err(train_err)?;
        Ok(summary.final_report.map(|r| r.accuracy))
    }
}

/// A trained model loaded from a checkpoint.
#[pyclass(frozen, module = "pyclipbench")]
struct Model {
    vocab: Vocab,
    inner: ClipModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(|e| PyOSError::new_err(format!("{}: {e}", path.display())))?;
        let (vocab, inner) = load_for_eval(&ckpt).map_err(train_err)?;
        Ok(Self { vocab, inner })
    }

    #[getter]
    fn temperature(&self) -> f64 {
        self.inner.temperature()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.params().tensors().iter().map(|t| t.numel()).sum()
    }

    /// Unit-norm pooled text embeddings, one list per caption.
    fn encode_text(&self, py: Python<'_>, captions: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
        let context = self.inner.config().text.context_length;
        let rows: Vec<_> = captions.iter().map(|c| self.vocab.tokenize(c, context)).collect();
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let sets = py
            .detach(|| self.inner.embed_texts(&TokenBatch::from_tokenized(&rows)))
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(sets.into_iter().map(|s| s.pooled).collect())
    }

    /// Zero-shot evaluation on a labelled manifest. Returns accuracy,
    /// class names and the confusion matrix.
    #[pyo3(signature = (manifest, prompts="desk"))]
    fn evaluate<'py>(&self, py: Python<'py>, manifest: PathBuf, prompts: &str) -> PyResult<Bound<'py, PyDict>> {
        let prompts = prompt_set(prompts).map_err(value_err)?;
        let records = read_manifest(&manifest).map_err(value_err)?;
        let eval = EvalSet::from_records(&records, self.inner.config().image.image_size()).map_err(train_err)?;
        let r = py.detach(|| eval.evaluate(&self.inner, &self.vocab, &prompts)).map_err(train_err)?;
        let d = PyDict::new(py);
        d.set_item("accuracy", r.accuracy)?;
        d.set_item("class_names", r.class_names)?;
        d.set_item("confusion", r.confusion)?;
        Ok(d)
    }
}

fn report_dict<'py>(py: Python<'py>, r: &CorpusReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("examples", r.examples)?;
    d.set_item("caption_length_mean", r.mean_length)?;
    d.set_item("caption_length_std", r.std_length)?;
    d.set_item("en_word_ratio", r.english_ratio)?;
    d.set_item("en_word_ratio_per_caption", r.caption_english_ratio)?;
    d.set_item("unique_tokens", r.unique_tokens)?;
    Ok(d)
}

/// Mergeable corpus statistics.
#[pyclass(skip_from_py_object, module = "pyclipbench")]
#[derive(Clone, Default)]
struct CorpusStats {
    inner: CoreStats,
}

#[pymethods]
impl CorpusStats {
    #[new]
    fn new() -> Self {
        Self::default()
    }

    fn add(&mut self, caption: &str) {
        self.inner.add(caption);
    }

    fn extend(&mut self, captions: Vec<String>) {
        captions.iter().for_each(|c| self.inner.add(c));
    }

    fn merge(&mut self, other: &CorpusStats) {
        self.inner.merge(other.inner.clone());
    }

    fn report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        report_dict(py, &self.inner.report())
    }
}

/// Statistics of a list of captions in one pass.
#[pyfunction]
fn corpus_stats<'py>(py: Python<'py>, captions: Vec<String>) -> PyResult<Bound<'py, PyDict>> {
    report_dict(py, &clipbench::corpus::analyze(captions.iter().map(String::as_str)))
}

/// Runs the oracle suite; returns `(name, passed, detail)` per check.
#[pyfunction]
#[pyo3(signature = (only=None))]
fn run_verify(py: Python<'_>, only: Option<Vec<String>>) -> Vec<(String, bool, String)> {
    let only = only.unwrap_or_default();
    py.detach(|| verify::run_checks(&[], &only))
        .into_iter()
        .map(|o| (o.name.to_string(), o.passed, o.detail))
        .collect()
}

/// Symmetric-direction InfoNCE of matched rows `left[i]`, `right[i]`.
#[pyfunction]
fn info_nce(left: Vec<Vec<f64>>, right: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    info_nce_value(&left, &right, tau).map_err(value_err)
}

#[pymodule]
pub fn pyclipbench(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Config>()?;
    m.add_class::<Trainer>()?;
    m.add_class::<Model>()?;
    m.add_class::<CorpusStats>()?;
    m.add_function(wrap_pyfunction!(corpus_stats, m)?)?;
    m.add_function(wrap_pyfunction!(run_verify, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce, m)?)?;
    m.add("VARIANTS", ["clip", "slip", "filip", "declip", "defilip"])?;
    Ok(())
}
