//! Python bindings: configs, synthetic logs, training, checkpoints,
//! scoring and the metrics.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use deepmcp::cli::{run_ablation, CliError, DataArgs, Dataset, ModelKind};
use deepmcp::config::RunConfig;
use deepmcp::features::{read_log, FieldSchema, Instance};
use deepmcp::metrics::{self, ScoredSet};
use deepmcp::synth;
use deepmcp::training::{self, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn cli_err(e: CliError) -> PyErr {
    match e {
        CliError::Usage(_) | CliError::Config(_) => PyValueError::new_err(e.to_string()),
        CliError::Data(_) => PyIOError::new_err(e.to_string()),
        CliError::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
    }
}

fn ckpt_err(e: CheckpointError) -> PyErr {
    match e {
        CheckpointError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Run configuration (`train.*` and `world.*` keys).
#[pyclass(name = "Config", module = "deepmcp_py", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    /// Defaults, then `text` (config-file syntax), then `overrides`
    /// (`key=value` strings).
    #[new]
    #[pyo3(signature = (text=None, overrides=None))]
    fn new(text: Option<&str>, overrides: Option<Vec<String>>) -> PyResult<Self> {
        let mut inner = RunConfig::default();
        if let Some(t) = text {
            inner.apply_text(t).map_err(value_err)?;
        }
        for kv in overrides.unwrap_or_default() {
            inner.apply_override(&kv).map_err(value_err)?;
        }
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
        Self::new(Some(&text), None)
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(value_err)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        let v = match key.split_once('.') {
            Some(("train", k)) => self.inner.train.get(k),
            Some(("world", k)) => self.inner.world.get(k),
            _ => None,
        };
        v.ok_or_else(|| PyValueError::new_err(format!("unknown config key {key:?}")))
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={}, world_seed={})", self.inner.train.seed, self.inner.world.seed)
    }
}

/// Ordered `(name, group, valence)` field list.
#[pyclass(name = "Schema", module = "deepmcp_py", skip_from_py_object)]
#[derive(Clone)]
struct PySchema {
    inner: FieldSchema,
}

#[pymethods]
impl PySchema {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: FieldSchema::parse(text).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: FieldSchema::load(&path).map_err(value_err)?,
        })
    }

    fn fields(&self) -> Vec<(String, String, String)> {
        self.inner
            .fields()
            .iter()
            .map(|f| (f.name.clone(), f.group.as_str().to_string(), f.valence.as_str().to_string()))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __str__(&self) -> String {
        self.inner.to_string()
    }
}

/// A trained checkpoint.
#[pyclass(name = "Model", module = "deepmcp_py")]
struct PyModel {
    inner: Checkpoint,
}

impl PyModel {
    fn read(&self, path: &Path) -> PyResult<Vec<Instance>> {
        read_log(path, self.inner.model.schema(), self.inner.config.hash_space).map_err(value_err)
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path).map_err(ckpt_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(ckpt_err)
    }

    /// Copy without the matching and correlation towers.
    fn stripped(&self) -> Self {
        Self {
            inner: self.inner.stripped(),
        }
    }

    fn has_aux_towers(&self) -> bool {
        self.inner.model.aux.is_some()
    }

    /// pCTR for every line of a log file, prediction subnet only.
    fn predict(&self, log_path: PathBuf) -> PyResult<Vec<f64>> {
        let data = self.read(&log_path)?;
        training::score_all(&self.inner.model, &data).map_err(value_err)
    }

    /// `(auc, logloss)` on a log file.
    fn evaluate(&self, log_path: PathBuf) -> PyResult<(f64, f64)> {
        let data = self.read(&log_path)?;
        let r = training::evaluate(&self.inner.model, &data).map_err(value_err)?;
        Ok((r.auc, r.logloss))
    }

    /// Forward calls per subnet since load or the last reset.
    fn subnet_calls(&self) -> (u64, u64, u64) {
        let c = self.inner.model.counts();
        (c.prediction, c.matching, c.correlation)
    }

    fn reset_counts(&self) {
        self.inner.model.reset_counts();
    }

    #[getter]
    fn best_val_auc(&self) -> f64 {
        self.inner.best_val_auc
    }

    #[getter]
    fn batch(&self) -> u64 {
        self.inner.batch
    }

    fn config_text(&self) -> String {
        self.inner.config.to_text()
    }

    fn schema(&self) -> PySchema {
        PySchema {
            inner: self.inner.model.schema().clone(),
        }
    }
}

/// Writes train/val/test.tsv and schema.csv for the configured world and
/// returns their paths.
#[pyfunction]
#[pyo3(signature = (out_dir, config=None))]
fn generate(out_dir: PathBuf, config: Option<&PyConfig>) -> PyResult<Vec<PathBuf>> {
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    let world = synth::generate_world(&cfg.world).map_err(value_err)?;
    let files = synth::generate_log(&world, &cfg.world, &out_dir).map_err(|e| PyIOError::new_err(e.to_string()))?;
    Ok(vec![files.train, files.val, files.test, files.schema])
}

/// Trains one DeepMCP-family model on the logs in `data_dir`.
#[pyfunction]
#[pyo3(signature = (data_dir, config=None, model="deepmcp"))]
fn train(data_dir: PathBuf, config: Option<&PyConfig>, model: &str) -> PyResult<PyModel> {
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    cfg.validate().map_err(value_err)?;
    let kind: ModelKind = model.parse().map_err(cli_err)?;
    let (tcfg, objective) = kind
        .variant(&cfg.train)
        .ok_or_else(|| PyValueError::new_err(format!("{model} has no checkpoint form; use ablate")))?;
    let args = DataArgs {
        data: Some(data_dir),
        train: None,
        val: None,
        test: None,
        schema: None,
    };
    let ds = Dataset::load(&args, tcfg.hash_space, false).map_err(cli_err)?;
    let out = training::train(&ds.train, &ds.val, &ds.schema, &tcfg, objective).map_err(|e| cli_err(e.into()))?;
    Ok(PyModel { inner: out.model })
}

/// Trains each named model on the in-memory synthetic world and returns
/// `(model, test_auc, test_logloss)` rows.
#[pyfunction]
#[pyo3(signature = (config=None, models=None))]
fn ablate(config: Option<&PyConfig>, models: Option<Vec<String>>) -> PyResult<Vec<(String, f64, f64)>> {
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    cfg.validate().map_err(value_err)?;
    let kinds = match models {
        Some(names) => names.iter().map(|n| n.parse()).collect::<Result<Vec<ModelKind>, _>>().map_err(cli_err)?,
        None => ModelKind::ALL.to_vec(),
    };
    let ds = Dataset::synthetic(&cfg.world, cfg.train.hash_space).map_err(cli_err)?;
    let rows = run_ablation(&ds, &cfg.train, &kinds).map_err(cli_err)?;
    Ok(rows.iter().map(|r| (r.model.name().to_string(), r.auc, r.logloss)).collect())
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    let set = ScoredSet::new(scores, labels).map_err(value_err)?;
    metrics::auc(&set).map_err(value_err)
}

#[pyfunction]
fn logloss(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    let set = ScoredSet::new(scores, labels).map_err(value_err)?;
    metrics::logloss(&set).map_err(value_err)
}

/// Embedding row of `field=value` in a table of `n` rows.
#[pyfunction]
fn hash_feature(field: &str, value: &str, n: usize) -> PyResult<usize> {
    if n == 0 {
        return Err(PyValueError::new_err("hash space must be at least 1"));
    }
    Ok(deepmcp::features::hash_feature(field, value, n))
}

#[pymodule]
fn deepmcp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PySchema>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(logloss, m)?)?;
    m.add_function(wrap_pyfunction!(hash_feature, m)?)?;
    Ok(())
}
