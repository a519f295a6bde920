//! Python bindings: configuration, data generation, training, cost reports
//! and folded/naive scoring.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use srp4ctr::config::{self, Config};
use srp4ctr::costmodel::{self, ServingRequest};
use srp4ctr::datamodel::{self, InteractionEvent, InteractionSequence};
use srp4ctr::finetune::CtrModel;
use srp4ctr::numerics::ParamStore;
use srp4ctr::runtime::{self, Phase};

fn py_err(e: srp4ctr::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

/// Run configuration with the same keys as the command line.
#[pyclass(name = "Config")]
struct PyConfig {
    inner: Config,
}

#[pymethods]
impl PyConfig {
    /// Defaults, with the `key = value` lines of `text` applied.
    #[new]
    #[pyo3(signature = (text = None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => Config::from_text(t).map_err(py_err)?,
            None => Config::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Config::load(&path).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        config::KEYS.iter().map(|k| k.name).collect()
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner.get(key).map_err(py_err)
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(py_err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={}, d_model={})", self.inner.seed, self.inner.encoder.d_model)
    }
}

/// Pre-training sequences plus labelled examples.
#[pyclass(name = "Corpus")]
struct PyCorpus {
    inner: datamodel::Corpus,
}

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    fn load(path: PathBuf, config: &PyConfig) -> PyResult<Self> {
        let inner = datamodel::load_dataset(&path, Some(&config.inner.data.schema())).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        datamodel::save_dataset(&self.inner, &path).map_err(py_err)
    }

    fn digest(&self) -> String {
        datamodel::corpus_digest(&self.inner)
    }

    #[getter]
    fn num_sequences(&self) -> usize {
        self.inner.sequences.len()
    }

    #[getter]
    fn num_examples(&self) -> usize {
        self.inner.examples.len()
    }

    fn positive_rate(&self) -> f64 {
        let pos = self.inner.examples.iter().filter(|e| e.label == 1).count();
        pos as f64 / self.inner.examples.len().max(1) as f64
    }

    /// `(item_features, behavior_features)` per event of sequence `index`.
    fn sequence(&self, index: usize) -> PyResult<Vec<(Vec<u32>, Vec<u32>)>> {
        let s = self
            .inner
            .sequences
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("no sequence {index}")))?;
        Ok(s.events
            .iter()
            .map(|e| (e.item_features.clone(), e.behavior_features.clone()))
            .collect())
    }
}

/// A CTR model, randomly initialised or loaded from a checkpoint.
#[pyclass(name = "CtrModel")]
struct PyCtrModel {
    model: CtrModel,
    store: ParamStore<f32>,
}

#[pymethods]
impl PyCtrModel {
    #[new]
    #[pyo3(signature = (config, checkpoint = None))]
    fn new(config: &PyConfig, checkpoint: Option<PathBuf>) -> PyResult<Self> {
        let (store, model) =
            runtime::load_ctr_model(&config.inner.model(), config.inner.seed, checkpoint.as_deref())
                .map_err(py_err)?;
        Ok(Self { model, store })
    }

    /// Click probabilities for `candidates` given one user history.
    /// Returns `(scores, matmul_flops)`.
    #[pyo3(signature = (sequence, context, candidates, folded = true))]
    fn serve(
        &self,
        sequence: Vec<(Vec<u32>, Vec<u32>)>,
        context: Vec<u32>,
        candidates: Vec<Vec<u32>>,
        folded: bool,
    ) -> PyResult<(Vec<f64>, u64)> {
        let req = ServingRequest {
            sequence: Arc::new(InteractionSequence {
                user_id: 0,
                events: sequence
                    .into_iter()
                    .map(|(i, b)| InteractionEvent::new(i, b))
                    .collect(),
            }),
            context,
            candidates,
        };
        let out = if folded {
            costmodel::serve_folded(&req, &self.model, &self.store)
        } else {
            costmodel::serve_naive(&req, &self.model, &self.store)
        }
        .map_err(py_err)?;
        Ok((out.scores, out.flops.total()))
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.store.num_elements()
    }
}

#[pyfunction]
fn generate_corpus(config: &PyConfig) -> PyResult<PyCorpus> {
    let inner = datamodel::generate_synthetic(&config.inner.data, config.inner.seed).map_err(py_err)?;
    Ok(PyCorpus { inner })
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    runtime::auc(&scores, &labels).map_err(py_err)
}

/// Stage costs plus efficiency/inference FLOPs and their ratio.
#[pyfunction]
fn count_flops<'py>(py: Python<'py>, config: &PyConfig, batch: usize) -> PyResult<Bound<'py, PyDict>> {
    let r = costmodel::count_flops(&config.inner.model(), batch).map_err(py_err)?;
    let d = PyDict::new(py);
    let stages: Vec<(&str, u64, bool)> = r
        .stages
        .iter()
        .map(|s| (s.stage.name(), s.flops, s.foldable))
        .collect();
    d.set_item("stages", stages)?;
    d.set_item("batch", r.batch)?;
    d.set_item("efficiency_flops", r.efficiency_flops)?;
    d.set_item("inference_flops", r.inference_flops)?;
    d.set_item("ratio", r.ratio)?;
    Ok(d)
}

/// Pre-trains with the config's `pretrain.*` settings; writes metrics and
/// checkpoints under `out_dir` when given.
#[pyfunction]
#[pyo3(signature = (config, corpus, out_dir = None))]
fn pretrain<'py>(
    py: Python<'py>,
    config: &PyConfig,
    corpus: &PyCorpus,
    out_dir: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut spec = config.inner.run_spec(Phase::Pretrain);
    spec.run_dir = out_dir;
    let res = runtime::run_pretrain(&spec, &corpus.inner).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("initial_item_loss", res.initial.item_loss)?;
    d.set_item("final_item_loss", res.last.item_loss)?;
    d.set_item("final_behavior_loss", res.last.behavior_loss)?;
    d.set_item("checkpoint", res.checkpoint)?;
    Ok(d)
}

/// Fine-tunes with the config's `finetune.*` settings and reports the best
/// validation AUC.
#[pyfunction]
#[pyo3(signature = (config, corpus, out_dir = None))]
fn finetune<'py>(
    py: Python<'py>,
    config: &PyConfig,
    corpus: &PyCorpus,
    out_dir: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut spec = config.inner.run_spec(Phase::Finetune);
    spec.run_dir = out_dir;
    let res = runtime::run_finetune(&spec, &corpus.inner).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("best_auc", res.best_auc)?;
    d.set_item("best_step", res.best_step)?;
    d.set_item("final_auc", res.final_auc)?;
    d.set_item("checkpoint", res.checkpoint)?;
    Ok(d)
}

/// Runs the command-line interface; returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    srp4ctr::cli::dispatch(std::iter::once("srp4ctr".to_string()).chain(args))
}

#[pymodule]
fn srp4ctr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyCtrModel>()?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(count_flops, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
