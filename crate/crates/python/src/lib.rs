//! Python bindings: run the pipeline commands, score patch pairs with a
//! trained checkpoint and use the evaluation metrics from Python.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use psn_core::cli::{self, Command};
use psn_core::config::RunConfig;
use psn_core::eval::{self, ScoredPair};
use psn_core::model::similarity_score;
use psn_core::patchpool;
use psn_core::{Checkpoint, Tensor};

fn runtime<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn scored(scores: &[f64], labels: &[bool]) -> PyResult<Vec<ScoredPair>> {
    if scores.len() != labels.len() {
        return Err(PyValueError::new_err(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    Ok(scores
        .iter()
        .zip(labels)
        .map(|(&s, &l)| ScoredPair::new(s, l))
        .collect())
}

/// Runs `generate`, `train`, `eval` or `match` exactly like the `psn`
/// binary. Returns the progress log and the written paths.
#[pyfunction]
#[pyo3(signature = (command, config=None, seed=None, patch_size=None, out=None))]
fn run(
    py: Python<'_>,
    command: &str,
    config: Option<PathBuf>,
    seed: Option<u64>,
    patch_size: Option<usize>,
    out: Option<PathBuf>,
) -> PyResult<(String, Vec<PathBuf>)> {
    let command = match command {
        "generate" => Command::Generate,
        "train" => Command::Train,
        "eval" => Command::Eval,
        "match" => Command::Match,
        other => return Err(PyValueError::new_err(format!("unknown command {other:?}"))),
    };
    let mut cfg = match config {
        Some(p) => RunConfig::load(&p).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(p) = patch_size {
        cfg.patch_size = p;
    }
    if let Some(o) = out {
        cfg.out = o;
    }
    let mut log = Vec::new();
    let written = py
        .detach(|| cli::run(command, &cfg, &mut log))
        .map_err(runtime)?;
    Ok((String::from_utf8_lossy(&log).into_owned(), written))
}

/// Partition sizes of a pool file as `(train, val, test)`.
#[pyfunction]
fn pool_counts(path: PathBuf) -> PyResult<(usize, usize, usize)> {
    let pool = patchpool::read_pool(&path).map_err(runtime)?;
    let [a, b, c] = pool.counts();
    Ok((a, b, c))
}

/// Min-max rescale to [0, 1] followed by mean removal.
#[pyfunction]
fn preprocess(patch: Vec<f64>) -> Vec<f32> {
    patchpool::preprocess(&patch)
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    eval::auc(&scored(&scores, &labels)?).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// `(threshold, tpr, fpr, accuracy)` per threshold; the default grid has
/// 1001 points.
#[pyfunction]
#[pyo3(signature = (scores, labels, thresholds=None))]
fn sweep(
    scores: Vec<f64>,
    labels: Vec<bool>,
    thresholds: Option<Vec<f64>>,
) -> PyResult<Vec<(f64, f64, f64, f64)>> {
    let grid = thresholds.unwrap_or_else(|| eval::threshold_grid(eval::DEFAULT_GRID));
    let rows = eval::sweep(&scored(&scores, &labels)?, &grid)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(rows
        .iter()
        .map(|r| (r.threshold, r.tpr, r.fpr, r.accuracy))
        .collect())
}

/// Share of rows whose diagonal is among the `k` best, ties counted against it.
#[pyfunction]
fn top_k_accuracy(matrix: Vec<Vec<f64>>, k: usize) -> f64 {
    eval::top_k_accuracy(&matrix, k)
}

/// A trained network loaded from a checkpoint file.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    ckpt: Checkpoint,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            ckpt: Checkpoint::load(&path).map_err(runtime)?,
        })
    }

    #[getter]
    fn patch_size(&self) -> usize {
        self.ckpt.model.spec.patch_size
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.ckpt.model.params.param_count()
    }

    /// Similarity scores for SAR/optical patch pairs given as flattened
    /// row-major `patch_size²` lists.
    fn score(&self, py: Python<'_>, sar: Vec<Vec<f32>>, opt: Vec<Vec<f32>>) -> PyResult<Vec<f32>> {
        let d = self.patch_size();
        if sar.len() != opt.len() || sar.is_empty() {
            return Err(PyValueError::new_err(
                "need the same non-zero number of SAR and optical patches",
            ));
        }
        if let Some(bad) = sar.iter().chain(&opt).find(|p| p.len() != d * d) {
            return Err(PyValueError::new_err(format!(
                "patch has {} values, expected {}",
                bad.len(),
                d * d
            )));
        }
        let b = sar.len();
        let stack = |ps: Vec<Vec<f32>>| Tensor::new(&[b, 1, d, d], ps.concat());
        let (s, o) = (stack(sar).map_err(runtime)?, stack(opt).map_err(runtime)?);
        let probs = py
            .detach(|| self.ckpt.model.predict(&s, &o))
            .map_err(runtime)?;
        Ok(similarity_score(&probs))
    }
}

#[pymodule]
fn psn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(pool_counts, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(top_k_accuracy, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
