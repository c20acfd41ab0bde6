//! Python bindings: losses, bias weights, metrics and the file-based
//! pipeline stages.

use std::collections::BTreeSet;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use poolbias::data::RankedList;
use poolbias::experiment::{pipeline, report, sweep, ExperimentConfig, Layout, Workspace};
use poolbias::world::{RelevanceRule, Split, WorldConfig};
use poolbias::{eval, training, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Config(_) | Error::Schema { .. } | Error::Incompatible(_) | Error::Dimension { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn ranked(docs: Vec<String>) -> PyResult<RankedList> {
    let n = docs.len() as f64;
    RankedList::from_scores("q", docs.into_iter().enumerate().map(|(i, d)| (d, n - i as f64))).map_err(to_py)
}

/// Pairwise cross-entropy `log(1 + exp(s_j - s_i))`.
#[pyfunction]
fn pairwise_ce_loss(score_i: f64, score_j: f64) -> f64 {
    training::pairwise_ce_loss(score_i, score_j)
}

/// Weight on the relevance loss from selection scores.
#[pyfunction]
#[pyo3(signature = (s_i, s_j, tau=1.0, clamp=20.0))]
fn bias_weight_wr(s_i: f64, s_j: f64, tau: f64, clamp: f64) -> f64 {
    training::bias_weight_wr(s_i, s_j, tau, clamp).value()
}

/// Weight on the selection loss from relevance scores.
#[pyfunction]
#[pyo3(signature = (r_i, r_j, tau=1.0, clamp=20.0))]
fn bias_weight_ws(r_i: f64, r_j: f64, tau: f64, clamp: f64) -> f64 {
    training::bias_weight_ws(r_i, r_j, tau, clamp).value()
}

/// Reciprocal rank of the first relevant id within the top `k` of `ranking`.
#[pyfunction]
fn reciprocal_rank(ranking: Vec<String>, relevant: BTreeSet<String>, k: usize) -> PyResult<f64> {
    Ok(eval::reciprocal_rank(&ranked(ranking)?, &relevant, k))
}

#[pyfunction]
fn ndcg(ranking: Vec<String>, relevant: BTreeSet<String>, k: usize) -> PyResult<f64> {
    Ok(eval::ndcg(&ranked(ranking)?, &relevant, k))
}

#[pyfunction]
fn recall(ranking: Vec<String>, relevant: BTreeSet<String>, k: usize) -> PyResult<f64> {
    Ok(eval::recall(&ranked(ranking)?, &relevant, k))
}

#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<Option<f64>> {
    if x.len() != y.len() {
        return Err(PyValueError::new_err("x and y differ in length"));
    }
    Ok(eval::spearman(&x, &y))
}

/// Exact two-sided sign test on `(a, b)` pairs.
#[pyfunction]
fn sign_test<'py>(py: Python<'py>, pairs: Vec<(f64, f64)>) -> PyResult<Bound<'py, PyDict>> {
    let t = eval::sign_test(&pairs);
    let d = PyDict::new(py);
    d.set_item("wins", t.wins)?;
    d.set_item("losses", t.losses)?;
    d.set_item("ties", t.ties)?;
    d.set_item("p_value", t.p_value)?;
    Ok(d)
}

/// An in-memory synthetic world.
#[pyclass(frozen)]
struct World {
    inner: poolbias::world::World,
}

#[pymethods]
impl World {
    #[new]
    #[pyo3(signature = (n_docs, n_train, n_dev, n_test, feature_dim, latent_dim, top_m=5, sigma_feat=0.3, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        n_docs: usize,
        n_train: usize,
        n_dev: usize,
        n_test: usize,
        feature_dim: usize,
        latent_dim: usize,
        top_m: usize,
        sigma_feat: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = WorldConfig {
            n_docs,
            n_train,
            n_dev,
            n_test,
            feature_dim,
            latent_dim,
            relevance: RelevanceRule::TopM(top_m),
            sigma_feat,
            seed,
            ..WorldConfig::default()
        };
        Ok(World {
            inner: poolbias::world::generate_world(&cfg).map_err(to_py)?,
        })
    }

    #[getter]
    fn n_docs(&self) -> usize {
        self.inner.corpus.len()
    }

    /// Query ids of `train`, `dev` or `test`.
    fn query_ids(&self, split: &str) -> PyResult<Vec<String>> {
        let split = match split {
            "train" => Split::Train,
            "dev" => Split::Dev,
            "test" => Split::Test,
            other => return Err(PyValueError::new_err(format!("unknown split `{other}`"))),
        };
        Ok(self.inner.split(split).iter().map(|q| q.query_id.clone()).collect())
    }

    fn relevant(&self, query_id: &str) -> PyResult<Vec<String>> {
        self.inner
            .truth
            .relevant(query_id)
            .map(|s| s.iter().cloned().collect())
            .ok_or_else(|| PyValueError::new_err(format!("unknown query `{query_id}`")))
    }

    fn doc_features(&self, doc_id: &str) -> PyResult<Vec<f64>> {
        self.inner
            .document(doc_id)
            .map(|d| d.features.as_slice().to_vec())
            .ok_or_else(|| PyValueError::new_err(format!("unknown document `{doc_id}`")))
    }
}

fn setup(config: PathBuf, out: PathBuf, regime: Option<&str>, seeds: Option<Vec<u64>>) -> PyResult<(ExperimentConfig, Layout)> {
    let text = poolbias::io::read_text(&config).map_err(to_py)?;
    let mut cfg = ExperimentConfig::parse(&text).map_err(to_py)?;
    if let Some(r) = regime {
        cfg = cfg.with_override("train.regime", r).map_err(to_py)?;
    }
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    Ok((cfg, Layout::new(out)))
}

/// Writes the world files; returns positives per query.
#[pyfunction]
fn gen_world(config: PathBuf, out: PathBuf) -> PyResult<Vec<(String, usize)>> {
    let (cfg, layout) = setup(config, out, None, None)?;
    let s = pipeline::gen_world(&cfg, &layout).map_err(to_py)?;
    Ok(s.positives.into_iter().collect())
}

/// Pools and labels; returns the dropped query ids.
#[pyfunction]
fn pool(config: PathBuf, out: PathBuf) -> PyResult<Vec<String>> {
    let (cfg, layout) = setup(config, out, None, None)?;
    Ok(pipeline::pool(&cfg, &layout).map_err(to_py)?.dropped)
}

/// Writes candidate runs; returns `(retriever, split, metric, value)` rows.
#[pyfunction]
fn retrieve(config: PathBuf, out: PathBuf) -> PyResult<Vec<(String, String, String, f64)>> {
    let (cfg, layout) = setup(config, out, None, None)?;
    Ok(pipeline::retrieve(&cfg, &layout).map_err(to_py)?.rows)
}

/// Trains and evaluates every seed; returns `{seed: {metric: value}}`.
#[pyfunction]
#[pyo3(signature = (config, out, regime=None, seeds=None))]
fn train_and_eval<'py>(
    py: Python<'py>,
    config: PathBuf,
    out: PathBuf,
    regime: Option<&str>,
    seeds: Option<Vec<u64>>,
) -> PyResult<Bound<'py, PyDict>> {
    let (cfg, layout) = setup(config, out, regime, seeds)?;
    let ws = Workspace::load(&cfg, &layout).map_err(to_py)?;
    let result = PyDict::new(py);
    for &seed in &cfg.seeds {
        let dir = layout.run_dir(cfg.train.regime, seed);
        pipeline::train_run(&ws, &cfg, seed, &dir, cfg.train.regime.name()).map_err(to_py)?;
        let metrics = PyDict::new(py);
        for r in pipeline::eval_run(&ws, &cfg, &dir).map_err(to_py)? {
            metrics.set_item(format!("{}@{}", r.metric.name(), r.k), r.macro_avg)?;
        }
        result.set_item(seed, metrics)?;
    }
    Ok(result)
}

/// Runs a one-key sweep; returns the aggregated CSV text.
#[pyfunction]
#[pyo3(signature = (config, out, grid, regime=None))]
fn run_sweep(config: PathBuf, out: PathBuf, grid: &str, regime: Option<&str>) -> PyResult<String> {
    let grid = sweep::parse_grid(grid).map_err(to_py)?;
    let (cfg, layout) = setup(config, out, regime, None)?;
    Ok(sweep::sweep(&cfg, &layout, &grid).map_err(to_py)?.csv)
}

/// Formatted regime × metric table for the runs under `runs`.
#[pyfunction]
fn report_table(runs: PathBuf) -> PyResult<String> {
    Ok(report::report(&runs).map_err(to_py)?.to_string())
}

#[pymodule]
#[pyo3(name = "poolbias")]
fn poolbias_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(pairwise_ce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(bias_weight_wr, m)?)?;
    m.add_function(wrap_pyfunction!(bias_weight_ws, m)?)?;
    m.add_function(wrap_pyfunction!(reciprocal_rank, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg, m)?)?;
    m.add_function(wrap_pyfunction!(recall, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(sign_test, m)?)?;
    m.add_function(wrap_pyfunction!(gen_world, m)?)?;
    m.add_function(wrap_pyfunction!(pool, m)?)?;
    m.add_function(wrap_pyfunction!(retrieve, m)?)?;
    m.add_function(wrap_pyfunction!(train_and_eval, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(report_table, m)?)?;
    m.add_class::<World>()?;
    Ok(())
}
