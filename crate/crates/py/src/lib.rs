//! Python bindings for `lranker-core`.

// pyo3 0.22 method wrappers expand to a `PyErr -> PyErr` conversion.
#![allow(clippy::useless_conversion)]

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use lranker_core::aggregator::{aggregate, random_partition, Aggregator};
use lranker_core::clustering::{kmeans_fit, KMeansConfig};
use lranker_core::encoder::{encode_candidates_ref, featurize_text, QueryInput, ReferenceEncoder};
use lranker_core::harness::{self, ExperimentConfig, PlantedLinearConfig, PoolDependentConfig};
use lranker_core::metrics::{ndcg_ids, random_mrr_baseline, reciprocal_rank, RelevanceJudgment};
use lranker_core::scorer;
use lranker_core::trainer::{infonce_loss, load_checkpoint, Model};
use lranker_core::tts::{tts_rank, TtsConfig};
use lranker_core::{read_store, write_store, EmbeddingMatrix, Error, ErrorClass};

create_exception!(lranker, LrankerError, PyException);
create_exception!(lranker, ConfigError, LrankerError);
create_exception!(lranker, DataError, LrankerError);
create_exception!(lranker, NumericError, LrankerError);
create_exception!(lranker, RemoteError, LrankerError);

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.class() {
        ErrorClass::Config => ConfigError::new_err(msg),
        ErrorClass::Data => DataError::new_err(msg),
        ErrorClass::Numeric => NumericError::new_err(msg),
        ErrorClass::Remote => RemoteError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for lranker_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Row-major f32 candidate matrix with optional string ids.
#[pyclass(module = "lranker")]
struct Store {
    inner: EmbeddingMatrix,
}

#[pymethods]
impl Store {
    /// Build a store from a list of equal-length rows.
    #[staticmethod]
    #[pyo3(signature = (rows, ids=None))]
    fn from_rows(rows: Vec<Vec<f64>>, ids: Option<Vec<String>>) -> PyResult<Self> {
        let mut m = EmbeddingMatrix::from_f64_rows(&rows).py()?;
        if let Some(ids) = ids {
            m = m.with_ids(ids).py()?;
        }
        Ok(Self { inner: m })
    }

    /// Open a store file (memory-mapped).
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: read_store(path).py()?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        write_store(&self.inner, path).py()
    }

    #[getter]
    fn count(&self) -> usize {
        self.inner.count()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn ids(&self) -> Option<Vec<String>> {
        self.inner.ids().map(|v| v.to_vec())
    }

    fn row(&self, i: usize) -> PyResult<Vec<f32>> {
        if i >= self.inner.count() {
            return Err(pyo3::exceptions::PyIndexError::new_err(format!(
                "row {i} out of range"
            )));
        }
        Ok(self.inner.row(i).to_vec())
    }

    fn to_list(&self) -> Vec<Vec<f32>> {
        self.inner.rows().map(|r| r.to_vec()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.count()
    }

    fn __repr__(&self) -> String {
        format!(
            "Store(count={}, dim={})",
            self.inner.count(),
            self.inner.dim()
        )
    }
}

/// Mini-batch k-means. Returns a dict with `centroids`, `assignments` and `sizes`.
#[pyfunction]
#[pyo3(signature = (store, k, seed=0, batch_size=1024, max_iters=100))]
fn kmeans<'py>(
    py: Python<'py>,
    store: &Store,
    k: usize,
    seed: u64,
    batch_size: usize,
    max_iters: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = KMeansConfig {
        k,
        seed,
        batch_size,
        max_iters,
        ..KMeansConfig::default()
    };
    let set = kmeans_fit(&store.inner, &cfg).py()?;
    let d = PyDict::new_bound(py);
    let rows: Vec<Vec<f64>> = (0..set.k).map(|j| set.centroid(j).to_vec()).collect();
    d.set_item("centroids", rows)?;
    d.set_item("assignments", set.assignments.clone())?;
    d.set_item("sizes", set.sizes.clone())?;
    Ok(d)
}

/// Seeded partition of `0..n` into `min(m, n)` non-empty subsets.
#[pyfunction]
fn partition(n: usize, m: usize, seed: u64) -> PyResult<Vec<Vec<usize>>> {
    Ok(random_partition(n, m, seed).py()?.subsets)
}

/// Concatenated k-means centroids of a candidate subset, zero-padded to `k * dim`.
#[pyfunction]
#[pyo3(signature = (store, subset, k, seed=0))]
fn aggregate_subset(store: &Store, subset: Vec<usize>, k: usize, seed: u64) -> PyResult<Vec<f64>> {
    let cfg = KMeansConfig {
        seed,
        ..KMeansConfig::new(k)
    };
    aggregate(&subset, &store.inner, &cfg).py()
}

/// Inner product of `query` with every row.
#[pyfunction]
fn score_all(query: Vec<f64>, store: &Store) -> PyResult<Vec<f64>> {
    scorer::score_all(&query, &store.inner).py()
}

/// Mean over `embeddings` of each embedding's scores against every row.
#[pyfunction]
fn ensemble_score(embeddings: Vec<Vec<f64>>, store: &Store) -> PyResult<Vec<f64>> {
    scorer::ensemble_score(&embeddings, &store.inner).py()
}

/// Sort ids by descending score, ties by ascending id.
#[pyfunction]
fn rank(scores: Vec<f64>, ids: Vec<u64>) -> PyResult<(Vec<u64>, Vec<f64>)> {
    let r = scorer::rank("", &scores, &ids).py()?;
    Ok((r.ordered_ids, r.scores))
}

/// InfoNCE loss of one query. Returns `(loss, probabilities)` with the
/// positive first.
#[pyfunction]
#[pyo3(signature = (h_q, h_pos, h_negs, temperature=0.15))]
fn infonce(
    h_q: Vec<f64>,
    h_pos: Vec<f64>,
    h_negs: Vec<Vec<f64>>,
    temperature: f64,
) -> PyResult<(f64, Vec<f64>)> {
    let negs: Vec<&[f64]> = h_negs.iter().map(Vec::as_slice).collect();
    let out = infonce_loss(&h_q, &h_pos, &negs, temperature).py()?;
    Ok((out.loss, out.probs))
}

/// Reciprocal rank of `positive` in `ordered_ids` (0 when absent).
#[pyfunction]
fn mrr(ordered_ids: Vec<u64>, positive: u64) -> f64 {
    reciprocal_rank(&ordered_ids, &RelevanceJudgment::single("", positive))
}

/// Binary-relevance NDCG@k of one ranking.
#[pyfunction]
#[pyo3(signature = (ordered_ids, positives, k=10))]
fn ndcg(ordered_ids: Vec<u64>, positives: Vec<u64>, k: usize) -> f64 {
    let j = RelevanceJudgment {
        query_id: String::new(),
        positive_ids: positives.into_iter().collect(),
        graded: None,
    };
    ndcg_ids(&ordered_ids, &j, k)
}

/// Expected MRR of a uniformly random ranking of `n` candidates.
#[pyfunction]
fn random_baseline(n: usize) -> f64 {
    random_mrr_baseline(n)
}

/// Deterministic hashed bag-of-words features.
#[pyfunction]
fn featurize(text: &str, dim: usize) -> Vec<f64> {
    featurize_text(text, dim).0
}

/// Write a planted-linear store and dataset. Returns the number of queries.
#[pyfunction]
#[pyo3(signature = (store_path, dataset_path, n_candidates=1000, n_queries=250, dim=64, noise=0.3, negatives=100, seed=0))]
#[allow(clippy::too_many_arguments)]
fn gen_planted_linear(
    store_path: PathBuf,
    dataset_path: PathBuf,
    n_candidates: usize,
    n_queries: usize,
    dim: usize,
    noise: f64,
    negatives: usize,
    seed: u64,
) -> PyResult<usize> {
    let (store, records) = harness::gen_planted_linear(&PlantedLinearConfig {
        n_candidates,
        n_queries,
        dim,
        noise,
        negatives,
        seed,
    })
    .py()?;
    write_store(&store, store_path).py()?;
    harness::write_dataset(dataset_path, &records).py()?;
    Ok(records.len())
}

/// Write a pool-dependent store and dataset. Returns the number of queries.
#[pyfunction]
#[pyo3(signature = (store_path, dataset_path, n_candidates=2000, n_queries=500, dim=8, pool_size=50, groups=20, spread=0.5, seed=0))]
#[allow(clippy::too_many_arguments)]
fn gen_pool_dependent(
    store_path: PathBuf,
    dataset_path: PathBuf,
    n_candidates: usize,
    n_queries: usize,
    dim: usize,
    pool_size: usize,
    groups: usize,
    spread: f64,
    seed: u64,
) -> PyResult<usize> {
    let (store, records, _) = harness::gen_pool_dependent(&PoolDependentConfig {
        n_candidates,
        n_queries,
        dim,
        pool_size,
        groups,
        spread,
        seed,
    })
    .py()?;
    write_store(&store, store_path).py()?;
    harness::write_dataset(dataset_path, &records).py()?;
    Ok(records.len())
}

/// Run the full pipeline. `config` is TOML text; `overrides` are
/// `section.key=value` strings. Returns the manifest as a dict plus the test
/// metrics.
#[pyfunction]
#[pyo3(signature = (config=None, overrides=Vec::new()))]
fn run_experiment<'py>(
    py: Python<'py>,
    config: Option<&str>,
    overrides: Vec<String>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = ExperimentConfig::from_toml_str(config.unwrap_or(""), &overrides).py()?;
    let report = py.allow_threads(|| harness::run_experiment(&cfg)).py()?;
    let d = PyDict::new_bound(py);
    d.set_item("output", report.output)?;
    d.set_item("mrr", report.mrr.mean)?;
    d.set_item("mrr_se", report.mrr.se)?;
    d.set_item("ndcg10", report.ndcg10.mean)?;
    d.set_item("best_width", report.best.width)?;
    d.set_item("best_depth", report.best.depth)?;
    d.set_item("config_hash", report.manifest.config_hash)?;
    d.set_item(
        "encoder_calls",
        report
            .manifest
            .encoder_calls
            .into_iter()
            .collect::<Vec<_>>(),
    )?;
    Ok(d)
}

/// Trained model bound to a candidate store, ready to rank queries.
#[pyclass(module = "lranker")]
struct Ranker {
    model: Model,
    kmeans: KMeansConfig,
    store: EmbeddingMatrix,
    candidates: EmbeddingMatrix,
}

#[pymethods]
impl Ranker {
    /// Load a checkpoint directory and a store file.
    #[new]
    fn new(checkpoint: PathBuf, store: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(checkpoint).py()?;
        let store = read_store(store).py()?;
        ck.model.encoder.check_store_dim(store.dim()).py()?;
        let candidates = encode_candidates_ref(&store, &ck.model.encoder)
            .py()?
            .into_owned();
        Ok(Self {
            model: ck.model,
            kmeans: ck.kmeans,
            store,
            candidates,
        })
    }

    #[getter]
    fn base_dim(&self) -> usize {
        self.model.encoder.base_dim
    }

    /// Rank `pool` (default: the whole store) for one query given by
    /// `features` or `text`. Returns `(ids, scores, encoder_calls)`.
    #[pyo3(signature = (features=None, text=None, pool=None, width=0, depth=0, seed=0, query_id="q"))]
    #[allow(clippy::too_many_arguments)]
    fn rank(
        &self,
        py: Python<'_>,
        features: Option<Vec<f64>>,
        text: Option<String>,
        pool: Option<Vec<usize>>,
        width: usize,
        depth: usize,
        seed: u64,
        query_id: &str,
    ) -> PyResult<(Vec<u64>, Vec<f64>, usize)> {
        let query = QueryInput {
            id: query_id.to_string(),
            text,
            features,
        };
        let pool = pool.unwrap_or_else(|| (0..self.store.count()).collect());
        let cfg = TtsConfig {
            width,
            depth,
            seed,
            kmeans: self.kmeans.clone(),
            ..TtsConfig::default()
        };
        let (ranking, trace) = py
            .allow_threads(|| {
                let agg = Aggregator {
                    store: &self.store,
                    kmeans: self.kmeans.clone(),
                    projector: &self.model.projector,
                };
                let enc = ReferenceEncoder::new(&self.model.encoder);
                tts_rank(&query, &pool, &self.candidates, &enc, &agg, &cfg)
            })
            .py()?;
        Ok((ranking.ordered_ids, ranking.scores, trace.encoder_calls))
    }
}

#[pymodule]
pub fn lranker(m: &Bound<'_, PyModule>) -> PyResult<()> {
    lranker_core::init_threads_from_env();
    let py = m.py();
    m.add("LrankerError", py.get_type_bound::<LrankerError>())?;
    m.add("ConfigError", py.get_type_bound::<ConfigError>())?;
    m.add("DataError", py.get_type_bound::<DataError>())?;
    m.add("NumericError", py.get_type_bound::<NumericError>())?;
    m.add("RemoteError", py.get_type_bound::<RemoteError>())?;
    m.add_class::<Store>()?;
    m.add_class::<Ranker>()?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(partition, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_subset, m)?)?;
    m.add_function(wrap_pyfunction!(score_all, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble_score, m)?)?;
    m.add_function(wrap_pyfunction!(rank, m)?)?;
    m.add_function(wrap_pyfunction!(infonce, m)?)?;
    m.add_function(wrap_pyfunction!(mrr, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg, m)?)?;
    m.add_function(wrap_pyfunction!(random_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(featurize, m)?)?;
    m.add_function(wrap_pyfunction!(gen_planted_linear, m)?)?;
    m.add_function(wrap_pyfunction!(gen_pool_dependent, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
