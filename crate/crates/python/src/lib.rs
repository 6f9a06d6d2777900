//! Python bindings for the `gres` recommender.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use gres::config::RunConfig;
use gres::data::{load_dataset, save_dataset, validate, Dataset};
use gres::eval::{MetricsReport, Scorer};
use gres::fusion::FusedScorer;
use gres::numerics::Tensor;
use gres::pipeline::{self, Graphs};
use gres::tree2vec::{gcn_normalize, Ablation};
use gres::treegraph::{deserialize_tms, serialize_tms_dfs, tg_adjacency, Tms, Token, TokenSequence};
use gres::verify::run_checks;

type TmsParts = (usize, Vec<(usize, Vec<usize>)>);

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn report_dict(r: &MetricsReport) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for (k, m) in &r.per_k {
        out.insert(format!("HR@{k}"), m.hr);
        out.insert(format!("NDCG@{k}"), m.ndcg);
        out.insert(format!("MRR@{k}"), m.mrr);
    }
    out
}

/// Run configuration. Defaults reproduce the standard experiment.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = None, seed = None))]
    fn new(toml: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut inner = match toml {
            Some(t) => RunConfig::from_toml(t).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            inner.seed = s;
        }
        inner.validate().map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    /// Small configuration that trains in well under a second.
    #[staticmethod]
    fn micro(seed: u64) -> Self {
        let mut inner = gres::verify::micro_config();
        inner.seed = seed;
        Self { inner }
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }
}

/// A generated or loaded two-domain dataset.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn generate(config: &PyConfig) -> PyResult<Self> {
        Ok(Self { inner: pipeline::generate(&config.inner).map_err(err)? })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_dataset(&dir).map_err(err)? })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        save_dataset(&self.inner, &dir).map_err(err)
    }

    #[getter]
    fn n_users(&self) -> usize {
        self.inner.users.len()
    }

    #[getter]
    fn n_common_users(&self) -> usize {
        self.inner.n_common_users()
    }

    #[getter]
    fn n_items(&self) -> usize {
        self.inner.items.len()
    }

    #[getter]
    fn n_dishes(&self) -> usize {
        self.inner.dishes.len()
    }

    /// `(domain, user, target, count)` tuples, e.g. `("A", 3, "item:17", 2)`.
    fn interactions(&self) -> Vec<(String, usize, String, u32)> {
        self.inner
            .interactions
            .iter()
            .map(|i| (format!("{:?}", i.domain), i.user, i.target.to_string(), i.count))
            .collect()
    }

    /// Problems found by the dataset invariants; empty when valid.
    fn violations(&self) -> Vec<String> {
        validate(&self.inner).violations.iter().map(|v| v.to_string()).collect()
    }

    /// Parent-to-child weights of a common user's tree-shaped graph as a
    /// dense lower-triangular matrix, with node labels.
    fn tree_graph(&self, user: usize) -> PyResult<(Vec<String>, Vec<Vec<f64>>)> {
        let tg = gres::treegraph::build_tg(user, &self.inner).map_err(err)?;
        let m = tg_adjacency(&tg);
        let labels = tg.node_order.iter().map(|id| id.to_string()).collect();
        Ok((labels, (0..m.rows()).map(|r| m.row(r).to_vec()).collect()))
    }
}

/// A model trained end to end on one dataset.
#[pyclass(name = "Experiment", unsendable)]
struct PyExperiment {
    config: RunConfig,
    dataset: Dataset,
    graphs: Graphs,
    scorer: FusedScorer,
    model_report: MetricsReport,
    popularity_report: MetricsReport,
    epochs: usize,
}

#[pymethods]
impl PyExperiment {
    /// Builds graphs, trains `variant` and evaluates it on the test split.
    #[new]
    #[pyo3(signature = (dataset, config, variant = "full"))]
    fn new(dataset: &PyDataset, config: &PyConfig, variant: &str) -> PyResult<Self> {
        let ablation = Ablation::from_variant(variant)
            .ok_or_else(|| PyValueError::new_err(format!("unknown variant {variant:?}; expected one of {}", Ablation::VARIANTS.join(", "))))?;
        let cfg = config.inner.clone();
        let ds = dataset.inner.clone();
        let graphs = pipeline::build_graphs(&ds, &cfg).map_err(err)?;
        let trained = pipeline::train_variant(&ds, &graphs, &cfg, &ablation).map_err(err)?;
        let model_report = pipeline::evaluate_model(&trained.model, &trained.inputs, &graphs.split, &cfg).map_err(err)?;
        let popularity_report = pipeline::evaluate_popularity(&ds, &graphs.split, &cfg).map_err(err)?;
        let scorer = trained.model.scorer(&trained.inputs).map_err(err)?;
        Ok(Self { config: cfg, dataset: ds, graphs, scorer, model_report, popularity_report, epochs: trained.outcome.history.len() })
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.epochs
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.config.seed
    }

    /// Test-split HR, NDCG and MRR keyed like `"HR@10"`.
    fn metrics(&self) -> BTreeMap<String, f64> {
        report_dict(&self.model_report)
    }

    fn popularity_metrics(&self) -> BTreeMap<String, f64> {
        report_dict(&self.popularity_report)
    }

    /// Predicted purchase probability.
    fn score(&self, user: usize, item: usize) -> PyResult<f64> {
        if user >= self.dataset.users.len() || item >= self.dataset.items.len() {
            return Err(PyValueError::new_err(format!("user {user} or item {item} out of range")));
        }
        Ok(self.scorer.score(user, item))
    }

    /// Top `k` items for `user`, skipping training purchases.
    #[pyo3(signature = (user, k = 10))]
    fn recommend(&self, user: usize, k: usize) -> PyResult<Vec<usize>> {
        if user >= self.dataset.users.len() {
            return Err(PyValueError::new_err(format!("user {user} out of range")));
        }
        let mut scores = vec![0.0; self.scorer.n_items()];
        self.scorer.score_user(user, &mut scores);
        let mut seen = vec![false; scores.len()];
        for i in self.graphs.split.train.iter().filter(|i| i.user == user) {
            seen[i.target.index] = true;
        }
        Ok(gres::eval::rank_candidates(&scores, &seen).into_iter().take(k).collect())
    }
}

/// Symmetric-degree normalization of a square non-negative matrix with
/// self-loops added.
#[pyfunction]
fn normalize_adjacency(matrix: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let t = Tensor::from_rows(&matrix).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let a = gcn_normalize(&t).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((0..a.rows()).map(|r| a.row(r).to_vec()).collect())
}

/// Token sequence of a recipe tree given as `(category, [items])` pairs.
#[pyfunction]
fn serialize_tms(dish: usize, children: Vec<(usize, Vec<usize>)>) -> Vec<String> {
    serialize_tms_dfs(&Tms { dish, children }).tokens.iter().map(|t| t.to_string()).collect()
}

#[pyfunction]
fn deserialize_tms_tokens(tokens: Vec<String>) -> PyResult<TmsParts> {
    let tokens: Vec<Token> = tokens
        .iter()
        .map(|t| t.parse::<Token>())
        .collect::<Result<_, _>>()
        .map_err(PyValueError::new_err)?;
    let levels = tokens.iter().map(Token::level).collect();
    let tms = deserialize_tms(&TokenSequence { tokens, levels }).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((tms.dish, tms.children))
}

/// Runs the built-in self-checks; returns `(name, passed, detail)` rows.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn self_check(seed: u64) -> Vec<(String, bool, String)> {
    run_checks(seed).into_iter().map(|c| (c.name.to_string(), c.passed, c.detail)).collect()
}

#[pymodule]
fn gres_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(normalize_adjacency, m)?)?;
    m.add_function(wrap_pyfunction!(serialize_tms, m)?)?;
    m.add_function(wrap_pyfunction!(deserialize_tms_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(self_check, m)?)?;
    m.add("VARIANTS", Ablation::VARIANTS.to_vec())?;
    Ok(())
}
