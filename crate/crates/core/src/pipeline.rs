//! Stage functions shared by the CLI, the experiment runners and the
//! Python bindings.

use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::data::{generate_synthetic, DataError, Dataset, Domain, GenConfig, Interaction};
use crate::eval::{evaluate, popularity_baseline, split_dataset, EvalError, MetricsReport, Split};
use crate::fusion::{train, FusionError, GresModel, ModelInputs, TrainOutcome};
use crate::hetgraph::{build_hg, node2vec_embed, GraphError, HeterogeneousGraph, NodeEmbeddings};
use crate::textembed::{train_doc_embeddings, DocVectors, TextEmbedError};
use crate::tree2vec::{Ablation, TokenVocab};
use crate::treegraph::{build_tg, TreeError, TreeGraph};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Text(#[from] TextEmbedError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error("{0}")]
    Missing(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Generator settings with the master seed in place of the file's seed.
pub fn gen_config(cfg: &RunConfig) -> GenConfig {
    GenConfig { rng_seed: cfg.seed, ..cfg.data.clone() }
}

pub fn generate(cfg: &RunConfig) -> Result<Dataset> {
    Ok(generate_synthetic(&gen_config(cfg))?)
}

/// Everything derived from a dataset before model training.
#[derive(Clone, Debug)]
pub struct Graphs {
    pub split: Split,
    pub docvecs: DocVectors,
    pub hg: HeterogeneousGraph,
    pub nodes: NodeEmbeddings,
    pub tgs: Vec<TreeGraph>,
}

pub fn split(ds: &Dataset, cfg: &RunConfig) -> Result<Split> {
    let purchases: Vec<Interaction> = ds.domain(Domain::A).cloned().collect();
    let s = &cfg.split;
    Ok(split_dataset(&purchases, (s.train, s.val, s.test), cfg.stage_seed("split"))?)
}

pub fn build_tgs(ds: &Dataset) -> Result<Vec<TreeGraph>> {
    Ok(ds.users.iter().filter(|u| u.is_common).map(|u| build_tg(u.id, ds)).collect::<std::result::Result<_, _>>()?)
}

pub fn vocab(ds: &Dataset) -> TokenVocab {
    TokenVocab { n_dishes: ds.dishes.len(), n_categories: ds.categories.len(), n_items: ds.items.len() }
}

/// Split, document vectors, the training-split graph and its node
/// embeddings, and every common user's tree-shaped graph.
pub fn build_graphs(ds: &Dataset, cfg: &RunConfig) -> Result<Graphs> {
    let split = split(ds, cfg)?;
    let (docvecs, _) = train_doc_embeddings(&ds.corpus(), &cfg.docvec, cfg.stage_seed("docvec"))?;
    let hg = build_hg(ds, &split.train, &docvecs, cfg.graph.alpha, cfg.graph.similarity_inversion)?;
    let nodes = node2vec_embed(&hg, &cfg.node2vec, cfg.stage_seed("node2vec"))?;
    if !nodes.untrained.is_empty() {
        log::warn!("{} graph nodes have no edges and keep random vectors", nodes.untrained.len());
    }
    let tgs = build_tgs(ds)?;
    Ok(Graphs { split, docvecs, hg, nodes, tgs })
}

pub fn model_inputs(ds: &Dataset, graphs: &Graphs, cfg: &RunConfig, ablation: &Ablation) -> Result<ModelInputs> {
    Ok(ModelInputs::build(
        ds.users.len(),
        ds.items.len(),
        &graphs.tgs,
        &graphs.docvecs,
        &graphs.nodes,
        &vocab(ds),
        &cfg.model.tree,
        ablation,
    )?)
}

pub fn new_model(ds: &Dataset, graphs: &Graphs, cfg: &RunConfig, ablation: &Ablation) -> GresModel {
    GresModel::new(cfg.model.clone(), *ablation, &vocab(ds), &graphs.docvecs, graphs.nodes.dim, cfg.stage_seed("model"))
}

pub struct Trained {
    pub model: GresModel,
    pub inputs: ModelInputs,
    pub outcome: TrainOutcome,
}

pub fn train_variant(ds: &Dataset, graphs: &Graphs, cfg: &RunConfig, ablation: &Ablation) -> Result<Trained> {
    let inputs = model_inputs(ds, graphs, cfg, ablation)?;
    let mut model = new_model(ds, graphs, cfg, ablation);
    let outcome = train(&mut model, &inputs, &graphs.split, &cfg.train, cfg.stage_seed("train"))?;
    Ok(Trained { model, inputs, outcome })
}

/// Test-split metrics of a trained model.
pub fn evaluate_model(model: &GresModel, inputs: &ModelInputs, split: &Split, cfg: &RunConfig) -> Result<MetricsReport> {
    let mut report = evaluate(&model.scorer(inputs)?, &split.train, &split.test)?;
    report.meta.insert("model".into(), "gres".into());
    report.meta.insert("variant".into(), model.ablation.label().into());
    report.meta.insert("seed".into(), cfg.seed.to_string());
    report.meta.insert("m".into(), cfg.data.unique_user_proportion.to_string());
    Ok(report)
}

pub fn evaluate_popularity(ds: &Dataset, split: &Split, cfg: &RunConfig) -> Result<MetricsReport> {
    let pop = popularity_baseline(&split.train, ds.items.len());
    let mut report = evaluate(&pop, &split.train, &split.test)?;
    report.meta.insert("model".into(), "popularity".into());
    report.meta.insert("seed".into(), cfg.seed.to_string());
    Ok(report)
}
