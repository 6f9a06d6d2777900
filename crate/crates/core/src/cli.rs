//! `gres` command line: one subcommand per pipeline stage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::{load_dataset, save_dataset, validate, Dataset, DATASET_FILES};
use crate::eval::{run_ablation, run_m_sweep, sweep_csv, MetricsReport, Split};
use crate::hetgraph::{build_hg, NodeEmbeddings};
use crate::numerics::{load_named, save_named, ParamStore};
use crate::pipeline::{self, Graphs, PipelineError, Result};
use crate::textembed::DocVectors;
use crate::tree2vec::Ablation;
use crate::treegraph::write_sequences_jsonl;
use crate::verify::run_checks;

#[derive(Debug, Parser)]
#[command(name = "gres", version, about = "Cross-domain recommendation with recipe trees")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration; defaults reproduce the standard experiment.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "gres-out")]
    pub out: PathBuf,
    /// Model variant: full, no-tree, no-gcn, no-unidirectional, no-bert, no-fix-position.
    #[arg(long, global = true)]
    pub variant: Option<String>,
    /// Proportion of unique users; regenerates the user counts.
    #[arg(long, global = true)]
    pub m: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic two-domain dataset.
    GenData,
    /// Split purchases, embed documents, build and embed the graphs.
    BuildGraphs,
    /// Train the model on the training split.
    Train,
    /// Evaluate the trained model and the popularity baseline on the test split.
    Evaluate,
    /// Train and evaluate the full model and all five ablations.
    Ablate,
    /// Train and evaluate across unique-user proportions.
    MSweep,
    /// Run gradient, oracle and invariant self-checks.
    Verify,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub info: BTreeMap<String, String>,
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn hashes(root: &Path, files: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    files
        .iter()
        .map(|f| {
            let rel = f.strip_prefix(root).unwrap_or(f).to_string_lossy().replace('\\', "/");
            Ok((rel, file_hash(f)?))
        })
        .collect()
}

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    fn manifest_path(&self, stage: &str) -> PathBuf {
        self.dir(stage).join("manifest.json")
    }

    fn require(&self, stage: &str, command: &str) -> Result<Manifest> {
        let p = self.manifest_path(stage);
        if !p.exists() {
            return Err(PipelineError::Missing(format!("missing {}: run {command} first", p.display())));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?)
    }

    fn outputs_of(&self, stage: &str) -> Result<Vec<PathBuf>> {
        let m = self.require(stage, stage)?;
        Ok(m.outputs.keys().map(|k| self.root.join(k)).collect())
    }

    fn write_manifest(&self, stage: &str, cfg: &RunConfig, inputs: &[PathBuf], outputs: &[PathBuf], info: BTreeMap<String, String>) -> Result<()> {
        let m = Manifest {
            stage: stage.into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            inputs: hashes(&self.root, inputs)?,
            outputs: hashes(&self.root, outputs)?,
            info,
        };
        std::fs::write(self.manifest_path(stage), serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(())
    }
}

/// Config file plus command-line overrides.
pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = cli.m {
        cfg.data = cfg.data.clone().with_unique_proportion(m);
    }
    if let Some(v) = &cli.variant {
        cfg.ablation = Ablation::from_variant(v)
            .ok_or_else(|| PipelineError::Missing(format!("unknown variant {v:?}; expected one of {}", Ablation::VARIANTS.join(", "))))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<PathBuf> {
    std::fs::write(path, text)?;
    Ok(path.to_path_buf())
}

fn save_vectors(path: &Path, dim: usize, map: &BTreeMap<crate::data::EntityId, Vec<f64>>) -> Result<PathBuf> {
    save_named(path, &DocVectors { dim, map: map.clone() }.to_named())?;
    Ok(path.to_path_buf())
}

fn load_vectors(path: &Path) -> Result<DocVectors> {
    Ok(DocVectors::from_named(load_named(path)?)?)
}

fn load_data(layout: &Layout) -> Result<Dataset> {
    layout.require("data", "gen-data")?;
    Ok(load_dataset(&layout.dir("data"))?)
}

fn load_graphs(layout: &Layout, ds: &Dataset, cfg: &RunConfig) -> Result<Graphs> {
    let dir = layout.dir("graphs");
    let split: Split = serde_json::from_str(&std::fs::read_to_string(dir.join("split.json"))?)?;
    let docvecs = load_vectors(&dir.join("docvecs.bin"))?;
    let nv = load_vectors(&dir.join("node2vec.bin"))?;
    let hg = build_hg(ds, &split.train, &docvecs, cfg.graph.alpha, cfg.graph.similarity_inversion)?;
    let nodes = NodeEmbeddings { dim: nv.dim, map: nv.map, untrained: hg.isolated_nodes() };
    Ok(Graphs { split, docvecs, hg, nodes, tgs: pipeline::build_tgs(ds)? })
}

fn gen_data(layout: &Layout, cfg: &RunConfig) -> Result<()> {
    let ds = pipeline::generate(cfg)?;
    let dir = layout.dir("data");
    save_dataset(&ds, &dir)?;
    let outputs: Vec<PathBuf> = DATASET_FILES.iter().map(|f| dir.join(f)).collect();
    let mut info = BTreeMap::new();
    info.insert("users".into(), ds.users.len().to_string());
    info.insert("interactions".into(), ds.interactions.len().to_string());
    layout.write_manifest("data", cfg, &[], &outputs, info)?;
    println!("wrote {} users, {} items, {} interactions to {}", ds.users.len(), ds.items.len(), ds.interactions.len(), dir.display());
    Ok(())
}

fn build_graphs(layout: &Layout, cfg: &RunConfig) -> Result<()> {
    let ds = load_data(layout)?;
    let g = pipeline::build_graphs(&ds, cfg)?;
    let dir = layout.dir("graphs");
    std::fs::create_dir_all(dir.join("tg"))?;
    let mut outputs = vec![
        write(&dir.join("split.json"), &serde_json::to_string(&g.split)?)?,
        save_vectors(&dir.join("docvecs.bin"), g.docvecs.dim, &g.docvecs.map)?,
        save_vectors(&dir.join("node2vec.bin"), g.nodes.dim, &g.nodes.map)?,
    ];
    let hg_path = dir.join("hg_edges.csv");
    g.hg.write_csv(&hg_path)?;
    outputs.push(hg_path);
    for tg in &g.tgs {
        let p = dir.join("tg").join(format!("user_{}.csv", tg.owner));
        tg.write_csv(&p)?;
        outputs.push(p);
    }
    let seq = dir.join("sequences.jsonl");
    write_sequences_jsonl(&g.tgs, &seq)?;
    outputs.push(seq);
    let mut info = BTreeMap::new();
    for (t, n) in g.hg.count_by_type() {
        info.insert(format!("edges.{t}"), n.to_string());
    }
    info.insert("isolated_nodes".into(), g.nodes.untrained.len().to_string());
    layout.write_manifest("graphs", cfg, &layout.outputs_of("data")?, &outputs, info)?;
    println!("graph: {} nodes, {} edges; {} tree-shaped graphs", g.hg.nodes.len(), g.hg.edges.len(), g.tgs.len());
    Ok(())
}

fn train_cmd(layout: &Layout, cfg: &RunConfig) -> Result<()> {
    layout.require("graphs", "build-graphs")?;
    let ds = load_data(layout)?;
    let graphs = load_graphs(layout, &ds, cfg)?;
    let t = pipeline::train_variant(&ds, &graphs, cfg, &cfg.ablation)?;
    let dir = layout.dir("model");
    std::fs::create_dir_all(&dir)?;
    let params = dir.join("params.bin");
    t.model.store.save(&params)?;
    let outputs = vec![
        params,
        write(&dir.join("history.csv"), &t.outcome.history_csv())?,
        write(&dir.join("config.toml"), &cfg.to_toml()?)?,
    ];
    let mut info = BTreeMap::new();
    info.insert("variant".into(), cfg.ablation.label().into());
    info.insert("best_epoch".into(), t.outcome.best_epoch.to_string());
    info.insert("epochs".into(), t.outcome.history.len().to_string());
    let mut inputs = layout.outputs_of("data")?;
    inputs.extend(layout.outputs_of("graphs")?);
    layout.write_manifest("model", cfg, &inputs, &outputs, info)?;
    println!("trained {} for {} epochs (best {})", cfg.ablation.label(), t.outcome.history.len(), t.outcome.best_epoch);
    Ok(())
}

fn evaluate_cmd(layout: &Layout) -> Result<()> {
    layout.require("model", "train")?;
    let cfg = RunConfig::load(&layout.dir("model").join("config.toml"))?;
    let ds = load_data(layout)?;
    let graphs = load_graphs(layout, &ds, &cfg)?;
    let inputs = pipeline::model_inputs(&ds, &graphs, &cfg, &cfg.ablation)?;
    let mut model = pipeline::new_model(&ds, &graphs, &cfg, &cfg.ablation);
    let stored = ParamStore::load(&layout.dir("model").join("params.bin"))?;
    let same_layout = stored.len() == model.store.len()
        && (0..stored.len()).all(|i| stored.name(i) == model.store.name(i) && stored.value(i).shape() == model.store.value(i).shape());
    if !same_layout {
        return Err(PipelineError::Missing("model/params.bin does not match model/config.toml; run train again".into()));
    }
    model.store = stored;
    let report = pipeline::evaluate_model(&model, &inputs, &graphs.split, &cfg)?;
    let pop = pipeline::evaluate_popularity(&ds, &graphs.split, &cfg)?;
    let dir = layout.dir("reports");
    std::fs::create_dir_all(&dir)?;
    let outputs = vec![
        write(&dir.join("metrics.json"), &report_json(&report)?)?,
        write(&dir.join("metrics.csv"), &report.to_csv())?,
        write(&dir.join("popularity.json"), &report_json(&pop)?)?,
    ];
    let mut inputs = layout.outputs_of("model")?;
    inputs.extend(layout.outputs_of("graphs")?);
    layout.write_manifest("reports", &cfg, &inputs, &outputs, BTreeMap::new())?;
    println!("{} on {} test interactions", cfg.ablation.label(), report.n_interactions);
    print!("{}", report.pretty());
    println!("popularity baseline");
    print!("{}", pop.pretty());
    Ok(())
}

fn report_json(r: &MetricsReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(r)? + "\n")
}

fn ablate_cmd(layout: &Layout, cfg: &RunConfig) -> Result<()> {
    let variants: Vec<Ablation> = Ablation::VARIANTS.iter().map(|v| Ablation::from_variant(v).expect("known variant")).collect();
    let seeds: Vec<u64> = (0..cfg.experiments.ablation_seeds.max(1) as u64).map(|k| cfg.seed + k).collect();
    let result = run_ablation(cfg, &variants, &seeds)?;
    let dir = layout.dir("ablation");
    std::fs::create_dir_all(&dir)?;
    let table = result.table_pretty();
    let outputs = vec![
        write(&dir.join("table.csv"), &result.table_csv())?,
        write(&dir.join("table.txt"), &table)?,
        write(&dir.join("runs.json"), &serde_json::to_string_pretty(&result)?)?,
    ];
    layout.write_manifest("ablation", cfg, &[], &outputs, BTreeMap::new())?;
    print!("{table}");
    println!("popularity HR@10 {:.4}", result.popularity_mean().get(10).hr);
    Ok(())
}

fn sweep_cmd(layout: &Layout, cfg: &RunConfig, only: Option<f64>) -> Result<()> {
    let ms = match only {
        Some(m) => vec![m],
        None => cfg.experiments.m_values.clone(),
    };
    let rows = run_m_sweep(cfg, &ms)?;
    let dir = layout.dir("m_sweep");
    std::fs::create_dir_all(&dir)?;
    let csv = sweep_csv(&rows);
    let outputs = vec![write(&dir.join("m_sweep.csv"), &csv)?];
    layout.write_manifest("m_sweep", cfg, &[], &outputs, BTreeMap::new())?;
    print!("{csv}");
    Ok(())
}

fn verify_cmd(layout: &Layout, cfg: &RunConfig) -> Result<bool> {
    let mut ok = true;
    for c in run_checks(cfg.seed) {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        ok &= c.passed;
    }
    if layout.manifest_path("data").exists() {
        let report = load_dataset(&layout.dir("data")).map(|ds| validate(&ds));
        let passed = matches!(&report, Ok(r) if r.is_valid());
        println!("{} stored dataset: {}", if passed { "PASS" } else { "FAIL" }, report.map(|r| r.to_string()).unwrap_or_else(|e| e.to_string()));
        ok &= passed;
    }
    let metrics = layout.dir("reports").join("metrics.json");
    if metrics.exists() {
        let r: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&metrics)?)?;
        let res = r.check_invariants();
        println!("{} stored metric report: {}", if res.is_ok() { "PASS" } else { "FAIL" }, res.as_ref().map(|_| "invariants hold".to_string()).unwrap_or_else(|e| e.to_string()));
        ok &= res.is_ok();
    }
    Ok(ok)
}

/// Runs one command; `Ok(false)` means a verification failure.
pub fn run(cli: &Cli) -> Result<bool> {
    let layout = Layout { root: cli.out.clone() };
    std::fs::create_dir_all(&layout.root)?;
    if matches!(cli.command, Command::Evaluate) {
        evaluate_cmd(&layout)?;
        return Ok(true);
    }
    let cfg = effective_config(cli)?;
    for stage in ["data", "graphs"] {
        let (dir, manifest) = (layout.dir(stage), layout.manifest_path(stage));
        if manifest.exists() && matches!(cli.command, Command::Train) {
            let m: Manifest = serde_json::from_str(&std::fs::read_to_string(manifest)?)?;
            if m.config_hash != cfg.hash() && stage == "graphs" && m.seed != cfg.seed {
                log::warn!("{} was built with seed {}, current seed is {}", dir.display(), m.seed, cfg.seed);
            }
        }
    }
    match cli.command {
        Command::GenData => gen_data(&layout, &cfg)?,
        Command::BuildGraphs => build_graphs(&layout, &cfg)?,
        Command::Train => train_cmd(&layout, &cfg)?,
        Command::Evaluate => unreachable!(),
        Command::Ablate => ablate_cmd(&layout, &cfg)?,
        Command::MSweep => sweep_cmd(&layout, &cfg, cli.m)?,
        Command::Verify => return verify_cmd(&layout, &cfg),
    }
    Ok(true)
}
