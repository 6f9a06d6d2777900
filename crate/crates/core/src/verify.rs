//! Self-checks run by `gres verify`: gradients, oracles and invariants.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::eval::{hr_at_k, metrics_from_rank, mrr_at_k, ndcg_at_k, rank_candidates, rank_of, KS};
use crate::fusion::ModelConfig;
use crate::numerics::{grad_check, NumericsError, Tensor};
use crate::pipeline::{self, Result};
use crate::tree2vec::{gcn_normalize, Ablation, EncoderConfig, Tree2vecConfig};
use crate::treegraph::{deserialize_tms, serialize_tms_dfs, tg_adjacency, Tms};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Four common users and one unique user with small model widths.
pub fn micro_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.n_common_users = 4;
    cfg.data.n_unique_users = 1;
    cfg.data.unique_user_proportion = 0.2;
    cfg.data.n_items = 12;
    cfg.data.n_categories = 4;
    cfg.data.n_dishes = 6;
    cfg.data.sparsity_a = 0.3;
    cfg.docvec.dim = 8;
    cfg.docvec.epochs = 5;
    cfg.node2vec.dim = 6;
    cfg.node2vec.walks_per_node = 2;
    cfg.node2vec.walk_length = 10;
    cfg.model = ModelConfig {
        tree: Tree2vecConfig {
            gcn_hidden: 6,
            gcn_out: 4,
            encoder: EncoderConfig { model_dim: 8, heads: 2, layers: 2, ff_dim: 12, max_len: 128 },
            ..Tree2vecConfig::default()
        },
        mlp_hidden: vec![8, 6, 4],
    };
    cfg
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of the full training loss on the micro dataset.
pub fn end_to_end_gradient_error(cfg: &RunConfig, ablation: &Ablation, max_coords: usize) -> Result<f64> {
    let ds = pipeline::generate(cfg)?;
    let graphs = pipeline::build_graphs(&ds, cfg)?;
    let inputs = pipeline::model_inputs(&ds, &graphs, cfg, ablation)?;
    let model = pipeline::new_model(&ds, &graphs, cfg, ablation);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut users, mut items, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for p in &graphs.split.train {
        users.push(p.user);
        items.push(p.target.index);
        labels.push(1.0);
        users.push(p.user);
        items.push(rng.random_range(0..ds.items.len()));
        labels.push(0.0);
    }
    let (users, items, labels) = (Rc::new(users), Rc::new(items), Rc::new(labels));
    let report = grad_check(&model.store, 1e-5, max_coords, cfg.seed, |store| {
        let (loss, grads, _) = model
            .loss_and_grads(store, &inputs, users.clone(), items.clone(), labels.clone())
            .map_err(|e| NumericsError::Invalid { op: "loss", msg: e.to_string() })?;
        Ok((loss, grads))
    })?;
    Ok(report.max_relative_error)
}

fn random_lower(rng: &mut ChaCha8Rng) -> Tensor {
    let n = rng.random_range(1..=10);
    let mut m = Tensor::zeros(&[n, n]);
    for r in 0..n {
        for c in 0..r {
            if rng.random_bool(0.5) {
                m.set(r, c, rng.random_range(0.01..1.0));
            }
        }
    }
    m
}

fn gcn_oracle_error(rng: &mut ChaCha8Rng, trials: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let m = random_lower(rng);
        let a = gcn_normalize(&m).map_err(|e| pipeline::PipelineError::Missing(e.to_string()))?;
        let n = m.rows();
        let deg: Vec<f64> = (0..n).map(|i| 1.0 + m.row(i).iter().sum::<f64>()).collect();
        for i in 0..n {
            for j in 0..n {
                let tilde = m.get(i, j) + if i == j { 1.0 } else { 0.0 };
                worst = worst.max((a.get(i, j) - tilde / (deg[i] * deg[j]).sqrt()).abs());
            }
        }
    }
    Ok(worst)
}

fn metric_oracle_ok(rng: &mut ChaCha8Rng, trials: usize) -> bool {
    (0..trials).all(|_| {
        let n = rng.random_range(2..80);
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 4.0).collect();
        let truth = rng.random_range(0..n);
        let excluded: Vec<bool> = (0..n).map(|i| i != truth && rng.random_bool(0.2)).collect();
        let ranked = rank_candidates(&scores, &excluded);
        let rank = rank_of(&scores, &excluded, truth);
        KS.iter().all(|&k| {
            let m = metrics_from_rank(rank, k);
            m.hr == hr_at_k(&ranked, truth, k) && m.ndcg == ndcg_at_k(&ranked, truth, k) && m.mrr == mrr_at_k(&ranked, truth, k)
        })
    })
}

pub fn random_tms(rng: &mut ChaCha8Rng) -> Tms {
    let cats = rng.random_range(1..=4);
    Tms {
        dish: rng.random_range(0..500),
        children: (0..cats)
            .map(|_| (rng.random_range(0..50), (0..rng.random_range(1..=3)).map(|_| rng.random_range(0..300)).collect()))
            .collect(),
    }
}

/// Runs every self-check with the micro configuration.
pub fn run_checks(seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = RunConfig { seed, ..micro_config() };

    let grad = end_to_end_gradient_error(&cfg, &Ablation::default(), 200);
    out.push(match grad {
        Ok(e) => Check { name: "end-to-end gradient", passed: e < 1e-4, detail: format!("max relative error {e:.2e}") },
        Err(e) => Check { name: "end-to-end gradient", passed: false, detail: e.to_string() },
    });

    out.push(match gcn_oracle_error(&mut rng, 100) {
        Ok(e) => Check { name: "gcn normalization oracle", passed: e <= 1e-12, detail: format!("max abs error {e:.2e}") },
        Err(e) => Check { name: "gcn normalization oracle", passed: false, detail: e.to_string() },
    });

    let ok = metric_oracle_ok(&mut rng, 50);
    out.push(Check { name: "metric oracle", passed: ok, detail: "50 random ranked lists".into() });

    let bad = (0..1000)
        .filter(|_| {
            let t = random_tms(&mut rng);
            deserialize_tms(&serialize_tms_dfs(&t)).ok().as_ref() != Some(&t)
        })
        .count();
    out.push(Check { name: "tms round trip", passed: bad == 0, detail: format!("{bad} of 1000 failed") });

    let tri = pipeline::generate(&cfg).and_then(|ds| pipeline::build_tgs(&ds)).map(|tgs| {
        let bad = tgs
            .iter()
            .filter(|tg| {
                let m = tg_adjacency(tg);
                !(0..m.rows()).all(|r| (r..m.cols()).all(|c| m.get(r, c) == 0.0))
            })
            .count();
        (tgs.len(), bad)
    });
    let (passed, detail) = match tri {
        Ok((n, 0)) => (true, format!("{n} tree-shaped graphs")),
        Ok((n, bad)) => (false, format!("{bad} of {n} tree-shaped graphs have entries on or above the diagonal")),
        Err(e) => (false, e.to_string()),
    };
    out.push(Check { name: "lower-triangular adjacency", passed, detail });
    out
}
