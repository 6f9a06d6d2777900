//! Element-wise gated fusion of graph and tree embeddings, MLP scoring and
//! training.

mod train;

pub use train::{train, EpochRecord, NegativeSampling, TrainConfig, TrainOutcome};

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::EntityId;
use crate::eval::Scorer;
use crate::hetgraph::NodeEmbeddings;
use crate::numerics::{NumericsError, ParamStore, Tape, Tensor, Var};
use crate::textembed::DocVectors;
use crate::tree2vec::{Ablation, Tree2vecConfig, TreeInputs, TreeParams, TreeVecError, TokenVocab};
use crate::treegraph::TreeGraph;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("no embedding at all for {0}")]
    MissingBoth(String),
    #[error("missing graph embedding for {0}")]
    MissingNode(EntityId),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { loss: f64, epoch: usize, batch: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Tree(#[from] TreeVecError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, FusionError>;

/// `w * a + (1 - w) * b`, coordinate-wise.
pub fn combine(v_hat: &[f64], v_tilde: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    if v_hat.len() != v_tilde.len() || v_hat.len() != w.len() {
        return Err(FusionError::DimMismatch(v_hat.len(), v_tilde.len().min(w.len())));
    }
    Ok(v_hat.iter().zip(v_tilde).zip(w).map(|((a, b), g)| g * a + (1.0 - g) * b).collect())
}

/// Gated combination when both embeddings exist, otherwise the graph
/// embedding unchanged.
pub fn combine_partial(v_hat: Option<&[f64]>, v_tilde: Option<&[f64]>, w: &[f64]) -> Result<Vec<f64>> {
    match (v_hat, v_tilde) {
        (Some(a), Some(b)) => combine(a, b, w),
        (Some(a), None) => Ok(a.to_vec()),
        (None, _) => Err(FusionError::MissingBoth("entity without graph embedding".into())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub tree: Tree2vecConfig,
    pub mlp_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            tree: Tree2vecConfig::default(),
            mlp_hidden: vec![128, 64, 32],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateParams {
    pub proj: usize,
    pub proj_b: usize,
    pub gate: usize,
    pub gate_b: usize,
}

impl GateParams {
    fn init(store: &mut ParamStore, side: &str, tree_dim: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            proj: store.add(format!("fuse.{side}.proj"), Tensor::xavier_uniform(tree_dim, dim, rng)),
            proj_b: store.add(format!("fuse.{side}.proj_b"), Tensor::zeros(&[1, dim])),
            gate: store.add(format!("fuse.{side}.gate"), Tensor::xavier_uniform(2 * dim, dim, rng)),
            gate_b: store.add(format!("fuse.{side}.gate_b"), Tensor::zeros(&[1, dim])),
        }
    }

    /// Projects `v_tilde`, computes the gate from both, and mixes rows
    /// where `mask` is set.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, v_hat: Var, v_tilde: Var, mask: Rc<Vec<bool>>) -> Result<(Var, Var)> {
        let proj = tape.param(store, self.proj);
        let proj_b = tape.param(store, self.proj_b);
        let p = tape.matmul(v_tilde, proj)?;
        let p = tape.add_row(p, proj_b)?;
        let both = tape.concat_cols(&[v_hat, p])?;
        let gw = tape.param(store, self.gate);
        let gb = tape.param(store, self.gate_b);
        let pre = tape.matmul(both, gw)?;
        let pre = tape.add_row(pre, gb)?;
        let gate = tape.sigmoid(pre);
        Ok((tape.gate_combine(gate, v_hat, p, mask)?, gate))
    }
}

/// Frozen graph embeddings plus tree inputs for a whole dataset.
pub struct ModelInputs {
    pub tree: TreeInputs,
    pub user_hat: Tensor,
    pub item_hat: Tensor,
}

impl ModelInputs {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        n_users: usize,
        n_items: usize,
        tgs: &[TreeGraph],
        docvecs: &DocVectors,
        nodes: &NodeEmbeddings,
        vocab: &TokenVocab,
        cfg: &Tree2vecConfig,
        ablation: &Ablation,
    ) -> Result<Self> {
        let rows = |ids: Vec<EntityId>| -> Result<Tensor> {
            let rows = ids
                .into_iter()
                .map(|id| nodes.get(&id).map(<[f64]>::to_vec).ok_or(FusionError::MissingNode(id)))
                .collect::<Result<Vec<_>>>()?;
            Ok(Tensor::from_rows(&rows)?)
        };
        Ok(Self {
            tree: TreeInputs::build(n_users, n_items, tgs, docvecs, vocab, cfg, ablation)?,
            user_hat: rows((0..n_users).map(EntityId::user).collect())?,
            item_hat: rows((0..n_items).map(EntityId::item).collect())?,
        })
    }

    pub fn n_users(&self) -> usize {
        self.user_hat.rows()
    }

    pub fn n_items(&self) -> usize {
        self.item_hat.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GresModel {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub store: ParamStore,
    pub tree: TreeParams,
    pub user_gate: GateParams,
    pub item_gate: GateParams,
    /// `(weight, bias)` slots, last layer has one output.
    pub mlp: Vec<(usize, usize)>,
}

/// Fused user and item matrices with the gate values.
pub struct Fused {
    pub users: Var,
    pub items: Var,
    pub user_gate: Var,
    pub item_gate: Var,
}

impl GresModel {
    pub fn new(config: ModelConfig, ablation: Ablation, vocab: &TokenVocab, docvecs: &DocVectors, node_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let tree = TreeParams::init(&mut store, &config.tree, vocab, docvecs, &mut rng);
        let tdim = config.tree.output_dim(&ablation);
        let user_gate = GateParams::init(&mut store, "user", tdim, node_dim, &mut rng);
        let item_gate = GateParams::init(&mut store, "item", tdim, node_dim, &mut rng);
        let mut widths = vec![2 * node_dim];
        widths.extend(&config.mlp_hidden);
        widths.push(1);
        let mlp = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let wi = store.add(format!("mlp.{l}.w"), Tensor::xavier_uniform(w[0], w[1], &mut rng));
                let bi = store.add(format!("mlp.{l}.b"), Tensor::zeros(&[1, w[1]]));
                (wi, bi)
            })
            .collect();
        Self { config, ablation, store, tree, user_gate, item_gate, mlp }
    }

    pub fn fused(&self, tape: &mut Tape, store: &ParamStore, inputs: &ModelInputs) -> Result<Fused> {
        let parts = inputs.tree.forward(tape, store, &self.tree)?;
        let (ut, it) = parts.concat(tape)?;
        let uh = tape.leaf(inputs.user_hat.clone());
        let ih = tape.leaf(inputs.item_hat.clone());
        let (users, user_gate) = self.user_gate.forward(tape, store, uh, ut, Rc::new(inputs.tree.user_mask.clone()))?;
        let (items, item_gate) = self.item_gate.forward(tape, store, ih, it, Rc::new(inputs.tree.item_mask.clone()))?;
        Ok(Fused { users, items, user_gate, item_gate })
    }

    /// MLP logits, one row per `(users[k], items[k])` pair.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, fused: &Fused, users: Rc<Vec<usize>>, items: Rc<Vec<usize>>) -> Result<Var> {
        let u = tape.gather(fused.users, users)?;
        let i = tape.gather(fused.items, items)?;
        let mut x = tape.concat_cols(&[u, i])?;
        for (l, &(w, b)) in self.mlp.iter().enumerate() {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            let z = tape.matmul(x, wv)?;
            x = tape.add_row(z, bv)?;
            if l + 1 < self.mlp.len() {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    /// Mean binary cross-entropy over labelled pairs and its gradients for
    /// every slot of `store`.
    pub fn loss_and_grads(
        &self,
        store: &ParamStore,
        inputs: &ModelInputs,
        users: Rc<Vec<usize>>,
        items: Rc<Vec<usize>>,
        labels: Rc<Vec<f64>>,
    ) -> Result<(f64, Vec<Tensor>, Vec<f64>)> {
        let mut tape = Tape::new();
        let fused = self.fused(&mut tape, store, inputs)?;
        let logits = self.logits(&mut tape, store, &fused, users, items)?;
        let loss = tape.bce_with_logits(logits, labels)?;
        let grads = tape.backward(loss).param_grads(&tape, store);
        Ok((tape.value(loss).data()[0], grads, tape.value(logits).data().to_vec()))
    }

    /// Snapshot of fused embeddings and MLP weights for fast ranking.
    pub fn scorer(&self, inputs: &ModelInputs) -> Result<FusedScorer> {
        let mut tape = Tape::new();
        let fused = self.fused(&mut tape, &self.store, inputs)?;
        let layers: Vec<(Tensor, Tensor)> = self.mlp.iter().map(|&(w, b)| (self.store.value(w).clone(), self.store.value(b).clone())).collect();
        Ok(FusedScorer::new(
            tape.value(fused.users).clone(),
            tape.value(fused.items).clone(),
            layers,
            inputs.tree.user_mask.clone(),
            inputs.tree.item_mask.clone(),
        )?)
    }
}

/// Ranks items by MLP logit over fixed fused embeddings.
pub struct FusedScorer {
    pub users: Tensor,
    pub items: Tensor,
    /// Rows where the gate was applied.
    pub gated_users: Vec<bool>,
    pub gated_items: Vec<bool>,
    user_part: Tensor,
    item_part: Tensor,
    layers: Vec<(Tensor, Tensor)>,
}

impl FusedScorer {
    fn new(users: Tensor, items: Tensor, layers: Vec<(Tensor, Tensor)>, gated_users: Vec<bool>, gated_items: Vec<bool>) -> std::result::Result<Self, NumericsError> {
        let dim = users.cols();
        let w0 = &layers[0].0;
        let top = Tensor::from_rows(&(0..dim).map(|r| w0.row(r).to_vec()).collect::<Vec<_>>())?;
        let bottom = Tensor::from_rows(&(dim..2 * dim).map(|r| w0.row(r).to_vec()).collect::<Vec<_>>())?;
        let mut item_part = items.matmul(&bottom)?;
        let b0 = layers[0].1.row(0).to_vec();
        for r in 0..item_part.rows() {
            item_part.row_mut(r).iter_mut().zip(&b0).for_each(|(x, b)| *x += b);
        }
        Ok(Self { user_part: users.matmul(&top)?, item_part, users, items, gated_users, gated_items, layers })
    }

    /// Predicted purchase probability.
    pub fn score(&self, user: usize, item: usize) -> f64 {
        let mut out = vec![0.0; self.items.rows()];
        self.score_user(user, &mut out);
        1.0 / (1.0 + (-out[item]).exp())
    }
}

impl Scorer for FusedScorer {
    fn n_items(&self) -> usize {
        self.items.rows()
    }

    fn score_user(&self, user: usize, out: &mut [f64]) {
        let u = self.user_part.row(user);
        let last = self.layers.len() - 1;
        let mut h = self.item_part.clone();
        for r in 0..h.rows() {
            h.row_mut(r).iter_mut().zip(u).for_each(|(x, a)| *x = if last > 0 { (*x + a).max(0.0) } else { *x + a });
        }
        for (l, (w, b)) in self.layers.iter().enumerate().skip(1) {
            h = h.matmul(w).expect("layer widths fixed at construction");
            let b = b.row(0);
            for r in 0..h.rows() {
                for (x, bb) in h.row_mut(r).iter_mut().zip(b) {
                    *x += bb;
                    if l < last {
                        *x = x.max(0.0);
                    }
                }
            }
        }
        out.copy_from_slice(h.data());
    }
}
