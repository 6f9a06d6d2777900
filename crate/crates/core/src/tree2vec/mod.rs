//! Tree-graph embeddings: a two-layer GCN over each user's tree-shaped graph
//! concatenated with a small transformer over DFS token sequences.

mod encoder;
mod gcn;

pub use encoder::{encode_batch, sinusoidal_positions, EncoderConfig, EncoderParams, LayerParams, Positions, TokenVocab};
pub use gcn::{gcn_aggregate, gcn_forward, gcn_normalize, gcn_normalize_sparse};

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, EntityId, EntityKind};
use crate::numerics::{NumericsError, ParamStore, SparseMatrix, Tape, Tensor, Var};
use crate::textembed::DocVectors;
use crate::treegraph::{serialize_tms_dfs, Token, TreeGraph};

#[derive(Debug, Error)]
pub enum TreeVecError {
    #[error("adjacency must be square, got {0}x{1}")]
    NotSquare(usize, usize),
    #[error("negative adjacency entry {value} at ({row},{col})")]
    NegativeAdjacency { row: usize, col: usize, value: f64 },
    #[error("sequence of {tms} has {len} tokens, above the limit of {max}")]
    SequenceTooLong { tms: String, len: usize, max: usize },
    #[error("missing document vector for {0}")]
    MissingFeature(EntityId),
    #[error("ablation removes both the GCN and the sequence encoder")]
    NothingToEncode,
    #[error("{0} has no tree-shaped graph")]
    NoTree(EntityId),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, TreeVecError>;

/// Which way messages travel along tree edges.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flow {
    /// Children aggregate from their parents.
    #[default]
    Down,
    /// Parents aggregate from their children.
    Up,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub no_tree: bool,
    pub no_gcn: bool,
    pub no_unidirectional: bool,
    pub no_bert: bool,
    pub no_fix_position: bool,
}

impl Ablation {
    pub const VARIANTS: [&'static str; 6] = ["full", "no-tree", "no-gcn", "no-unidirectional", "no-bert", "no-fix-position"];

    pub fn from_variant(name: &str) -> Option<Self> {
        let mut a = Self::default();
        match name {
            "full" => {}
            "no-tree" => a.no_tree = true,
            "no-gcn" => a.no_gcn = true,
            "no-unidirectional" => a.no_unidirectional = true,
            "no-bert" => a.no_bert = true,
            "no-fix-position" => a.no_fix_position = true,
            _ => return None,
        }
        Some(a)
    }

    pub fn label(&self) -> &'static str {
        Self::VARIANTS
            .iter()
            .find(|v| Self::from_variant(v).as_ref() == Some(self))
            .copied()
            .unwrap_or("custom")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tree2vecConfig {
    pub gcn_hidden: usize,
    pub gcn_out: usize,
    pub encoder: EncoderConfig,
    pub flow: Flow,
}

impl Default for Tree2vecConfig {
    fn default() -> Self {
        Self {
            gcn_hidden: 64,
            gcn_out: 32,
            encoder: EncoderConfig::default(),
            flow: Flow::Down,
        }
    }
}

impl Tree2vecConfig {
    /// Width of the concatenated tree embedding under `ablation`.
    pub fn output_dim(&self, ablation: &Ablation) -> usize {
        let g = if ablation.no_gcn { 0 } else { self.gcn_out };
        let b = if ablation.no_bert { 0 } else { self.encoder.model_dim };
        g + b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeParams {
    pub gcn_w0: usize,
    pub gcn_w1: usize,
    pub encoder: EncoderParams,
}

impl TreeParams {
    pub fn init<R: Rng>(store: &mut ParamStore, cfg: &Tree2vecConfig, vocab: &TokenVocab, docvecs: &DocVectors, rng: &mut R) -> Self {
        let gcn_w0 = store.add("gcn.w0", Tensor::xavier_uniform(docvecs.dim, cfg.gcn_hidden, rng));
        let gcn_w1 = store.add("gcn.w1", Tensor::xavier_uniform(cfg.gcn_hidden, cfg.gcn_out, rng));
        let encoder = EncoderParams::init(store, &cfg.encoder, vocab, docvecs, rng);
        Self { gcn_w0, gcn_w1, encoder }
    }
}

struct GcnInputs {
    a_hat: Rc<SparseMatrix>,
    /// `A_hat` times the node features; constant across steps.
    a_x0: Tensor,
    user_pool: Rc<SparseMatrix>,
    item_pool: Rc<SparseMatrix>,
}

struct SeqInputs {
    tokens: Rc<Vec<usize>>,
    positions: Positions,
    segments: Rc<Vec<Range<usize>>>,
    user_pool: Rc<SparseMatrix>,
    item_pool: Rc<SparseMatrix>,
}

/// Constant structures for embedding every user's graph in one pass.
pub struct TreeInputs {
    gcn: Option<GcnInputs>,
    seq: Option<SeqInputs>,
    /// Users that own a tree-shaped graph.
    pub user_mask: Vec<bool>,
    /// Items that occur in at least one graph.
    pub item_mask: Vec<bool>,
}

/// Components of the tree embeddings for all users and items.
pub struct TreeParts {
    pub g_user: Option<Var>,
    pub g_item: Option<Var>,
    pub b_user: Option<Var>,
    pub b_item: Option<Var>,
}

impl TreeParts {
    pub fn concat(&self, tape: &mut Tape) -> Result<(Var, Var)> {
        let users: Vec<Var> = [self.g_user, self.b_user].into_iter().flatten().collect();
        let items: Vec<Var> = [self.g_item, self.b_item].into_iter().flatten().collect();
        Ok((tape.concat_cols(&users)?, tape.concat_cols(&items)?))
    }
}

/// Nodes of one graph as seen by the GCN, with `(row, col, w)` entries.
fn gcn_block(tg: &TreeGraph, cfg: &Tree2vecConfig, ablation: &Ablation) -> (Vec<EntityId>, Vec<(usize, usize, f64)>) {
    if ablation.no_tree {
        let nodes: Vec<EntityId> = tg.node_order.iter().filter(|n| n.kind != EntityKind::Category).copied().collect();
        let n = nodes.len();
        let entries = (0..n).flat_map(|r| (0..n).filter(move |&c| c != r).map(move |c| (r, c, 1.0))).collect();
        return (nodes, entries);
    }
    let mut entries = Vec::with_capacity(tg.edges.len() * 2);
    for e in &tg.edges {
        let down = (e.child, e.parent, e.weight);
        let up = (e.parent, e.child, e.weight);
        if ablation.no_unidirectional {
            entries.push(down);
            entries.push(up);
        } else if cfg.flow == Flow::Down {
            entries.push(down);
        } else {
            entries.push(up);
        }
    }
    (tg.node_order.clone(), entries)
}

/// `(label, tokens, levels)` of each sequence fed to the encoder.
type SeqSpec = (String, Vec<Token>, Vec<u8>);

fn sequences(tgs: &[TreeGraph], ablation: &Ablation) -> Vec<SeqSpec> {
    if ablation.no_tree {
        return tgs
            .iter()
            .map(|tg| {
                let tokens: Vec<Token> = tg.node_order.iter().filter(|n| n.kind != EntityKind::Category).map(|n| Token::Node(*n)).collect();
                let levels = vec![0; tokens.len()];
                (EntityId::user(tg.owner).to_string(), tokens, levels)
            })
            .collect();
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for tg in tgs {
        for tms in &tg.tms_list {
            if seen.insert(tms.dish) {
                let s = serialize_tms_dfs(tms);
                out.push((format!("TMS of {}", EntityId::dish(tms.dish)), s.tokens, s.levels));
            }
        }
    }
    out.sort_by(|a, b| match (a.1[0], b.1[0]) {
        (Token::Node(x), Token::Node(y)) => x.index.cmp(&y.index),
        _ => std::cmp::Ordering::Equal,
    });
    out
}

fn mean_pool(rows: usize, cols: usize, members: &BTreeMap<usize, Vec<usize>>) -> Result<SparseMatrix> {
    let mut trip = Vec::new();
    for (&r, list) in members {
        let w = 1.0 / list.len() as f64;
        trip.extend(list.iter().map(|&c| (r, c, w)));
    }
    Ok(SparseMatrix::from_triplets(rows, cols, &trip)?)
}

impl TreeInputs {
    pub fn build(
        n_users: usize,
        n_items: usize,
        tgs: &[TreeGraph],
        docvecs: &DocVectors,
        vocab: &TokenVocab,
        cfg: &Tree2vecConfig,
        ablation: &Ablation,
    ) -> Result<Self> {
        if ablation.no_gcn && ablation.no_bert {
            return Err(TreeVecError::NothingToEncode);
        }
        let mut user_mask = vec![false; n_users];
        let mut item_mask = vec![false; n_items];
        for tg in tgs {
            user_mask[tg.owner] = true;
            for n in &tg.node_order {
                if n.kind == EntityKind::Item {
                    item_mask[n.index] = true;
                }
            }
        }

        let gcn = if ablation.no_gcn {
            None
        } else {
            let mut trip = Vec::new();
            let mut feats: Vec<Vec<f64>> = Vec::new();
            let mut user_trip = Vec::new();
            let mut item_rows: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for tg in tgs {
                let off = feats.len();
                let (nodes, entries) = gcn_block(tg, cfg, ablation);
                let block = gcn_normalize_sparse(nodes.len(), &entries)?;
                for r in 0..block.rows() {
                    trip.extend(block.row_entries(r).map(|(c, w)| (off + r, off + c, w)));
                }
                for (k, id) in nodes.iter().enumerate() {
                    let v = docvecs.get(id).ok_or(TreeVecError::MissingFeature(*id))?;
                    feats.push(v.to_vec());
                    match id.kind {
                        EntityKind::Dish => user_trip.push((tg.owner, off + k, 1.0)),
                        EntityKind::Item => item_rows.entry(id.index).or_default().push(off + k),
                        _ => {}
                    }
                }
            }
            let n = feats.len();
            let a_hat = SparseMatrix::from_triplets(n, n, &trip)?;
            let x0 = if n == 0 { Tensor::zeros(&[0, docvecs.dim]) } else { Tensor::from_rows(&feats)? };
            Some(GcnInputs {
                a_x0: a_hat.matmul(&x0)?,
                a_hat: Rc::new(a_hat),
                user_pool: Rc::new(SparseMatrix::from_triplets(n_users, n, &user_trip)?),
                item_pool: Rc::new(mean_pool(n_items, n, &item_rows)?),
            })
        };

        let seq = if ablation.no_bert {
            None
        } else {
            let specs = sequences(tgs, ablation);
            let mut tokens = Vec::new();
            let mut levels = Vec::new();
            let mut offsets = Vec::new();
            let mut segments = Vec::new();
            let mut dish_pos: BTreeMap<(usize, usize), usize> = BTreeMap::new();
            let mut item_rows: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (seg_idx, (label, toks, lv)) in specs.iter().enumerate() {
                if toks.len() > cfg.encoder.max_len {
                    return Err(TreeVecError::SequenceTooLong { tms: label.clone(), len: toks.len(), max: cfg.encoder.max_len });
                }
                let start = tokens.len();
                for (k, (t, l)) in toks.iter().zip(lv).enumerate() {
                    if let Token::Node(id) = t {
                        match id.kind {
                            EntityKind::Dish => {
                                dish_pos.insert((seg_idx, id.index), start + k);
                            }
                            EntityKind::Item => item_rows.entry(id.index).or_default().push(start + k),
                            _ => {}
                        }
                    }
                    tokens.push(vocab.row(*t));
                    levels.push(*l as usize);
                    offsets.push(k);
                }
                segments.push(start..tokens.len());
            }
            let mut user_trip = Vec::new();
            if ablation.no_tree {
                for (seg_idx, tg) in tgs.iter().enumerate() {
                    for tms in &tg.tms_list {
                        user_trip.push((tg.owner, dish_pos[&(seg_idx, tms.dish)], 1.0));
                    }
                }
            } else {
                let by_dish: BTreeMap<usize, usize> = dish_pos.iter().map(|(&(_, d), &p)| (d, p)).collect();
                for tg in tgs {
                    for tms in &tg.tms_list {
                        user_trip.push((tg.owner, by_dish[&tms.dish], 1.0));
                    }
                }
            }
            let n = tokens.len();
            let positions = if ablation.no_fix_position {
                Positions::Sinusoidal(sinusoidal_positions(&offsets, cfg.encoder.model_dim))
            } else {
                Positions::Levels(Rc::new(levels))
            };
            Some(SeqInputs {
                tokens: Rc::new(tokens),
                positions,
                segments: Rc::new(segments),
                user_pool: Rc::new(SparseMatrix::from_triplets(n_users, n, &user_trip)?),
                item_pool: Rc::new(mean_pool(n_items, n, &item_rows)?),
            })
        };

        Ok(Self { gcn, seq, user_mask, item_mask })
    }

    /// Records the forward pass on `tape`; rows of users or items without a
    /// graph are zero.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, params: &TreeParams) -> Result<TreeParts> {
        let mut parts = TreeParts { g_user: None, g_item: None, b_user: None, b_item: None };
        if let Some(g) = &self.gcn {
            let ax0 = tape.leaf(g.a_x0.clone());
            let w0 = tape.param(store, params.gcn_w0);
            let w1 = tape.param(store, params.gcn_w1);
            let z0 = tape.matmul(ax0, w0)?;
            let h1 = tape.relu(z0);
            let z1 = tape.matmul(h1, w1)?;
            let h2 = tape.spmm(g.a_hat.clone(), z1)?;
            parts.g_user = Some(tape.spmm(g.user_pool.clone(), h2)?);
            parts.g_item = Some(tape.spmm(g.item_pool.clone(), h2)?);
        }
        if let Some(s) = &self.seq {
            let e = encode_batch(tape, store, &params.encoder, s.tokens.clone(), &s.positions, s.segments.clone())?;
            parts.b_user = Some(tape.spmm(s.user_pool.clone(), e)?);
            parts.b_item = Some(tape.spmm(s.item_pool.clone(), e)?);
        }
        Ok(parts)
    }
}

/// Sum of dish-token vectors, and the mean vector of each item over its
/// occurrences, from encoded sequences.
pub fn bert_aggregate(encoded: &[(&[Token], &Tensor)]) -> (Vec<f64>, BTreeMap<usize, Vec<f64>>) {
    let dim = encoded.first().map_or(0, |(_, t)| t.cols());
    let mut user = vec![0.0; dim];
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (tokens, enc) in encoded {
        for (k, t) in tokens.iter().enumerate() {
            if let Token::Node(id) = t {
                match id.kind {
                    EntityKind::Dish => user.iter_mut().zip(enc.row(k)).for_each(|(u, x)| *u += x),
                    EntityKind::Item => {
                        let e = sums.entry(id.index).or_insert_with(|| (vec![0.0; dim], 0));
                        e.0.iter_mut().zip(enc.row(k)).for_each(|(s, x)| *s += x);
                        e.1 += 1;
                    }
                    _ => {}
                }
            }
        }
    }
    let items = sums.into_iter().map(|(i, (s, n))| (i, s.into_iter().map(|x| x / n as f64).collect())).collect();
    (user, items)
}

/// Tree embedding of one user and the items in their graph.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeEmbeddings {
    pub user: Vec<f64>,
    pub items: BTreeMap<usize, Vec<f64>>,
    pub g_user: Option<Vec<f64>>,
    pub b_user: Option<Vec<f64>>,
    pub g_items: BTreeMap<usize, Vec<f64>>,
    pub b_items: BTreeMap<usize, Vec<f64>>,
}

/// Embeds a single user's graph with the current parameters.
#[allow(clippy::too_many_arguments)]
pub fn tree2vec(
    user: usize,
    tg: &TreeGraph,
    ds: &Dataset,
    docvecs: &DocVectors,
    vocab: &TokenVocab,
    store: &ParamStore,
    params: &TreeParams,
    cfg: &Tree2vecConfig,
    ablation: &Ablation,
) -> Result<TreeEmbeddings> {
    if tg.owner != user {
        return Err(TreeVecError::NoTree(EntityId::user(user)));
    }
    let inputs = TreeInputs::build(ds.users.len(), ds.items.len(), std::slice::from_ref(tg), docvecs, vocab, cfg, ablation)?;
    let mut tape = Tape::new();
    let parts = inputs.forward(&mut tape, store, params)?;
    let (u, i) = parts.concat(&mut tape)?;
    let items: Vec<usize> = tg.node_order.iter().filter(|n| n.kind == EntityKind::Item).map(|n| n.index).collect();
    let row = |v: Var, r: usize| tape.value(v).row(r).to_vec();
    let per_item = |v: Option<Var>| -> BTreeMap<usize, Vec<f64>> {
        v.map(|v| items.iter().map(|&it| (it, row(v, it))).collect()).unwrap_or_default()
    };
    Ok(TreeEmbeddings {
        user: row(u, user),
        items: per_item(Some(i)),
        g_user: parts.g_user.map(|v| row(v, user)),
        b_user: parts.b_user.map(|v| row(v, user)),
        g_items: per_item(parts.g_item),
        b_items: per_item(parts.b_item),
    })
}

#[cfg(test)]
mod tests;
