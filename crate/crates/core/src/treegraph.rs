//! Per-user tree-shaped graphs over sold dishes and their recipes.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, EntityId, EntityKind};
use crate::numerics::Tensor;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("no TG for unique user: {0}")]
    UniqueUser(EntityId),
    #[error("{0} sells no dish")]
    NoDishes(EntityId),
    #[error("unknown {0}")]
    UnknownEntity(EntityId),
    #[error("malformed token sequence at position {pos}: {msg}")]
    Malformed { pos: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Dish with its categories and their items, in recipe order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tms {
    pub dish: usize,
    pub children: Vec<(usize, Vec<usize>)>,
}

impl Tms {
    pub fn num_nodes(&self) -> usize {
        1 + self.children.iter().map(|(_, items)| 1 + items.len()).sum::<usize>()
    }
}

fn level_key(id: EntityId) -> (u8, usize) {
    (Token::Node(id).level(), id.index)
}

/// Parent-to-child edge between positions in `node_order`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TgEdge {
    pub parent: usize,
    pub child: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeGraph {
    pub owner: usize,
    pub tms_list: Vec<Tms>,
    /// Dishes, then categories, then items, each ascending by id.
    pub node_order: Vec<EntityId>,
    pub edges: Vec<TgEdge>,
}

impl TreeGraph {
    pub fn position(&self, id: EntityId) -> Option<usize> {
        self.node_order.binary_search_by_key(&level_key(id), |n| level_key(*n)).ok()
    }

    pub fn num_nodes(&self) -> usize {
        self.node_order.len()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TreeError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "parent,child,weight")?;
        for e in &self.edges {
            writeln!(w, "{},{},{}", self.node_order[e.parent], self.node_order[e.child], e.weight)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Builds the TG of a common user from their domain-B sales.
///
/// Dish-to-category edges carry the dish's sales count over the user's
/// largest dish count. Category-to-item edges carry the summed sales of the
/// user's dishes that use the item under that category, over the largest
/// such sum within the category.
pub fn build_tg(user: usize, ds: &Dataset) -> Result<TreeGraph, TreeError> {
    let owner = EntityId::user(user);
    let u = ds.users.get(user).ok_or(TreeError::UnknownEntity(owner))?;
    if !u.is_common {
        return Err(TreeError::UniqueUser(owner));
    }
    let sold = ds.sold_dishes(user);
    if sold.is_empty() {
        return Err(TreeError::NoDishes(owner));
    }
    let max_dish = sold.iter().map(|x| x.1).max().unwrap_or(1) as f64;

    let mut tms_list = Vec::with_capacity(sold.len());
    let mut dish_cat: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut cat_item: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for &(dish, count) in &sold {
        let d = ds.dishes.get(dish).ok_or(TreeError::UnknownEntity(EntityId::dish(dish)))?;
        let tms = Tms {
            dish,
            children: d.recipe.iter().map(|c| (c.category, c.items.clone())).collect(),
        };
        for (cat, items) in &tms.children {
            dish_cat.insert((dish, *cat), count as f64 / max_dish);
            for &it in items {
                *cat_item.entry((*cat, it)).or_insert(0.0) += count as f64;
            }
        }
        tms_list.push(tms);
    }
    let mut cat_max: BTreeMap<usize, f64> = BTreeMap::new();
    for (&(c, _), &v) in &cat_item {
        let m = cat_max.entry(c).or_insert(0.0);
        *m = m.max(v);
    }

    let mut node_order: Vec<EntityId> = Vec::new();
    node_order.extend(sold.iter().map(|x| EntityId::dish(x.0)));
    node_order.extend(cat_max.keys().map(|&c| EntityId::category(c)));
    let mut items: Vec<usize> = cat_item.keys().map(|x| x.1).collect();
    items.sort_unstable();
    items.dedup();
    node_order.extend(items.into_iter().map(EntityId::item));

    let mut tg = TreeGraph { owner: user, tms_list, node_order, edges: Vec::new() };
    let pos = |tg: &TreeGraph, id| tg.position(id).expect("node present");
    let mut edges = Vec::new();
    for (&(d, c), &w) in &dish_cat {
        edges.push(TgEdge { parent: pos(&tg, EntityId::dish(d)), child: pos(&tg, EntityId::category(c)), weight: w });
    }
    for (&(c, i), &v) in &cat_item {
        edges.push(TgEdge { parent: pos(&tg, EntityId::category(c)), child: pos(&tg, EntityId::item(i)), weight: v / cat_max[&c] });
    }
    edges.sort_by_key(|e| (e.child, e.parent));
    tg.edges = edges;
    debug_assert!(tg.edges.iter().all(|e| e.parent < e.child));
    Ok(tg)
}

/// Dense `M[child][parent]` weight matrix; strictly lower-triangular.
pub fn tg_adjacency(tg: &TreeGraph) -> Tensor {
    let n = tg.num_nodes();
    let mut m = Tensor::zeros(&[n, n]);
    for e in &tg.edges {
        assert!(e.parent < e.child, "edge {}->{} breaks topological order", e.parent, e.child);
        m.set(e.child, e.parent, e.weight);
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Node(EntityId),
    DishCat,
    CatItem,
}

impl Token {
    pub fn level(&self) -> u8 {
        match self {
            Token::Node(id) => match id.kind {
                EntityKind::Dish => 1,
                EntityKind::Category => 2,
                EntityKind::Item => 3,
                EntityKind::User => 0,
            },
            Token::DishCat | Token::CatItem => 0,
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Node(id) => write!(f, "{id}"),
            Token::DishCat => f.write_str("-"),
            Token::CatItem => f.write_str("- -"),
        }
    }
}

impl FromStr for Token {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "-" => Ok(Token::DishCat),
            "- -" => Ok(Token::CatItem),
            other => other.parse::<EntityId>().map(Token::Node).map_err(|e| e.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
    pub levels: Vec<u8>,
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.tokens.iter().map(|t| t.to_string()).collect();
        f.write_str(&parts.join(" "))
    }
}

/// Depth-first walk in recipe order with an edge token before each child.
pub fn serialize_tms_dfs(tms: &Tms) -> TokenSequence {
    let mut tokens = vec![Token::Node(EntityId::dish(tms.dish))];
    for (cat, items) in &tms.children {
        tokens.push(Token::DishCat);
        tokens.push(Token::Node(EntityId::category(*cat)));
        for &it in items {
            tokens.push(Token::CatItem);
            tokens.push(Token::Node(EntityId::item(it)));
        }
    }
    let levels = tokens.iter().map(Token::level).collect();
    TokenSequence { tokens, levels }
}

pub fn deserialize_tms(seq: &TokenSequence) -> Result<Tms, TreeError> {
    let bad = |pos: usize, msg: &str| TreeError::Malformed { pos, msg: msg.to_string() };
    if seq.levels.len() != seq.tokens.len() {
        return Err(bad(0, "levels and tokens differ in length"));
    }
    if let Some(p) = seq.tokens.iter().zip(&seq.levels).position(|(t, l)| t.level() != *l) {
        return Err(bad(p, "level inconsistent with token"));
    }
    let node = |pos: usize, kind: EntityKind| match seq.tokens.get(pos) {
        Some(Token::Node(id)) if id.kind == kind => Ok(id.index),
        Some(_) => Err(bad(pos, &format!("expected {} node", kind.as_str()))),
        None => Err(bad(pos, "dangling edge token")),
    };
    let dish = node(0, EntityKind::Dish)?;
    let mut children: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut pos = 1;
    while pos < seq.tokens.len() {
        match seq.tokens[pos] {
            Token::DishCat => children.push((node(pos + 1, EntityKind::Category)?, Vec::new())),
            Token::CatItem => {
                let item = node(pos + 1, EntityKind::Item)?;
                children.last_mut().ok_or_else(|| bad(pos, "item edge before any category"))?.1.push(item);
            }
            Token::Node(_) => return Err(bad(pos, "node without edge token")),
        }
        pos += 2;
    }
    if children.is_empty() {
        return Err(bad(pos, "dish without categories"));
    }
    if let Some(c) = children.iter().position(|c| c.1.is_empty()) {
        return Err(bad(0, &format!("category {} without items", children[c].0)));
    }
    Ok(Tms { dish, children })
}

#[derive(Serialize, Deserialize)]
struct SequenceRecord {
    user: usize,
    dish: usize,
    tokens: Vec<String>,
    levels: Vec<u8>,
}

/// One JSON line per (user, sold dish) sequence.
pub fn write_sequences_jsonl(tgs: &[TreeGraph], path: &Path) -> Result<(), TreeError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for tg in tgs {
        for tms in &tg.tms_list {
            let seq = serialize_tms_dfs(tms);
            let rec = SequenceRecord {
                user: tg.owner,
                dish: tms.dish,
                tokens: seq.tokens.iter().map(|t| t.to_string()).collect(),
                levels: seq.levels,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_sequences_jsonl(path: &Path) -> Result<Vec<(usize, TokenSequence)>, TreeError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: SequenceRecord = serde_json::from_str(line)?;
        let tokens = rec
            .tokens
            .iter()
            .map(|t| t.parse::<Token>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|msg| TreeError::Malformed { pos: n, msg })?;
        out.push((rec.user, TokenSequence { tokens, levels: rec.levels }));
    }
    Ok(out)
}
