//! Domain-A heterogeneous graph over users, categories and items.
//!
//! Same-kind edges come from thresholded document similarity; cross-kind
//! edges carry max-normalized purchase counts.

mod node2vec;

pub use node2vec::{node2vec_embed, Node2vecConfig, NodeEmbeddings, Walker};

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::data::{Dataset, Domain, EntityId, EntityKind, Interaction};
use crate::textembed::DocVectors;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("degenerate similarity (zero range) among {0} entities")]
    DegenerateSimilarity(String),
    #[error("need at least 2 {0} entities for similarity, got {1}")]
    TooFewEntities(String, usize),
    #[error("missing document vector for {0}")]
    MissingVector(EntityId),
    #[error("alpha {0} outside [0,1)")]
    BadAlpha(f64),
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeType {
    UserUser,
    ItemItem,
    CategoryCategory,
    UserItem,
    UserCategory,
    CategoryItem,
}

impl EdgeType {
    /// Edge type for an endpoint pair, if the pair is allowed in the graph.
    pub fn for_kinds(a: EntityKind, b: EntityKind) -> Option<Self> {
        use EntityKind::*;
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        Some(match (a, b) {
            (User, User) => EdgeType::UserUser,
            (Item, Item) => EdgeType::ItemItem,
            (Category, Category) => EdgeType::CategoryCategory,
            (User, Item) => EdgeType::UserItem,
            (User, Category) => EdgeType::UserCategory,
            (Category, Item) => EdgeType::CategoryItem,
            _ => return None,
        })
    }
}

impl fmt::Display for EdgeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EdgeType::UserUser => "user-user",
            EdgeType::ItemItem => "item-item",
            EdgeType::CategoryCategory => "category-category",
            EdgeType::UserItem => "user-item",
            EdgeType::UserCategory => "user-category",
            EdgeType::CategoryItem => "category-item",
        };
        f.write_str(s)
    }
}

/// Undirected weighted edge stored once with `a < b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub a: EntityId,
    pub b: EntityId,
    pub weight: f64,
    pub kind: EdgeType,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeterogeneousGraph {
    pub nodes: Vec<EntityId>,
    pub edges: Vec<Edge>,
}

impl HeterogeneousGraph {
    /// Builds from weighted pairs; pairs are canonicalized and typed.
    /// Panics on self-loops, non-positive weights, or disallowed kinds.
    pub fn from_weighted(nodes: Vec<EntityId>, pairs: Vec<(EntityId, EntityId, f64)>) -> Self {
        let mut nodes = nodes;
        nodes.sort_unstable();
        nodes.dedup();
        let mut edges: Vec<Edge> = pairs
            .into_iter()
            .map(|(x, y, w)| {
                assert!(x != y, "self-loop on {x}");
                assert!(w > 0.0 && w <= 1.0, "weight {w} outside (0,1] on {x}-{y}");
                let (a, b) = if x < y { (x, y) } else { (y, x) };
                let kind = EdgeType::for_kinds(a.kind, b.kind).unwrap_or_else(|| panic!("no edge type for {a}-{b}"));
                Edge { a, b, weight: w, kind }
            })
            .collect();
        edges.sort_by_key(|e| (e.a, e.b));
        Self { nodes, edges }
    }

    pub fn node_index(&self) -> BTreeMap<EntityId, usize> {
        self.nodes.iter().enumerate().map(|(i, n)| (*n, i)).collect()
    }

    /// Per-node `(neighbor index, weight)` lists sorted by neighbor index.
    pub fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let idx = self.node_index();
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            let (a, b) = (idx[&e.a], idx[&e.b]);
            adj[a].push((b, e.weight));
            adj[b].push((a, e.weight));
        }
        for list in &mut adj {
            list.sort_by_key(|x| x.0);
        }
        adj
    }

    pub fn isolated_nodes(&self) -> Vec<EntityId> {
        let adj = self.adjacency();
        self.nodes.iter().zip(&adj).filter(|(_, a)| a.is_empty()).map(|(n, _)| *n).collect()
    }

    pub fn count_by_type(&self) -> BTreeMap<EdgeType, usize> {
        let mut m = BTreeMap::new();
        for e in &self.edges {
            *m.entry(e.kind).or_insert(0) += 1;
        }
        m
    }

    /// `src,dst,type,weight` rows.
    pub fn write_csv(&self, path: &Path) -> Result<(), GraphError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "src,dst,type,weight")?;
        for e in &self.edges {
            writeln!(w, "{},{},{},{}", e.a, e.b, e.kind, e.weight)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Symmetric pairwise similarity among entities of one kind.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap {
    pub ids: Vec<EntityId>,
    values: Vec<f64>,
}

impl SimilarityMap {
    /// Similarity of the `i`-th and `j`-th entity (`i != j`).
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.ids.len() + j]
    }

    /// `(i, j, s)` for `i < j`.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let n = self.ids.len();
        (0..n).flat_map(move |i| ((i + 1)..n).map(move |j| (i, j, self.get(i, j))))
    }
}

/// Euclidean distances, min-max normalized over all pairs. With `invert`,
/// the value is `1 - normalized distance`, so close entities score high;
/// without it the normalized distance itself is returned.
pub fn similarity_matrix(vectors: &DocVectors, kind: EntityKind, invert: bool) -> Result<SimilarityMap, GraphError> {
    let entries: Vec<(EntityId, &Vec<f64>)> = vectors.map.iter().filter(|(id, _)| id.kind == kind).map(|(id, v)| (*id, v)).collect();
    let n = entries.len();
    if n < 2 {
        return Err(GraphError::TooFewEntities(kind.as_str().into(), n));
    }
    let mut dist = vec![0.0; n * n];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = entries[i].1.iter().zip(entries[j].1).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            dist[i * n + j] = d;
            dist[j * n + i] = d;
            lo = lo.min(d);
            hi = hi.max(d);
        }
    }
    if hi - lo <= 0.0 {
        return Err(GraphError::DegenerateSimilarity(kind.as_str().into()));
    }
    let mut values = vec![f64::NAN; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let norm = (dist[i * n + j] - lo) / (hi - lo);
                values[i * n + j] = if invert { 1.0 - norm } else { norm };
            }
        }
    }
    Ok(SimilarityMap {
        ids: entries.into_iter().map(|(id, _)| id).collect(),
        values,
    })
}

/// Keeps pairs whose value is strictly above `alpha`, weight unchanged.
pub fn threshold_edges(sim: &SimilarityMap, alpha: f64) -> Result<Vec<(EntityId, EntityId, f64)>, GraphError> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(GraphError::BadAlpha(alpha));
    }
    Ok(sim
        .pairs()
        .filter(|&(_, _, s)| s > alpha)
        .map(|(i, j, s)| (sim.ids[i], sim.ids[j], s))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairKind {
    UserItem,
    UserCategory,
    CategoryItem,
}

/// Cross-kind weights from domain-A order counts:
/// user-item is count over the user's max item count, user-category sums
/// counts per category then normalizes per user, category-item normalizes
/// each item's total count by the largest total within its category.
pub fn interaction_edge_weights(
    interactions: &[Interaction],
    item_category: &[usize],
    kind: PairKind,
) -> Vec<(EntityId, EntityId, f64)> {
    let purchases = interactions.iter().filter(|i| i.domain == Domain::A && i.target.kind == EntityKind::Item);
    // (group, member) -> count; normalized by max within group
    let mut counts: BTreeMap<(EntityId, EntityId), f64> = BTreeMap::new();
    for it in purchases {
        let item = it.target.index;
        let cat = EntityId::category(item_category[item]);
        let key = match kind {
            PairKind::UserItem => (EntityId::user(it.user), EntityId::item(item)),
            PairKind::UserCategory => (EntityId::user(it.user), cat),
            PairKind::CategoryItem => (cat, EntityId::item(item)),
        };
        *counts.entry(key).or_insert(0.0) += it.count as f64;
    }
    let mut group_max: BTreeMap<EntityId, f64> = BTreeMap::new();
    for (&(g, _), &c) in &counts {
        let m = group_max.entry(g).or_insert(0.0);
        *m = m.max(c);
    }
    counts
        .into_iter()
        .filter(|(_, c)| *c > 0.0)
        .map(|((g, m), c)| (g, m, c / group_max[&g]))
        .collect()
}

/// Assembles all six edge types. `purchases` should be the training
/// interactions only when the graph feeds an evaluation.
pub fn build_hg(
    ds: &Dataset,
    purchases: &[Interaction],
    docvecs: &DocVectors,
    alpha: f64,
    invert_similarity: bool,
) -> Result<HeterogeneousGraph, GraphError> {
    let mut nodes = Vec::new();
    nodes.extend(ds.users.iter().map(|u| EntityId::user(u.id)));
    nodes.extend(ds.categories.iter().map(|c| EntityId::category(c.id)));
    nodes.extend(ds.items.iter().map(|i| EntityId::item(i.id)));
    if let Some(missing) = nodes.iter().find(|n| docvecs.get(n).is_none()) {
        return Err(GraphError::MissingVector(*missing));
    }
    let mut pairs = Vec::new();
    for kind in [EntityKind::User, EntityKind::Category, EntityKind::Item] {
        let only_kind = DocVectors {
            dim: docvecs.dim,
            map: nodes
                .iter()
                .filter(|n| n.kind == kind)
                .map(|n| (*n, docvecs.map[n].clone()))
                .collect(),
        };
        // a single pair has no range to normalize over
        if only_kind.map.len() < 3 {
            continue;
        }
        let sim = similarity_matrix(&only_kind, kind, invert_similarity)?;
        pairs.extend(threshold_edges(&sim, alpha)?);
    }
    let item_category: Vec<usize> = ds.items.iter().map(|i| i.category).collect();
    for pk in [PairKind::UserItem, PairKind::UserCategory, PairKind::CategoryItem] {
        pairs.extend(interaction_edge_weights(purchases, &item_category, pk));
    }
    Ok(HeterogeneousGraph::from_weighted(nodes, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecs(kind: EntityKind, rows: &[&[f64]]) -> DocVectors {
        DocVectors {
            dim: rows[0].len(),
            map: rows
                .iter()
                .enumerate()
                .map(|(i, r)| (EntityId { kind, index: i }, r.to_vec()))
                .collect(),
        }
    }

    #[test]
    fn similarity_of_collinear_points() {
        let v = vecs(EntityKind::User, &[&[0.0, 0.0], &[0.0, 2.0], &[0.0, 4.0]]);
        let s = similarity_matrix(&v, EntityKind::User, true).unwrap();
        // distances 2, 4, 2 -> normalized 0, 1, 0
        assert_eq!(s.get(0, 1), 1.0);
        assert_eq!(s.get(0, 2), 0.0);
        assert_eq!(s.get(1, 2), 1.0);
        let raw = similarity_matrix(&v, EntityKind::User, false).unwrap();
        assert_eq!(raw.get(0, 2), 1.0);
    }

    #[test]
    fn identical_vectors_have_similarity_one() {
        let v = vecs(EntityKind::Item, &[&[1.0, 1.0], &[1.0, 1.0], &[3.0, 0.0]]);
        let s = similarity_matrix(&v, EntityKind::Item, true).unwrap();
        assert_eq!(s.get(0, 1), 1.0);
    }

    #[test]
    fn degenerate_similarity_errors() {
        let v = vecs(EntityKind::Item, &[&[1.0], &[1.0]]);
        let e = similarity_matrix(&v, EntityKind::Item, true).unwrap_err();
        assert!(e.to_string().contains("degenerate similarity (zero range)"));
    }

    fn sim_from_values(vals: &[f64]) -> SimilarityMap {
        // a 4-entity map whose first-row pairs carry `vals`
        let n = vals.len() + 1;
        let mut values = vec![0.0; n * n];
        for (j, &v) in vals.iter().enumerate() {
            values[j + 1] = v;
            values[(j + 1) * n] = v;
        }
        SimilarityMap {
            ids: (0..n).map(EntityId::user).collect(),
            values,
        }
    }

    #[test]
    fn threshold_boundary_is_exclusive() {
        let s = sim_from_values(&[0.04, 0.05, 0.06]);
        let e = threshold_edges(&s, 0.05).unwrap();
        assert_eq!(e, vec![(EntityId::user(0), EntityId::user(3), 0.06)]);
        let all = threshold_edges(&s, 0.0).unwrap();
        assert_eq!(all.len(), 3);
        assert!(threshold_edges(&sim_from_values(&[0.5, 0.9]), 0.99).unwrap().is_empty());
        assert!(threshold_edges(&s, 1.0).is_err());
    }

    fn purchase(user: usize, item: usize, count: u32) -> Interaction {
        Interaction {
            user,
            target: EntityId::item(item),
            count,
            domain: Domain::A,
        }
    }

    #[test]
    fn max_normalized_counts() {
        let cats = [0, 0];
        let ui = interaction_edge_weights(&[purchase(0, 0, 2), purchase(0, 1, 4)], &cats, PairKind::UserItem);
        assert_eq!(ui, vec![(EntityId::user(0), EntityId::item(0), 0.5), (EntityId::user(0), EntityId::item(1), 1.0)]);
        let single = interaction_edge_weights(&[purchase(3, 1, 7)], &cats, PairKind::UserItem);
        assert_eq!(single[0].2, 1.0);
        let ci = interaction_edge_weights(&[purchase(0, 0, 2), purchase(1, 0, 1), purchase(1, 1, 1)], &cats, PairKind::CategoryItem);
        assert_eq!(ci[0].2, 1.0);
        assert!((ci[1].2 - 1.0 / 3.0).abs() < 1e-15);
    }

    fn micro_dataset(purchases: Vec<Interaction>) -> (Dataset, DocVectors) {
        use crate::data::{Category, Dish, Item, RecipeComponent, User};
        let doc = || vec!["w000".to_string()];
        let ds = Dataset {
            users: (0..3).map(|id| User { id, is_common: true, profile_doc: doc() }).collect(),
            categories: vec![Category { id: 0, doc: doc() }],
            items: (0..2).map(|id| Item { id, category: 0, doc: doc() }).collect(),
            dishes: vec![Dish {
                id: 0,
                doc: doc(),
                recipe: vec![RecipeComponent { category: 0, items: vec![0] }],
            }],
            interactions: purchases,
        };
        let mut map = BTreeMap::new();
        for (i, x) in [0.0, 1.0, 3.0].into_iter().enumerate() {
            map.insert(EntityId::user(i), vec![x]);
        }
        map.insert(EntityId::category(0), vec![0.0]);
        map.insert(EntityId::item(0), vec![0.0]);
        map.insert(EntityId::item(1), vec![5.0]);
        (ds, DocVectors { dim: 1, map })
    }

    #[test]
    fn micro_dataset_edge_list() {
        let purchases = vec![purchase(0, 0, 2), purchase(0, 1, 4), purchase(1, 1, 1)];
        let (ds, dv) = micro_dataset(purchases.clone());
        let g = build_hg(&ds, &purchases, &dv, 0.05, true).unwrap();
        let (u, c, i) = (EntityId::user, EntityId::category, EntityId::item);
        // user distances 1,3,2 -> similarities 1,0,0.5
        let expected = vec![
            (u(0), u(1), 1.0, EdgeType::UserUser),
            (u(0), c(0), 1.0, EdgeType::UserCategory),
            (u(0), i(0), 0.5, EdgeType::UserItem),
            (u(0), i(1), 1.0, EdgeType::UserItem),
            (u(1), u(2), 0.5, EdgeType::UserUser),
            (u(1), c(0), 1.0, EdgeType::UserCategory),
            (u(1), i(1), 1.0, EdgeType::UserItem),
            (c(0), i(0), 0.4, EdgeType::CategoryItem),
            (c(0), i(1), 1.0, EdgeType::CategoryItem),
        ];
        let got: Vec<_> = g.edges.iter().map(|e| (e.a, e.b, e.weight, e.kind)).collect();
        assert_eq!(got, expected);
        assert_eq!(g.nodes.len(), 6);
        assert!(g.isolated_nodes().is_empty());
    }

    #[test]
    fn no_purchases_gives_similarity_edges_only() {
        let (ds, dv) = micro_dataset(vec![]);
        let g = build_hg(&ds, &[], &dv, 0.05, true).unwrap();
        assert!(g.edges.iter().all(|e| e.kind == EdgeType::UserUser));
        assert_eq!(g.isolated_nodes(), vec![EntityId::category(0), EntityId::item(0), EntityId::item(1)]);
    }

    #[test]
    fn generated_graph_respects_invariants() {
        use crate::data::{generate_synthetic, GenConfig};
        use crate::textembed::{train_doc_embeddings, DocEmbedConfig};
        let cfg = GenConfig {
            n_common_users: 12,
            n_unique_users: 4,
            unique_user_proportion: 0.25,
            n_items: 15,
            n_categories: 5,
            n_dishes: 10,
            sparsity_a: 0.1,
            ..GenConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let dc = DocEmbedConfig { dim: 8, epochs: 5, ..Default::default() };
        let (dv, _) = train_doc_embeddings(&ds.corpus(), &dc, 1).unwrap();
        let purchases: Vec<Interaction> = ds.domain(Domain::A).cloned().collect();
        let g = build_hg(&ds, &purchases, &dv, 0.05, true).unwrap();
        let mut prev = None;
        for e in &g.edges {
            assert!(e.a < e.b);
            assert!(e.weight > 0.0 && e.weight <= 1.0);
            assert_eq!(Some(e.kind), EdgeType::for_kinds(e.a.kind, e.b.kind));
            assert!(prev < Some((e.a, e.b)));
            prev = Some((e.a, e.b));
        }
        let strict = build_hg(&ds, &purchases, &dv, 0.5, true).unwrap();
        let loose: std::collections::BTreeSet<_> = g.edges.iter().map(|e| (e.a, e.b)).collect();
        assert!(strict.edges.iter().all(|e| loose.contains(&(e.a, e.b))));
    }
}
