use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GraphError, HeterogeneousGraph};
use crate::data::EntityId;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Node2vecConfig {
    pub dim: usize,
    pub walk_length: usize,
    pub walks_per_node: usize,
    pub p: f64,
    pub q: f64,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
}

impl Default for Node2vecConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            walk_length: 40,
            walks_per_node: 10,
            p: 1.0,
            q: 1.0,
            window: 5,
            negatives: 5,
            epochs: 1,
            learning_rate: 0.025,
            min_learning_rate: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeEmbeddings {
    pub dim: usize,
    pub map: BTreeMap<EntityId, Vec<f64>>,
    /// Nodes without edges; their vectors keep the random initialization.
    pub untrained: Vec<EntityId>,
}

impl NodeEmbeddings {
    pub fn get(&self, id: &EntityId) -> Option<&[f64]> {
        self.map.get(id).map(|v| v.as_slice())
    }
}

/// Random-walk sampler over a fixed graph.
pub struct Walker {
    adj: Vec<Vec<(usize, f64)>>,
    cdf: Vec<Vec<f64>>,
    p: f64,
    q: f64,
}

impl Walker {
    pub fn new(graph: &HeterogeneousGraph, p: f64, q: f64) -> Self {
        let adj = graph.adjacency();
        let cdf = adj
            .iter()
            .map(|list| {
                let mut acc = 0.0;
                list.iter()
                    .map(|&(_, w)| {
                        acc += w;
                        acc
                    })
                    .collect()
            })
            .collect();
        Self { adj, cdf, p, q }
    }

    pub fn num_nodes(&self) -> usize {
        self.adj.len()
    }

    fn is_neighbor(&self, a: usize, b: usize) -> bool {
        self.adj[a].binary_search_by_key(&b, |x| x.0).is_ok()
    }

    /// Normalized next-node distribution from `cur` given the previous node.
    pub fn transition_probs(&self, prev: Option<usize>, cur: usize) -> Vec<(usize, f64)> {
        let raw: Vec<(usize, f64)> = self.adj[cur]
            .iter()
            .map(|&(x, w)| {
                let bias = match prev {
                    None => 1.0,
                    Some(t) if x == t => 1.0 / self.p,
                    Some(t) if self.is_neighbor(t, x) => 1.0,
                    Some(_) => 1.0 / self.q,
                };
                (x, w * bias)
            })
            .collect();
        let total: f64 = raw.iter().map(|x| x.1).sum();
        raw.into_iter().map(|(x, w)| (x, w / total)).collect()
    }

    /// Samples one step; `None` when `cur` has no neighbors.
    pub fn step<R: Rng>(&self, prev: Option<usize>, cur: usize, rng: &mut R) -> Option<usize> {
        let list = &self.adj[cur];
        if list.is_empty() {
            return None;
        }
        if prev.is_none() || (self.p == 1.0 && self.q == 1.0) {
            let cdf = &self.cdf[cur];
            let r = rng.random::<f64>() * cdf[cdf.len() - 1];
            let k = cdf.partition_point(|&c| c <= r).min(list.len() - 1);
            return Some(list[k].0);
        }
        let probs = self.transition_probs(prev, cur);
        let mut r = rng.random::<f64>();
        for &(x, pr) in &probs {
            if r < pr {
                return Some(x);
            }
            r -= pr;
        }
        Some(probs[probs.len() - 1].0)
    }

    pub fn walk<R: Rng>(&self, start: usize, length: usize, rng: &mut R) -> Vec<usize> {
        let mut walk = vec![start];
        let mut prev = None;
        while walk.len() < length {
            let cur = walk[walk.len() - 1];
            match self.step(prev, cur, rng) {
                Some(next) => {
                    prev = Some(cur);
                    walk.push(next);
                }
                None => break,
            }
        }
        walk
    }
}

fn walk_seed(seed: u64, round: usize, node: usize) -> u64 {
    // splitmix64 over the walk coordinates
    let mut z = seed ^ ((round as u64) << 32 | node as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Biased walks followed by skip-gram with negative sampling.
pub fn node2vec_embed(graph: &HeterogeneousGraph, cfg: &Node2vecConfig, seed: u64) -> Result<NodeEmbeddings, GraphError> {
    let n = graph.nodes.len();
    if n == 0 {
        return Err(GraphError::EmptyGraph);
    }
    let walker = Walker::new(graph, cfg.p, cfg.q);
    let mut walks = Vec::with_capacity(n * cfg.walks_per_node);
    for round in 0..cfg.walks_per_node {
        for start in 0..n {
            if walker.adj[start].is_empty() {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(walk_seed(seed, round, start));
            walks.push(walker.walk(start, cfg.walk_length, &mut rng));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = cfg.dim;
    let mut emb: Vec<f64> = (0..n * dim).map(|_| (rng.random::<f64>() - 0.5) / dim as f64).collect();
    let mut ctx = vec![0.0; n * dim];

    let mut freq = vec![0.0; n];
    for w in &walks {
        for &v in w {
            freq[v] += 1.0;
        }
    }
    let mut noise_cdf = Vec::with_capacity(n);
    let mut acc = 0.0;
    for f in &freq {
        acc += f64::powf(*f, 0.75);
        noise_cdf.push(acc);
    }

    let total_pairs: usize = walks.iter().map(|w| w.len()).sum::<usize>() * cfg.epochs.max(1);
    let mut seen = 0usize;
    let mut grad = vec![0.0; dim];
    for _ in 0..cfg.epochs {
        for w in &walks {
            for (i, &center) in w.iter().enumerate() {
                let lr = (cfg.learning_rate * (1.0 - seen as f64 / total_pairs as f64)).max(cfg.min_learning_rate);
                seen += 1;
                let lo = i.saturating_sub(cfg.window);
                let hi = (i + cfg.window + 1).min(w.len());
                for (j, &target) in w.iter().enumerate().take(hi).skip(lo) {
                    if j == i {
                        continue;
                    }
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    for k in 0..=cfg.negatives {
                        let (t, label) = if k == 0 {
                            (target, 1.0)
                        } else {
                            let r = rng.random::<f64>() * acc;
                            let t = noise_cdf.partition_point(|&c| c <= r).min(n - 1);
                            if t == target {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let e = &emb[center * dim..(center + 1) * dim];
                        let c = &mut ctx[t * dim..(t + 1) * dim];
                        let dot: f64 = e.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
                        let g = lr * (label - sigmoid(dot));
                        for d in 0..dim {
                            grad[d] += g * c[d];
                            c[d] += g * e[d];
                        }
                    }
                    for (e, g) in emb[center * dim..(center + 1) * dim].iter_mut().zip(&grad) {
                        *e += g;
                    }
                }
            }
        }
    }

    let adj_empty: Vec<bool> = walker.adj.iter().map(|a| a.is_empty()).collect();
    Ok(NodeEmbeddings {
        dim,
        map: graph
            .nodes
            .iter()
            .enumerate()
            .map(|(i, id)| (*id, emb[i * dim..(i + 1) * dim].to_vec()))
            .collect(),
        untrained: graph.nodes.iter().zip(adj_empty).filter(|(_, e)| *e).map(|(id, _)| *id).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textembed::cosine;

    fn unweighted(n: usize, pairs: &[(usize, usize)]) -> HeterogeneousGraph {
        HeterogeneousGraph::from_weighted(
            (0..n).map(EntityId::user).collect(),
            pairs.iter().map(|&(a, b)| (EntityId::user(a), EntityId::user(b), 1.0)).collect(),
        )
    }

    #[test]
    fn first_order_walk_is_uniform() {
        let g = unweighted(6, &[(0, 1), (0, 2), (0, 3), (0, 4), (1, 5)]);
        let w = Walker::new(&g, 1.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut hits = [0usize; 6];
        let steps = 10_000;
        for _ in 0..steps {
            hits[w.step(Some(1), 0, &mut rng).unwrap()] += 1;
        }
        for &h in &hits[1..5] {
            let f = h as f64 / steps as f64;
            assert!((f - 0.25).abs() < 0.03, "frequency {f}");
        }
        assert_eq!(hits[0] + hits[5], 0);
    }

    #[test]
    fn transition_probabilities_sum_to_one() {
        let g = unweighted(5, &[(0, 1), (1, 2), (0, 2), (2, 3), (3, 4)]);
        for (p, q) in [(1.0, 1.0), (0.25, 4.0), (4.0, 0.5)] {
            let w = Walker::new(&g, p, q);
            for cur in 0..5 {
                for prev in std::iter::once(None).chain(w.adj[cur].iter().map(|x| Some(x.0))) {
                    let s: f64 = w.transition_probs(prev, cur).iter().map(|x| x.1).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn return_bias_follows_p_and_q() {
        // path 0-1-2 plus triangle 1-3-0: from 1 having come from 0
        let g = unweighted(4, &[(0, 1), (1, 2), (1, 3), (0, 3)]);
        let w = Walker::new(&g, 0.5, 2.0);
        let probs: BTreeMap<usize, f64> = w.transition_probs(Some(0), 1).into_iter().collect();
        // unnormalized: back to 0 -> 2, to 3 (neighbor of 0) -> 1, to 2 -> 0.5
        assert!((probs[&0] - 2.0 / 3.5).abs() < 1e-12);
        assert!((probs[&3] - 1.0 / 3.5).abs() < 1e-12);
        assert!((probs[&2] - 0.5 / 3.5).abs() < 1e-12);
    }

    #[test]
    fn isolated_node_walk_stops() {
        let g = unweighted(3, &[(0, 1)]);
        let w = Walker::new(&g, 1.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(w.walk(2, 40, &mut rng), vec![2]);
        let cfg = Node2vecConfig { dim: 8, walks_per_node: 2, ..Default::default() };
        let e = node2vec_embed(&g, &cfg, 1).unwrap();
        assert_eq!(e.untrained, vec![EntityId::user(2)]);
        assert_eq!(e.map.len(), 3);
    }

    #[test]
    fn barbell_communities_separate() {
        let mut pairs = Vec::new();
        for base in [0, 6] {
            for a in 0..6 {
                for b in (a + 1)..6 {
                    pairs.push((base + a, base + b));
                }
            }
        }
        pairs.push((5, 6));
        let g = unweighted(12, &pairs);
        let cfg = Node2vecConfig { dim: 16, ..Default::default() };
        let e = node2vec_embed(&g, &cfg, 7).unwrap();
        let v = |i: usize| e.get(&EntityId::user(i)).unwrap().to_vec();
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0, 0.0, 0);
        for a in 0..12 {
            for b in (a + 1)..12 {
                let c = cosine(&v(a), &v(b));
                if (a < 6) == (b < 6) {
                    intra += c;
                    ni += 1;
                } else {
                    inter += c;
                    nx += 1;
                }
            }
        }
        let (intra, inter) = (intra / ni as f64, inter / nx as f64);
        assert!(intra > inter, "intra {intra} inter {inter}");
    }

    #[test]
    fn deterministic_per_seed() {
        let g = unweighted(4, &[(0, 1), (1, 2), (2, 3)]);
        let cfg = Node2vecConfig { dim: 4, walks_per_node: 2, walk_length: 5, ..Default::default() };
        assert_eq!(node2vec_embed(&g, &cfg, 5).unwrap(), node2vec_embed(&g, &cfg, 5).unwrap());
        assert_ne!(node2vec_embed(&g, &cfg, 5).unwrap(), node2vec_embed(&g, &cfg, 6).unwrap());
    }
}
