//! Splitting, full-catalog ranking evaluation and baselines.

mod experiments;
mod metrics;

pub use experiments::{run_ablation, run_m_sweep, sweep_csv, AblationResult, SweepRow, VariantRun};
pub use metrics::{hr_at_k, metrics_from_rank, mrr_at_k, ndcg_at_k, rank_candidates, rank_of, Metrics, KS};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Domain, EntityKind, Interaction};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least 10 interactions to split, got {0}")]
    TooFewInteractions(usize),
    #[error("split ratios {0:?} must be positive and sum to 1")]
    BadRatios((f64, f64, f64)),
    #[error("metric invariant violated: {0}")]
    Invariant(String),
    #[error("fast metric path disagrees with brute force for user {user}, item {item}")]
    OracleMismatch { user: usize, item: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<Interaction>,
    pub val: Vec<Interaction>,
    pub test: Vec<Interaction>,
    pub seed: u64,
    /// Users whose only interactions had to be moved into train.
    pub forced: Vec<usize>,
}

impl Split {
    /// Per-user flags of items seen in train.
    pub fn train_mask(&self, n_users: usize, n_items: usize) -> Vec<Vec<bool>> {
        let mut m = vec![vec![false; n_items]; n_users];
        for it in &self.train {
            m[it.user][it.target.index] = true;
        }
        m
    }
}

/// Random partition of domain-A purchases; val and test interactions of
/// users absent from train are swapped with train interactions of users
/// that can spare one.
pub fn split_dataset(interactions: &[Interaction], ratios: (f64, f64, f64), seed: u64) -> Result<Split, EvalError> {
    let (rt, rv, rs) = ratios;
    if rt <= 0.0 || rv <= 0.0 || rs <= 0.0 || ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(EvalError::BadRatios(ratios));
    }
    let pool: Vec<&Interaction> = interactions.iter().filter(|i| i.domain == Domain::A && i.target.kind == EntityKind::Item).collect();
    let n = pool.len();
    if n < 10 {
        return Err(EvalError::TooFewInteractions(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = (rt * n as f64).round() as usize;
    let n_val = (rv * n as f64).round() as usize;
    // 0 train, 1 val, 2 test
    let mut part = vec![0u8; n];
    for (pos, &idx) in order.iter().enumerate() {
        part[idx] = if pos < n_train { 0 } else if pos < n_train + n_val { 1 } else { 2 };
    }

    let mut train_count: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, it) in pool.iter().enumerate() {
        if part[i] == 0 {
            *train_count.entry(it.user).or_insert(0) += 1;
        }
    }
    let mut forced = BTreeSet::new();
    for &idx in &order {
        let user = pool[idx].user;
        if part[idx] == 0 || train_count.get(&user).copied().unwrap_or(0) > 0 {
            continue;
        }
        let donors: Vec<usize> = (0..n).filter(|&j| part[j] == 0 && train_count[&pool[j].user] >= 2).collect();
        if donors.is_empty() {
            log::warn!("no train interaction to swap for user {user}");
            continue;
        }
        let j = donors[rng.random_range(0..donors.len())];
        part.swap(idx, j);
        *train_count.get_mut(&pool[j].user).unwrap() -= 1;
        *train_count.entry(user).or_insert(0) += 1;
        if pool.iter().filter(|it| it.user == user).count() == 1 {
            log::info!("user {user} has a single interaction; kept in train");
        }
        forced.insert(user);
    }

    let pick = |p: u8| pool.iter().enumerate().filter(|(i, _)| part[*i] == p).map(|(_, it)| (*it).clone()).collect();
    Ok(Split {
        train: pick(0),
        val: pick(1),
        test: pick(2),
        seed,
        forced: forced.into_iter().collect(),
    })
}

/// Anything that scores every item for a user.
pub trait Scorer {
    fn n_items(&self) -> usize;
    fn score_user(&self, user: usize, out: &mut [f64]);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_k: BTreeMap<usize, Metrics>,
    pub n_interactions: usize,
    pub meta: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn get(&self, k: usize) -> Metrics {
        self.per_k.get(&k).copied().unwrap_or_default()
    }

    pub fn check_invariants(&self) -> Result<(), EvalError> {
        let mut prev_hr = 0.0;
        for (&k, m) in &self.per_k {
            for (name, v) in [("HR", m.hr), ("NDCG", m.ndcg), ("MRR", m.mrr)] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(EvalError::Invariant(format!("{name}@{k} = {v} outside [0,1]")));
                }
            }
            if m.hr < prev_hr {
                return Err(EvalError::Invariant(format!("HR@{k} below a smaller cutoff")));
            }
            if m.ndcg > m.hr || m.mrr > m.hr {
                return Err(EvalError::Invariant(format!("NDCG@{k} or MRR@{k} above HR@{k}")));
            }
            prev_hr = m.hr;
        }
        Ok(())
    }

    /// `k,metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,metric,value\n");
        for (k, m) in &self.per_k {
            for (name, v) in [("hr", m.hr), ("ndcg", m.ndcg), ("mrr", m.mrr)] {
                let _ = writeln!(s, "{k},{name},{v}");
            }
        }
        s
    }

    pub fn pretty(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>4} {:>8} {:>8} {:>8}", "K", "HR", "NDCG", "MRR");
        for (k, m) in &self.per_k {
            let _ = writeln!(s, "{k:>4} {:>8.4} {:>8.4} {:>8.4}", m.hr, m.ndcg, m.mrr);
        }
        s
    }
}

fn exclusion(train: &[Interaction], n_items: usize) -> BTreeMap<usize, Vec<bool>> {
    let mut ex: BTreeMap<usize, Vec<bool>> = BTreeMap::new();
    for it in train {
        ex.entry(it.user).or_insert_with(|| vec![false; n_items])[it.target.index] = true;
    }
    ex
}

/// Rank of each target among items the user did not buy in train, in
/// target order.
fn target_ranks<S: Scorer + ?Sized>(scorer: &S, train: &[Interaction], targets: &[Interaction], oracle: usize) -> Result<Vec<usize>, EvalError> {
    let n = scorer.n_items();
    let ex = exclusion(train, n);
    let none = vec![false; n];
    let mut by_user: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, t) in targets.iter().enumerate() {
        by_user.entry(t.user).or_default().push(i);
    }
    let mut ranks = vec![0; targets.len()];
    let mut scores = vec![0.0; n];
    let mut checked = 0;
    for (&user, idxs) in &by_user {
        scorer.score_user(user, &mut scores);
        let excluded = ex.get(&user).unwrap_or(&none);
        for &i in idxs {
            let item = targets[i].target.index;
            ranks[i] = rank_of(&scores, excluded, item);
            if checked < oracle {
                checked += 1;
                let ranked = rank_candidates(&scores, excluded);
                for k in KS {
                    let fast = metrics_from_rank(ranks[i], k);
                    let slow = Metrics {
                        hr: hr_at_k(&ranked, item, k),
                        ndcg: ndcg_at_k(&ranked, item, k),
                        mrr: mrr_at_k(&ranked, item, k),
                    };
                    if fast != slow {
                        return Err(EvalError::OracleMismatch { user, item });
                    }
                }
            }
        }
    }
    Ok(ranks)
}

/// Averages per-interaction metrics over `targets` at every cutoff; the
/// first 50 targets are re-scored by sorting the full candidate list.
pub fn evaluate<S: Scorer + ?Sized>(scorer: &S, train: &[Interaction], targets: &[Interaction]) -> Result<MetricsReport, EvalError> {
    let ranks = target_ranks(scorer, train, targets, 50)?;
    let mut per_k = BTreeMap::new();
    for k in KS {
        let mut sum = Metrics::default();
        for &r in &ranks {
            let m = metrics_from_rank(r, k);
            sum.hr += m.hr;
            sum.ndcg += m.ndcg;
            sum.mrr += m.mrr;
        }
        let n = ranks.len().max(1) as f64;
        per_k.insert(k, Metrics { hr: sum.hr / n, ndcg: sum.ndcg / n, mrr: sum.mrr / n });
    }
    let report = MetricsReport { per_k, n_interactions: targets.len(), meta: BTreeMap::new() };
    report.check_invariants()?;
    Ok(report)
}

/// HR at one cutoff without the oracle pass.
pub fn hit_rate<S: Scorer + ?Sized>(scorer: &S, train: &[Interaction], targets: &[Interaction], k: usize) -> f64 {
    let ranks = target_ranks(scorer, train, targets, 0).unwrap_or_default();
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len().max(1) as f64
}

/// Ranks items by how many train interactions they appear in.
#[derive(Clone, Debug, PartialEq)]
pub struct Popularity {
    pub counts: Vec<f64>,
}

pub fn popularity_baseline(train: &[Interaction], n_items: usize) -> Popularity {
    let mut counts = vec![0.0; n_items];
    for it in train {
        counts[it.target.index] += 1.0;
    }
    Popularity { counts }
}

impl Scorer for Popularity {
    fn n_items(&self) -> usize {
        self.counts.len()
    }

    fn score_user(&self, _user: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.counts);
    }
}

/// Scores drawn afresh per user from a seeded generator.
pub struct RandomScorer {
    pub n_items: usize,
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn n_items(&self) -> usize {
        self.n_items
    }

    fn score_user(&self, user: usize, out: &mut [f64]) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (user as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        out.iter_mut().for_each(|s| *s = rng.random());
    }
}
