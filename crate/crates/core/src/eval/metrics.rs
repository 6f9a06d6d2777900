use serde::{Deserialize, Serialize};

/// Cutoffs reported for every metric.
pub const KS: [usize; 4] = [5, 10, 20, 50];

/// Candidate items in descending score, ties by ascending id, with
/// `excluded` items removed.
pub fn rank_candidates(scores: &[f64], excluded: &[bool]) -> Vec<usize> {
    let mut items: Vec<usize> = (0..scores.len()).filter(|&i| !excluded.get(i).copied().unwrap_or(false)).collect();
    items.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    items
}

/// 1-based position `truth` would take in [`rank_candidates`], by counting
/// candidates that beat it.
pub fn rank_of(scores: &[f64], excluded: &[bool], truth: usize) -> usize {
    let t = scores[truth];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i != truth && !excluded.get(i).copied().unwrap_or(false) && (s > t || (s == t && i < truth)))
        .count()
}

fn position(ranked: &[usize], truth: usize) -> Option<usize> {
    ranked.iter().position(|&i| i == truth).map(|p| p + 1)
}

pub fn hr_at_k(ranked: &[usize], truth: usize, k: usize) -> f64 {
    match position(ranked, truth) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

pub fn ndcg_at_k(ranked: &[usize], truth: usize, k: usize) -> f64 {
    match position(ranked, truth) {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

pub fn mrr_at_k(ranked: &[usize], truth: usize, k: usize) -> f64 {
    match position(ranked, truth) {
        Some(r) if r <= k => 1.0 / r as f64,
        _ => 0.0,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub hr: f64,
    pub ndcg: f64,
    pub mrr: f64,
}

/// Metrics of a single held-out item found at 1-based `rank`.
pub fn metrics_from_rank(rank: usize, k: usize) -> Metrics {
    if rank == 0 || rank > k {
        return Metrics::default();
    }
    Metrics {
        hr: 1.0,
        ndcg: 1.0 / ((rank + 1) as f64).log2(),
        mrr: 1.0 / rank as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn closed_form_at_rank_three() {
        let ranked = [4, 2, 7, 1];
        assert_eq!(hr_at_k(&ranked, 7, 5), 1.0);
        assert_eq!(ndcg_at_k(&ranked, 7, 5), 0.5);
        assert!((mrr_at_k(&ranked, 7, 5) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(hr_at_k(&ranked, 4, 1), 1.0);
        assert_eq!(ndcg_at_k(&ranked, 4, 1), 1.0);
        assert_eq!(mrr_at_k(&ranked, 4, 1), 1.0);
    }

    #[test]
    fn beyond_cutoff_is_zero() {
        let ranked: Vec<usize> = (0..10).collect();
        assert_eq!(metrics_from_rank(7, 5), Metrics::default());
        assert_eq!(hr_at_k(&ranked, 6, 5) + ndcg_at_k(&ranked, 6, 5) + mrr_at_k(&ranked, 6, 5), 0.0);
    }

    #[test]
    fn ordering_and_ties() {
        assert_eq!(rank_candidates(&[0.9, 0.1], &[]), vec![0, 1]);
        assert_eq!(rank_candidates(&[0.5, 0.5, 0.5], &[]), vec![0, 1, 2]);
        assert_eq!(rank_candidates(&[0.1, 0.9, 0.5], &[false, true, false]), vec![2, 0]);
    }

    #[test]
    fn monotone_transform_keeps_order() {
        let logits = [0.3, -1.2, 2.5, 0.3, -0.1];
        let probs: Vec<f64> = logits.iter().map(|z: &f64| 1.0 / (1.0 + (-z).exp())).collect();
        assert_eq!(rank_candidates(&logits, &[]), rank_candidates(&probs, &[]));
    }

    proptest! {
        #[test]
        fn fast_rank_matches_sorted_list(
            scores in prop::collection::vec(prop_oneof![Just(0.5), -1.0f64..1.0], 2..60),
            mask_seed in any::<u64>(),
            truth_pick in any::<prop::sample::Index>(),
        ) {
            let n = scores.len();
            let truth = truth_pick.index(n);
            let excluded: Vec<bool> = (0..n).map(|i| i != truth && (mask_seed >> (i % 64)) & 1 == 1).collect();
            let ranked = rank_candidates(&scores, &excluded);
            let rank = rank_of(&scores, &excluded, truth);
            prop_assert!(ranked.iter().all(|&i| !excluded[i]));
            for k in KS {
                let m = metrics_from_rank(rank, k);
                prop_assert_eq!(m.hr, hr_at_k(&ranked, truth, k));
                prop_assert_eq!(m.ndcg, ndcg_at_k(&ranked, truth, k));
                prop_assert_eq!(m.mrr, mrr_at_k(&ranked, truth, k));
            }
        }
    }
}
