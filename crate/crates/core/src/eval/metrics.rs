//! Per-query retrieval metrics. Callers macro-average the results.

use std::cmp::Ordering;

/// Descending score, ascending id.
#[inline]
fn rank_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b]
        .partial_cmp(&scores[a])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// Full ranking of memory ids, best first, with `exclude` removed.
pub fn rank_memory(scores: &[f64], exclude: &[usize]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).filter(|i| !exclude.contains(i)).collect();
    ids.sort_by(|&a, &b| rank_order(scores, a, b));
    ids
}

/// The first `k` entries of [`rank_memory`] without sorting everything.
pub fn top_k(scores: &[f64], exclude: &[usize], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).filter(|i| !exclude.contains(i)).collect();
    if k < ids.len() {
        ids.select_nth_unstable_by(k, |&a, &b| rank_order(scores, a, b));
        ids.truncate(k);
    }
    ids.sort_by(|&a, &b| rank_order(scores, a, b));
    ids
}

fn hits(ranked: &[usize], relevant: &[usize], k: usize) -> usize {
    ranked.iter().take(k).filter(|id| relevant.contains(id)).count()
}

/// `|top-k ∩ A(q)| / k`
pub fn ap_at_k(ranked: &[usize], associates: &[usize], k: usize) -> f64 {
    assert!(k >= 1, "k must be positive");
    hits(ranked, associates, k) as f64 / k as f64
}

/// `|top-k ∩ A×(q)| / |A×(q)|`, or NaN for an empty associate set.
pub fn cbr_at_k(ranked: &[usize], cross_room_associates: &[usize], k: usize) -> f64 {
    if cross_room_associates.is_empty() {
        return f64::NAN;
    }
    hits(ranked, cross_room_associates, k) as f64 / cross_room_associates.len() as f64
}

/// Mann-Whitney U statistic over `n₊·n₋` pairs, ties counted one half.
pub fn discrimination_auc(scores_pos: &[f64], scores_neg: &[f64]) -> f64 {
    assert!(!scores_pos.is_empty() && !scores_neg.is_empty(), "AUC needs both classes");
    let mut neg = scores_neg.to_vec();
    neg.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let mut u = 0.0;
    for &p in scores_pos {
        let below = neg.partition_point(|&n| n < p);
        let not_above = neg.partition_point(|&n| n <= p);
        u += below as f64 + 0.5 * (not_above - below) as f64;
    }
    u / (scores_pos.len() as f64 * neg.len() as f64)
}

/// `h_true / (h_true + h_dist)` over the top-k, or `None` when neither
/// cross-room associates nor category distractors were retrieved.
pub fn specificity_at_k(
    ranked: &[usize],
    cross_room_associates: &[usize],
    category_distractors: &[usize],
    k: usize,
) -> Option<f64> {
    let h_true = hits(ranked, cross_room_associates, k);
    let h_dist = hits(ranked, category_distractors, k);
    if h_true + h_dist == 0 {
        None
    } else {
        Some(h_true as f64 / (h_true + h_dist) as f64)
    }
}

/// Reciprocal of the 1-based rank of the best-ranked relevant id among all
/// non-excluded memory states; 0 when the relevant set is empty.
pub fn reciprocal_rank(scores: &[f64], exclude: &[usize], relevant: &[usize]) -> f64 {
    let Some(best) = relevant
        .iter()
        .copied()
        .filter(|r| !exclude.contains(r))
        .min_by(|&a, &b| rank_order(scores, a, b))
    else {
        return 0.0;
    };
    let ahead = (0..scores.len())
        .filter(|i| !exclude.contains(i))
        .filter(|&i| rank_order(scores, i, best) == Ordering::Less)
        .count();
    1.0 / (ahead + 1) as f64
}

/// Plain mean; 0 for an empty slice.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_is_descending_with_id_tiebreak() {
        assert_eq!(rank_memory(&[0.1, 0.9, 0.5], &[]), vec![1, 2, 0]);
        assert_eq!(rank_memory(&[0.5, 0.5], &[]), vec![0, 1]);
        assert_eq!(rank_memory(&[0.1, 0.9, 0.5], &[1]), vec![2, 0]);
    }

    #[test]
    fn top_k_matches_full_sort() {
        use rand::Rng;
        let mut rng = crate::rng::substream(3, crate::rng::Domain::Queries, 0);
        // Coarse values force plenty of ties.
        let scores: Vec<f64> = (0..1000).map(|_| (rng.random_range(0..200) as f64) / 10.0).collect();
        let full = rank_memory(&scores, &[17]);
        assert_eq!(top_k(&scores, &[17], 20), full[..20]);
        assert!(!top_k(&scores, &[17], 20).contains(&17));
        assert_eq!(top_k(&scores, &[], 5000), rank_memory(&scores, &[]));
    }

    #[test]
    fn precision_and_recall_extremes() {
        let ranked = [4, 2, 7, 1];
        assert_eq!(ap_at_k(&ranked, &[4, 2, 7], 3), 1.0);
        assert_eq!(ap_at_k(&ranked, &[9], 3), 0.0);
        assert_eq!(cbr_at_k(&ranked, &[2, 7], 3), 1.0);
        assert_eq!(cbr_at_k(&ranked, &[2, 9], 3), 0.5);
    }

    #[test]
    fn auc_hand_counts() {
        assert_eq!(discrimination_auc(&[2.0, 3.0], &[1.0]), 1.0);
        assert_eq!(discrimination_auc(&[1.0], &[1.0]), 0.5);
        assert_eq!(discrimination_auc(&[1.0, 3.0], &[2.0]), 0.5);
        assert_eq!(discrimination_auc(&[1.0], &[2.0, 3.0]), 0.0);
    }

    #[test]
    fn auc_matches_pairwise_definition() {
        let pos = [0.3, 0.8, 0.8, 0.1, 0.5];
        let neg = [0.8, 0.2, 0.5, 0.5, 0.0, 0.9];
        let mut u = 0.0;
        for p in pos {
            for n in neg {
                u += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        let brute = u / 30.0;
        assert!((discrimination_auc(&pos, &neg) - brute).abs() < 1e-15);
    }

    #[test]
    fn specificity_cases() {
        assert_eq!(specificity_at_k(&[1, 2], &[1, 2], &[5], 2), Some(1.0));
        assert_eq!(specificity_at_k(&[5, 6], &[1, 2], &[5, 6], 2), Some(0.0));
        assert_eq!(specificity_at_k(&[8, 9], &[1, 2], &[5, 6], 2), None);
    }

    #[test]
    fn reciprocal_rank_counts_from_one() {
        let scores = [0.9, 0.1, 0.5, 0.7];
        assert_eq!(reciprocal_rank(&scores, &[], &[2]), 1.0 / 3.0);
        assert_eq!(reciprocal_rank(&scores, &[0], &[2]), 0.5);
        assert_eq!(reciprocal_rank(&scores, &[], &[1, 3]), 0.5);
        assert_eq!(reciprocal_rank(&scores, &[], &[]), 0.0);
    }
}
