//! Ranking metrics for link prediction.

use std::cmp::Ordering;

fn by_score_desc(a: &f64, b: &f64) -> Ordering {
    b.partial_cmp(a).unwrap_or(Ordering::Equal)
}

/// Area under the ROC curve via the rank-sum statistic. Tied scores count
/// one half.
pub fn roc_auc(pos: &[f64], neg: &[f64]) -> f64 {
    if pos.is_empty() || neg.is_empty() {
        return 0.5;
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // Ranks are 1-based; a tie group shares its mid-rank.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let np = pos.len() as f64;
    let nn = neg.len() as f64;
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

/// Average precision: `Σ (R_k − R_{k−1}) P_k` over distinct score
/// thresholds, descending.
pub fn average_precision(pos: &[f64], neg: &[f64]) -> f64 {
    if pos.is_empty() {
        return 0.0;
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| by_score_desc(&a.0, &b.0));
    let total = pos.len() as f64;
    let (mut tp, mut seen, mut prev_recall, mut ap) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let group = &all[i..=j];
        tp += group.iter().filter(|x| x.1).count() as f64;
        seen += group.len() as f64;
        let recall = tp / total;
        ap += (recall - prev_recall) * tp / seen;
        prev_recall = recall;
        i = j + 1;
    }
    ap
}

/// Fraction of positives scored strictly above the `k`-th best negative.
/// With fewer than `k` negatives every positive counts as a hit.
pub fn hits_at_k(pos: &[f64], neg: &[f64], k: usize) -> f64 {
    if pos.is_empty() {
        return 0.0;
    }
    if k == 0 {
        return 0.0;
    }
    if neg.len() < k {
        return 1.0;
    }
    let mut sorted = neg.to_vec();
    sorted.sort_by(by_score_desc);
    let threshold = sorted[k - 1];
    pos.iter().filter(|&&s| s > threshold).count() as f64 / pos.len() as f64
}
