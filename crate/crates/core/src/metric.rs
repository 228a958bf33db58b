//! Rank-based AUC.
//!
//! Two entry points: [`auc`] for a plain score/label pair, and
//! [`SortedScores`], which sorts once and then evaluates AUC under arbitrary
//! non-negative sample weights in linear time. Resampling code expresses every
//! bootstrap draw and permutation as a weight vector over a fixed sort order.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Auc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub metric: Metric,
    pub value: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Mid-ranks (1-based, ties share their average rank).
pub fn midranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// AUC with half credit for ties, via the Mann-Whitney rank-sum.
/// `None` when either class is absent.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<MetricValue> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (n_pos as f64) * (n_pos as f64 + 1.0) / 2.0;
    Some(MetricValue {
        metric: Metric::Auc,
        value: u / (n_pos as f64 * n_neg as f64),
        n_pos,
        n_neg,
    })
}

/// Entries sorted ascending by score, partitioned into tie groups.
#[derive(Debug, Clone)]
pub struct SortedScores {
    order: Vec<u32>,
    /// Exclusive end offset into `order` of each tie group.
    group_ends: Vec<u32>,
}

impl SortedScores {
    pub fn new(scores: &[f64]) -> Self {
        let mut order: Vec<u32> = (0..scores.len() as u32).collect();
        order.sort_by(|&a, &b| scores[a as usize].total_cmp(&scores[b as usize]));
        let mut group_ends = Vec::new();
        for k in 1..order.len() {
            if scores[order[k] as usize] != scores[order[k - 1] as usize] {
                group_ends.push(k as u32);
            }
        }
        if !order.is_empty() {
            group_ends.push(order.len() as u32);
        }
        Self { order, group_ends }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Weighted AUC: sum over (positive, negative) pairs of w_p * w_n times
    /// 1, 0.5 or 0, divided by the total pair weight. With integer weights
    /// every partial sum is exact in `f64`.
    pub fn weighted_auc(&self, labels: &[bool], weight: impl Fn(usize) -> f64) -> Option<f64> {
        let mut start = 0usize;
        let mut neg_below = 0.0;
        let mut pos_total = 0.0;
        let mut num = 0.0;
        for &end in &self.group_ends {
            let end = end as usize;
            let mut gp = 0.0;
            let mut gn = 0.0;
            for &idx in &self.order[start..end] {
                let i = idx as usize;
                let w = weight(i);
                if w == 0.0 {
                    continue;
                }
                if labels[i] {
                    gp += w;
                } else {
                    gn += w;
                }
            }
            num += gp * (2.0 * neg_below + gn);
            neg_below += gn;
            pos_total += gp;
            start = end;
        }
        if pos_total == 0.0 || neg_below == 0.0 {
            return None;
        }
        Some(num / (2.0 * pos_total * neg_below))
    }
}
