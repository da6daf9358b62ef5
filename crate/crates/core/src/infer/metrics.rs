use serde::Serialize;

use super::MatchResult;
use crate::data::Nucleus;

/// Precision, recall and F1; every 0/0 is reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        Self::from_pr(ratio(tp, tp + fp), ratio(tp, tp + fn_))
    }

    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryMetrics {
    pub category: u8,
    pub weight: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub prf: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub images: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub detection: Prf,
    pub per_category: Vec<CategoryMetrics>,
    /// Category-weighted average of the per-category P, R and F1.
    pub weighted: Prf,
    /// Matched detections assigned to background, left out of classification.
    pub background_assigned: usize,
    /// Set when there were no images or no annotations to score.
    pub empty: bool,
}

/// Frequencies of categories `1..=K` among `nuclei`; all zero when empty.
pub fn category_weights<'a>(nuclei: impl IntoIterator<Item = &'a Nucleus>, num_categories: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_categories];
    for n in nuclei {
        if let Some(c) = (n.category as usize).checked_sub(1).and_then(|k| counts.get_mut(k)) {
            *c += 1;
        }
    }
    let total: usize = counts.iter().sum();
    counts.iter().map(|&c| ratio(c, total)).collect()
}

/// `sum_k weights[k] * values[k]`.
pub fn weighted_mean(values: &[f64], weights: &[f64]) -> f64 {
    values.iter().zip(weights).map(|(v, w)| v * w).sum()
}

/// Pools match results and scores detection and classification.
///
/// Classification counts one-vs-rest over matched pairs whose detection has
/// a nuclear category; `weights[k-1]` weighs category `k`.
pub fn metrics(results: &[&MatchResult], weights: &[f64], num_categories: usize) -> MetricsReport {
    let k = num_categories;
    let mut conf = vec![vec![0usize; k + 1]; k + 1];
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for r in results {
        tp += r.tp;
        fp += r.fp;
        fn_ += r.fn_;
        for (a, row) in r.confusion.iter().enumerate().take(k + 1) {
            for (d, &v) in row.iter().enumerate().take(k + 1) {
                conf[a][d] += v;
            }
        }
    }
    let background_assigned = (1..=k).map(|a| conf[a][0]).sum();
    let mut per_category = Vec::with_capacity(k);
    for c in 1..=k {
        let ctp = conf[c][c];
        let cfp = (1..=k).filter(|&a| a != c).map(|a| conf[a][c]).sum();
        let cfn = (1..=k).filter(|&d| d != c).map(|d| conf[c][d]).sum();
        let prf = Prf::from_counts(ctp, cfp, cfn);
        let w = weights.get(c - 1).copied().unwrap_or(0.0);
        per_category.push(CategoryMetrics {
            category: c as u8,
            weight: w,
            tp: ctp,
            fp: cfp,
            fn_: cfn,
            prf,
        });
    }
    let w: Vec<f64> = per_category.iter().map(|m| m.weight).collect();
    let field = |f: fn(&Prf) -> f64| weighted_mean(&per_category.iter().map(|m| f(&m.prf)).collect::<Vec<_>>(), &w);
    let weighted = Prf {
        precision: field(|p| p.precision),
        recall: field(|p| p.recall),
        f1: field(|p| p.f1),
    };
    MetricsReport {
        images: results.len(),
        tp,
        fp,
        fn_,
        detection: Prf::from_counts(tp, fp, fn_),
        per_category,
        weighted,
        background_assigned,
        empty: results.is_empty() || tp + fn_ == 0,
    }
}
