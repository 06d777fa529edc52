//! Ranking metrics: AUROC, PRAUC (average precision), and the per-subtype
//! evaluation protocol.
//!
//! AUROC is the Mann-Whitney statistic P(score_pos > score_neg) + 0.5 P(tie).
//! Two routes are provided: an exact pairwise count and a rank-statistic
//! form. They are algebraically identical and the tests hold them to exact
//! equality. PRAUC is average precision with tied scores grouped into a
//! single threshold step (no trapezoidal interpolation).

use crate::data::FraudSubtype;
use crate::error::{Error, Result};

/// Switch-over point between the pairwise and rank AUROC routes.
const PAIRWISE_MAX_N: usize = 200;

/// Scores with binary labels and optional fraud subtypes.
#[derive(Debug, Clone, Default)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub subtypes: Option<Vec<FraudSubtype>>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Self {
        assert_eq!(scores.len(), labels.len(), "scores/labels length mismatch");
        ScoredSet {
            scores,
            labels,
            subtypes: None,
        }
    }

    pub fn with_subtypes(
        scores: Vec<f64>,
        labels: Vec<bool>,
        subtypes: Vec<FraudSubtype>,
    ) -> Self {
        assert_eq!(scores.len(), labels.len(), "scores/labels length mismatch");
        assert_eq!(scores.len(), subtypes.len(), "scores/subtypes length mismatch");
        ScoredSet {
            scores,
            labels,
            subtypes: Some(subtypes),
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn n_negative(&self) -> usize {
        self.len() - self.n_positive()
    }
}

/// Area under the ROC curve. Dispatches to the exact pairwise route for
/// small inputs and the rank route for large ones; the two agree exactly.
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    if set.len() <= PAIRWISE_MAX_N {
        auroc_pairwise(set)
    } else {
        auroc_ranked(set)
    }
}

/// AUROC by brute-force enumeration of all positive/negative pairs.
pub fn auroc_pairwise(set: &ScoredSet) -> Result<f64> {
    let (n_pos, n_neg) = check_two_classes(set)?;
    let mut wins: u64 = 0;
    let mut ties: u64 = 0;
    for (i, (&si, &li)) in set.scores.iter().zip(&set.labels).enumerate() {
        if !li {
            continue;
        }
        for (j, (&sj, &lj)) in set.scores.iter().zip(&set.labels).enumerate() {
            if i == j || lj {
                continue;
            }
            if si > sj {
                wins += 1;
            } else if si == sj {
                ties += 1;
            }
        }
    }
    Ok((wins as f64 + 0.5 * ties as f64) / (n_pos as f64 * n_neg as f64))
}

/// AUROC via the Mann-Whitney U statistic with mid-ranks for ties.
pub fn auroc_ranked(set: &ScoredSet) -> Result<f64> {
    let (n_pos, n_neg) = check_two_classes(set)?;
    let n = set.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        set.scores[a]
            .partial_cmp(&set.scores[b])
            .expect("scores must not be NaN")
    });

    // Mid-ranks within tie groups; ranks are 1-based.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && set.scores[order[j + 1]] == set.scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if set.labels[idx] {
                rank_sum_pos += mid_rank;
            }
        }
        i = j + 1;
    }

    let u = rank_sum_pos - (n_pos as f64 * (n_pos as f64 + 1.0)) / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Area under the precision-recall curve as average precision:
/// AP = sum_k (R_k - R_{k-1}) * P_k over descending-score thresholds,
/// with tied scores grouped into one step.
pub fn prauc(set: &ScoredSet) -> Result<f64> {
    if set.is_empty() || set.n_positive() == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one positive".into(),
        ));
    }
    let total_pos = set.n_positive() as f64;
    let n = set.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        set.scores[b]
            .partial_cmp(&set.scores[a])
            .expect("scores must not be NaN")
    });

    let mut ap = 0.0;
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && set.scores[order[j + 1]] == set.scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if set.labels[idx] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        let recall = tp / total_pos;
        let precision = tp / (tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// Evaluate one fraud subtype against non-fraud only: rows whose subtype is
/// neither `NonFraud` nor `subtype` are dropped from both numerator and
/// denominator, and both metrics are computed on the filtered set. The model
/// is not retrained; this filters an existing scored set.
pub fn subtype_eval(set: &ScoredSet, subtype: FraudSubtype) -> Result<(f64, f64)> {
    let subtypes = set
        .subtypes
        .as_ref()
        .ok_or_else(|| Error::UndefinedMetric("scored set carries no subtypes".into()))?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for ((&s, &l), &st) in set.scores.iter().zip(&set.labels).zip(subtypes) {
        if st == FraudSubtype::NonFraud || st == subtype {
            scores.push(s);
            labels.push(l);
        }
    }
    let filtered = ScoredSet::new(scores, labels);
    let pr = prauc(&filtered)?;
    let roc = auroc(&filtered)?;
    Ok((pr, roc))
}

/// ROC curve points as (false positive rate, true positive rate), one point
/// per distinct score threshold, starting at (0,0) and ending at (1,1).
pub fn roc_curve(set: &ScoredSet) -> Result<Vec<(f64, f64)>> {
    let (n_pos, n_neg) = check_two_classes(set)?;
    let n = set.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        set.scores[b]
            .partial_cmp(&set.scores[a])
            .expect("scores must not be NaN")
    });
    let mut points = vec![(0.0, 0.0)];
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && set.scores[order[j + 1]] == set.scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if set.labels[idx] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        points.push((fp / n_neg as f64, tp / n_pos as f64));
        i = j + 1;
    }
    Ok(points)
}

/// PR curve points as (recall, precision), one point per distinct threshold.
pub fn pr_curve(set: &ScoredSet) -> Result<Vec<(f64, f64)>> {
    if set.n_positive() == 0 {
        return Err(Error::UndefinedMetric(
            "PR curve needs at least one positive".into(),
        ));
    }
    let total_pos = set.n_positive() as f64;
    let n = set.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        set.scores[b]
            .partial_cmp(&set.scores[a])
            .expect("scores must not be NaN")
    });
    let mut points = Vec::new();
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && set.scores[order[j + 1]] == set.scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if set.labels[idx] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
        }
        points.push((tp / total_pos, tp / (tp + fp)));
        i = j + 1;
    }
    Ok(points)
}

fn check_two_classes(set: &ScoredSet) -> Result<(usize, usize)> {
    let n_pos = set.n_positive();
    let n_neg = set.n_negative();
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes (got {n_pos} positives, {n_neg} negatives)"
        )));
    }
    Ok((n_pos, n_neg))
}
