use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// A ratio whose denominator may be zero. Degenerate rates read as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub value: f64,
    pub degenerate: bool,
}

fn rate(num: u64, den: u64) -> Rate {
    if den == 0 {
        Rate { value: 0.0, degenerate: true }
    } else {
        Rate { value: num as f64 / den as f64, degenerate: false }
    }
}

/// tp / (tp + fn)
pub fn tpr(c: &ConfusionCounts) -> Rate {
    rate(c.tp, c.tp + c.fn_)
}

/// fp / (tn + fp)
pub fn fpr(c: &ConfusionCounts) -> Rate {
    rate(c.fp, c.tn + c.fp)
}

fn check(scores: &[f64], labels: &[bool]) -> Result<(), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(EvalError::NonFinite(i));
    }
    Ok(())
}

/// Counts with a sample predicted positive iff `score >= threshold`.
pub fn confusion(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ConfusionCounts, EvalError> {
    check(scores, labels)?;
    let mut c = ConfusionCounts::default();
    for (&s, &pos) in scores.iter().zip(labels) {
        match (s >= threshold, pos) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub positives: u64,
    pub negatives: u64,
}

/// ROC curve over the distinct scores, from threshold +inf at (0, 0) down to
/// -inf at (1, 1). Equal scores form a single step, so the trapezoid area
/// equals the pair statistic with ties counted one half. The area is
/// accumulated as an exact integer and divided once.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve, EvalError> {
    check(scores, labels)?;
    let p = labels.iter().filter(|&&l| l).count() as u64;
    let n = labels.len() as u64 - p;
    if p == 0 || n == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    let (mut tp, mut fp) = (0u64, 0u64);
    // twice the area, in units of 1 / (p * n)
    let mut twice_area: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut gtp, mut gfp) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                gtp += 1;
            } else {
                gfp += 1;
            }
            i += 1;
        }
        twice_area += gfp as u128 * (2 * tp as u128 + gtp as u128);
        tp += gtp;
        fp += gfp;
        points.push(RocPoint { fpr: fp as f64 / n as f64, tpr: tp as f64 / p as f64, threshold: s });
    }
    points.push(RocPoint { fpr: 1.0, tpr: 1.0, threshold: f64::NEG_INFINITY });
    let auc = twice_area as f64 / (2 * p as u128 * n as u128) as f64;
    Ok(RocCurve { points, auc, positives: p, negatives: n })
}

/// Trapezoidal integral of TPR over FPR along the curve.
pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
    points.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0).sum()
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting one
/// half, by direct enumeration.
pub fn pair_auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check(scores, labels)?;
    let (mut twice, mut pairs) = (0u128, 0u128);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1;
            twice += if si > sj { 2 } else if si == sj { 1 } else { 0 };
        }
    }
    if pairs == 0 {
        return Err(EvalError::SingleClass);
    }
    Ok(twice as f64 / (2 * pairs) as f64)
}
