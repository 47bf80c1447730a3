use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
    pub threshold: f64,
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("scores contain NaN".into()));
    }
    Ok(())
}

/// Mann-Whitney AUC from rank sums, ties at their average rank.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps tie ranks integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j, average (i + 1 + j) / 2.
        let twice_avg = (i + 1 + j) as u128;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        rank_sum2 += twice_avg * pos_in_group;
        i = j;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

pub fn confusion(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Confusion> {
    check_inputs(scores, labels)?;
    let mut c = Confusion::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall, and F1 at `threshold` (score >= threshold predicts a case).
pub fn f1(scores: &[f64], labels: &[bool], threshold: f64) -> Result<(f64, f64, f64, Confusion)> {
    if scores.is_empty() {
        return Err(Error::Metric("F1 over an empty set".into()));
    }
    let c = confusion(scores, labels, threshold)?;
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok((precision, recall, f, c))
}

pub fn metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Metrics> {
    let a = auc(scores, labels)?;
    let (precision, recall, f, confusion) = f1(scores, labels, threshold)?;
    Ok(Metrics {
        auc: a,
        precision,
        recall,
        f1: f,
        confusion,
        threshold,
    })
}

/// Threshold in `scores` that maximizes F1 (ties to the higher threshold).
pub fn best_f1_threshold(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.sort_by(|a, b| b.total_cmp(a));
    candidates.dedup();
    let mut best = (f64::NEG_INFINITY, 0.5);
    for t in candidates {
        let (_, _, f, _) = f1(scores, labels, t)?;
        if f > best.0 {
            best = (f, t);
        }
    }
    Ok(best.1)
}
