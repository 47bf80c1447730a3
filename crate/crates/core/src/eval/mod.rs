//! Splits, metrics, the bag-of-words baseline, and comparison tables.

mod bow;
mod metrics;
mod split;

pub use bow::{
    bow_features, bow_words, build_bow_vocab, global_class_weights, logreg_objective, train_logreg,
    BowModel, BowVocab, LogRegConfig, SparseVec, BOW_MAX_WORDS, BOW_MIN_FREQ,
};
pub use metrics::{auc, best_f1_threshold, confusion, f1, metrics, Confusion, Metrics};
pub use split::{split_dataset, SplitPlan, MIN_PER_CLASS, TEST_FRACTION, VALIDATION_FRACTION};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Metrics over the test indices of a split.
pub fn evaluate(
    scores: &[f64],
    labels: &[bool],
    split: &SplitPlan,
    threshold: f64,
) -> Result<Metrics> {
    let s: Vec<f64> = split.test.iter().map(|&i| scores[i]).collect();
    let y: Vec<bool> = split.test.iter().map(|&i| labels[i]).collect();
    metrics(&s, &y, threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub setting: String,
    pub metrics: Metrics,
}

/// One row per model, an F1/AUC column pair per setting (in first-seen order).
pub fn render_comparison(rows: &[ComparisonRow]) -> String {
    let mut models: Vec<&str> = Vec::new();
    let mut settings: Vec<&str> = Vec::new();
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
        if !settings.contains(&r.setting.as_str()) {
            settings.push(&r.setting);
        }
    }
    let mut out = String::from("model");
    for s in &settings {
        let _ = write!(out, ",{s}_f1,{s}_auc");
    }
    out.push('\n');
    for m in &models {
        out.push_str(m);
        for s in &settings {
            match rows.iter().find(|r| r.model == *m && r.setting == *s) {
                Some(r) => {
                    let _ = write!(out, ",{:.4},{:.4}", r.metrics.f1, r.metrics.auc);
                }
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_scores_give_half_auc() {
        let labels: Vec<bool> = (0..50).map(|i| i % 5 == 0).collect();
        let split = split_dataset(&labels, 1).unwrap();
        let m = evaluate(&vec![0.5; 50], &labels, &split, 0.5).unwrap();
        assert_eq!(m.auc, 0.5);
        assert_eq!(m.confusion.total(), split.test.len());
    }

    #[test]
    fn comparison_layout() {
        let m = metrics(&[0.9, 0.1], &[true, false], 0.5).unwrap();
        let rows = vec![
            ComparisonRow {
                model: "adbert".into(),
                setting: "no-restrict".into(),
                metrics: m,
            },
            ComparisonRow {
                model: "bow-lr".into(),
                setting: "no-restrict".into(),
                metrics: m,
            },
            ComparisonRow {
                model: "adbert".into(),
                setting: "1-year".into(),
                metrics: m,
            },
        ];
        let t = render_comparison(&rows);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(
            lines[0],
            "model,no-restrict_f1,no-restrict_auc,1-year_f1,1-year_auc"
        );
        assert_eq!(lines[1], "adbert,1.0000,1.0000,1.0000,1.0000");
        assert_eq!(lines[2], "bow-lr,1.0000,1.0000,,");
    }
}
