//! Bag-of-words + logistic regression baseline.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::pre_tokenize;

pub const BOW_MIN_FREQ: usize = 5;
pub const BOW_MAX_WORDS: usize = 5000;

/// Lowercase whole words; punctuation-only tokens are dropped.
pub fn bow_words(text: &str) -> impl Iterator<Item = String> {
    pre_tokenize(text)
        .into_iter()
        .filter(|w| w.chars().any(|c| c.is_ascii_alphanumeric()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct BowVocab {
    pub words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for BowVocab {
    fn from(words: Vec<String>) -> Self {
        Self::new(words)
    }
}

impl From<BowVocab> for Vec<String> {
    fn from(v: BowVocab) -> Self {
        v.words
    }
}

impl BowVocab {
    pub fn new(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }
}

/// Words seen at least `min_freq` times, most frequent first (ties
/// alphabetical), at most `max_words`.
pub fn build_bow_vocab<S: AsRef<str>>(
    docs: &[Vec<S>],
    min_freq: usize,
    max_words: usize,
) -> BowVocab {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for doc in docs {
        for s in doc {
            for w in bow_words(s.as_ref()) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> =
        counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_words);
    BowVocab::new(ranked.into_iter().map(|(w, _)| w).collect())
}

/// Sparse counts as sorted `(feature, count)` pairs.
pub type SparseVec = Vec<(usize, f64)>;

pub fn bow_features<S: AsRef<str>>(sections: &[S], vocab: &BowVocab) -> SparseVec {
    let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
    for s in sections {
        for w in bow_words(s.as_ref()) {
            if let Some(i) = vocab.get(&w) {
                *counts.entry(i).or_insert(0.0) += 1.0;
            }
        }
    }
    counts.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogRegConfig {
    pub l2: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        Self {
            l2: 1e-2,
            max_iter: 20_000,
            grad_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BowModel {
    pub vocab: BowVocab,
    /// Feature weights followed by the bias.
    pub weights: Vec<f64>,
    pub l2: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl BowModel {
    pub fn score(&self, x: &SparseVec) -> f64 {
        crate::encoder::sigmoid(linear(&self.weights, x))
    }
}

fn linear(w: &[f64], x: &SparseVec) -> f64 {
    let bias = w[w.len() - 1];
    bias + x.iter().map(|&(j, v)| w[j] * v).sum::<f64>()
}

/// Class weights `n / (2 n_c)` from the whole training set.
pub fn global_class_weights(labels: &[bool]) -> Result<(f64, f64)> {
    let n = labels.len() as f64;
    let pos = labels.iter().filter(|&&y| y).count() as f64;
    let neg = n - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::input("logistic regression needs both classes"));
    }
    Ok((n / (2.0 * pos), n / (2.0 * neg)))
}

/// Weighted mean log-loss plus `l2/2 * |w|^2` (bias unpenalized) and its gradient.
pub fn logreg_objective(
    w: &[f64],
    xs: &[SparseVec],
    labels: &[bool],
    weights: (f64, f64),
    l2: f64,
) -> (f64, Vec<f64>) {
    let n = xs.len() as f64;
    let d = w.len() - 1;
    let mut grad = vec![0.0; w.len()];
    let mut loss = 0.0;
    for (x, &y) in xs.iter().zip(labels) {
        let cw = if y { weights.0 } else { weights.1 };
        let z = linear(w, x);
        // log(1 + e^z) - y z, computed stably.
        let softplus = if z > 0.0 {
            z + (-z).exp().ln_1p()
        } else {
            z.exp().ln_1p()
        };
        loss += cw * (softplus - if y { z } else { 0.0 });
        let r = cw * (crate::encoder::sigmoid(z) - f64::from(u8::from(y))) / n;
        for &(j, v) in x {
            grad[j] += r * v;
        }
        grad[d] += r;
    }
    loss /= n;
    for j in 0..d {
        loss += 0.5 * l2 * w[j] * w[j];
        grad[j] += l2 * w[j];
    }
    (loss, grad)
}

/// Upper bound on the objective's gradient Lipschitz constant via power
/// iteration on the (bias-augmented) design matrix.
fn lipschitz(xs: &[SparseVec], d: usize, max_weight: f64, l2: f64) -> f64 {
    let n = xs.len() as f64;
    let mut v = vec![1.0 / ((d + 1) as f64).sqrt(); d + 1];
    let mut sigma2 = 0.0;
    for _ in 0..100 {
        let xv: Vec<f64> = xs.iter().map(|x| linear(&v, x)).collect();
        let mut xtxv = vec![0.0; d + 1];
        for (x, &s) in xs.iter().zip(&xv) {
            for &(j, val) in x {
                xtxv[j] += val * s;
            }
            xtxv[d] += s;
        }
        let norm = xtxv.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        sigma2 = norm;
        v = xtxv.into_iter().map(|a| a / norm).collect();
    }
    // The power estimate approaches the top eigenvalue from below; pad it.
    0.25 * max_weight * sigma2 * 1.05 / n + l2
}

/// Full-batch gradient descent with step `1/L` from zero weights.
pub fn train_logreg(
    xs: &[SparseVec],
    labels: &[bool],
    vocab: &BowVocab,
    cfg: &LogRegConfig,
) -> Result<BowModel> {
    if xs.is_empty() || xs.len() != labels.len() {
        return Err(Error::input(
            "logistic regression needs a non-empty, aligned training set",
        ));
    }
    let weights = global_class_weights(labels)?;
    let d = vocab.len();
    let step = 1.0 / lipschitz(xs, d, weights.0.max(weights.1), cfg.l2);
    let mut w = vec![0.0; d + 1];
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        let (_, g) = logreg_objective(&w, xs, labels, weights, cfg.l2);
        grad_norm = g.iter().map(|a| a * a).sum::<f64>().sqrt();
        if grad_norm < cfg.grad_tol {
            break;
        }
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= step * gi;
        }
        iterations += 1;
    }
    if grad_norm >= cfg.grad_tol {
        log::warn!("logistic regression stopped after {iterations} iterations with gradient norm {grad_norm:.3e}");
    }
    Ok(BowModel {
        vocab: vocab.clone(),
        weights: w,
        l2: cfg.l2,
        iterations,
        grad_norm,
    })
}
