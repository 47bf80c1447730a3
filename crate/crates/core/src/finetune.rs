//! Section-pooling classifier: each section is encoded on its own, the
//! pooled section vectors are max-pooled per patient, and a single logistic
//! unit scores the result.

use std::collections::HashMap;
use std::fmt::Write as _;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cohort::CohortEntry;
use crate::encoder::{
    adam_step, backward, classifier_backward, classifier_logit, forward_seq, sigmoid, AdamHyper,
    AdamState, EncoderParams, OutputGrads, SeqCache,
};
use crate::error::{Error, Result};
use crate::eval::{metrics, Metrics, SplitPlan};
use crate::rng::{self, Rng};
use crate::tokenizer::{encode_section, TokenSequence, Vocab};

pub const BCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientInput {
    pub patient_id: String,
    pub sections: Vec<TokenSequence>,
    pub label: bool,
}

pub fn patient_input(entry: &CohortEntry, vocab: &Vocab, max_len: usize) -> Result<PatientInput> {
    let label = entry
        .label
        .target()
        .ok_or_else(|| Error::contract(format!("patient {} is excluded", entry.patient_id)))?;
    if entry.sections.is_empty() {
        return Err(Error::contract(format!(
            "patient {} has no sections",
            entry.patient_id
        )));
    }
    Ok(PatientInput {
        patient_id: entry.patient_id.clone(),
        sections: entry
            .sections
            .iter()
            .map(|s| encode_section(&s.text, vocab, max_len))
            .collect(),
        label,
    })
}

pub fn embed_section(params: &EncoderParams, seq: &TokenSequence) -> Result<Array1<f64>> {
    Ok(forward_seq(params, seq, None)?.pooled)
}

/// Coordinatewise maximum and, per coordinate, the first input attaining it.
pub fn max_pool_argmax(embeddings: &[Array1<f64>]) -> Result<(Array1<f64>, Vec<usize>)> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::contract("max_pool over zero embeddings"))?;
    let h = first.len();
    if embeddings.iter().any(|e| e.len() != h) {
        return Err(Error::contract(
            "max_pool over embeddings of different lengths",
        ));
    }
    let mut out = first.clone();
    let mut arg = vec![0usize; h];
    for (s, e) in embeddings.iter().enumerate().skip(1) {
        for j in 0..h {
            if e[j] > out[j] {
                out[j] = e[j];
                arg[j] = s;
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool(embeddings: &[Array1<f64>]) -> Result<Array1<f64>> {
    Ok(max_pool_argmax(embeddings)?.0)
}

/// Distinct sections in first-seen order. Max pooling is idempotent, so
/// scoring the distinct set is exact.
fn distinct_sections(sections: &[TokenSequence]) -> Vec<&TokenSequence> {
    let mut seen: HashMap<&TokenSequence, ()> = HashMap::new();
    sections
        .iter()
        .filter(|s| seen.insert(s, ()).is_none())
        .collect()
}

/// Patient embedding: max-pooled section embeddings.
pub fn patient_embedding(
    params: &EncoderParams,
    sections: &[TokenSequence],
) -> Result<Array1<f64>> {
    if sections.is_empty() {
        return Err(Error::contract("patient has no sections"));
    }
    let mut distinct = distinct_sections(sections);
    // Canonical order, so even signed-zero ties resolve identically.
    distinct.sort();
    let embs = distinct
        .iter()
        .map(|s| embed_section(params, s))
        .collect::<Result<Vec<_>>>()?;
    max_pool(&embs)
}

pub fn predict_patient(params: &EncoderParams, patient: &PatientInput) -> Result<f64> {
    let pooled = patient_embedding(params, &patient.sections)?;
    Ok(sigmoid(classifier_logit(params, pooled.view())))
}

pub fn predict_all(
    params: &EncoderParams,
    patients: &[PatientInput],
    idx: &[usize],
) -> Result<Vec<f64>> {
    idx.iter()
        .map(|&i| predict_patient(params, &patients[i]))
        .collect()
}

/// `(w_case, w_control)` with `w_c = B / (2 n_c)`.
pub fn batch_weights(labels: &[bool]) -> Result<(f64, f64)> {
    let b = labels.len() as f64;
    let n_case = labels.iter().filter(|&&y| y).count() as f64;
    let n_control = b - n_case;
    if n_case == 0.0 || n_control == 0.0 {
        return Err(Error::contract(
            "batch weights need both classes in the batch",
        ));
    }
    Ok((b / (2.0 * n_case), b / (2.0 * n_control)))
}

pub fn weighted_bce(probs: &[f64], labels: &[bool], weights: (f64, f64)) -> f64 {
    let b = probs.len() as f64;
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            if y {
                -weights.0 * p.ln()
            } else {
                -weights.1 * (1.0 - p).ln()
            }
        })
        .sum();
    total / b
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerPlan {
    pub batch_size: usize,
    /// Cases per batch.
    pub k: usize,
    pub batches: Vec<Vec<usize>>,
}

/// Cases per batch for batch size `b` and case fraction `p`.
pub fn cases_per_batch(b: usize, p: f64) -> usize {
    ((b as f64 * p).round() as usize).max(1).min(b - 1)
}

/// One epoch of stratified batches over item indices `0..labels.len()`.
pub fn stratified_batches(
    labels: &[bool],
    batch_size: usize,
    rng: &mut Rng,
) -> Result<SamplerPlan> {
    if batch_size < 2 {
        return Err(Error::config("finetune.batch_size must be at least 2"));
    }
    let mut cases: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut controls: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if cases.is_empty() || controls.is_empty() {
        return Err(Error::input(
            "stratified sampling needs at least one case and one control",
        ));
    }
    let k = cases_per_batch(batch_size, cases.len() as f64 / labels.len() as f64);
    let per = batch_size - k;
    if controls.len() < per {
        return Err(Error::input(format!(
            "stratified sampling needs at least {per} controls, got {}",
            controls.len()
        )));
    }
    controls.shuffle(rng);
    cases.shuffle(rng);
    let n_batches = controls.len() / per;
    let mut cursor = 0;
    let mut batches = Vec::with_capacity(n_batches);
    for chunk in controls.chunks_exact(per) {
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..k {
            if cursor == cases.len() {
                cases.shuffle(rng);
                cursor = 0;
            }
            batch.push(cases[cursor]);
            cursor += 1;
        }
        batch.extend_from_slice(chunk);
        batches.push(batch);
    }
    Ok(SamplerPlan {
        batch_size,
        k,
        batches,
    })
}

/// Batches drawn uniformly with replacement, ignoring labels.
pub fn uniform_batches(
    n_items: usize,
    batch_size: usize,
    n_batches: usize,
    rng: &mut Rng,
) -> Vec<Vec<usize>> {
    (0..n_batches)
        .map(|_| {
            (0..batch_size)
                .map(|_| rng.random_range(0..n_items))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMetric {
    #[default]
    Auc,
    F1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub threshold: f64,
    pub selection: SelectionMetric,
    /// Embeddings and this many lower layers receive no updates.
    pub freeze_depth: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            lr: 5e-4,
            threshold: 0.5,
            selection: SelectionMetric::Auc,
            freeze_depth: 0,
            clip_norm: Some(1.0),
            seed: 7,
        }
    }
}

impl FinetuneConfig {
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.batch_size < 2 {
            errs.push(format!(
                "finetune.batch_size must be at least 2, got {}",
                self.batch_size
            ));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            errs.push(format!(
                "finetune.threshold must be in [0, 1], got {}",
                self.threshold
            ));
        }
        errs.extend(self.adam().validation_errors("finetune"));
        errs
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            clip_norm: self.clip_norm,
            ..AdamHyper::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: Metrics,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub params: EncoderParams,
    /// 0 when no epoch ran and the initial model is returned.
    pub best_epoch: usize,
    pub epochs: Vec<EpochReport>,
}

impl FinetuneOutcome {
    pub fn report_csv(&self) -> String {
        let mut s =
            String::from("epoch,train_loss,val_auc,val_f1,val_precision,val_recall,selected\n");
        for e in &self.epochs {
            let v = &e.validation;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                e.epoch,
                e.train_loss,
                v.auc,
                v.f1,
                v.precision,
                v.recall,
                u8::from(e.epoch == self.best_epoch)
            );
        }
        s
    }
}

/// Weighted BCE of one batch and its gradient accumulated into `grads`.
pub fn batch_loss(
    params: &EncoderParams,
    patients: &[&PatientInput],
    grads: &mut EncoderParams,
    mut dropout: Option<&mut Rng>,
) -> Result<f64> {
    let labels: Vec<bool> = patients.iter().map(|p| p.label).collect();
    let weights = batch_weights(&labels)?;
    let b = patients.len() as f64;
    let mut probs = Vec::with_capacity(patients.len());
    for p in patients {
        let sections = distinct_sections(&p.sections);
        let caches: Vec<SeqCache> = sections
            .iter()
            .map(|s| forward_seq(params, s, dropout.as_deref_mut()))
            .collect::<Result<_>>()?;
        let embs: Vec<Array1<f64>> = caches.iter().map(|c| c.pooled.clone()).collect();
        let (pooled, arg) = max_pool_argmax(&embs)?;
        let prob = sigmoid(classifier_logit(params, pooled.view()));
        probs.push(prob);
        let w = if p.label { weights.0 } else { weights.1 };
        let d_logit = w * (prob - f64::from(u8::from(p.label))) / b;
        let d_pooled = classifier_backward(params, pooled.view(), d_logit, grads);
        let mut per_section: Vec<Option<Array1<f64>>> = vec![None; caches.len()];
        for (j, &s) in arg.iter().enumerate() {
            per_section[s].get_or_insert_with(|| Array1::zeros(pooled.len()))[j] = d_pooled[j];
        }
        for (cache, d) in caches.iter().zip(per_section) {
            if let Some(d) = d {
                let up = OutputGrads {
                    d_hidden: None,
                    d_pooled: Some(d),
                };
                backward(params, cache, &up, grads)?;
            }
        }
    }
    Ok(weighted_bce(&probs, &labels, weights))
}

fn better(a: &EpochReport, b: &EpochReport, metric: SelectionMetric) -> bool {
    let key = |e: &EpochReport| match metric {
        SelectionMetric::Auc => e.validation.auc,
        SelectionMetric::F1 => e.validation.f1,
    };
    // Strictly better metric, then higher F1; equal keeps the earlier epoch.
    key(a) > key(b) || (key(a) == key(b) && a.validation.f1 > b.validation.f1)
}

pub fn validation_metrics(
    params: &EncoderParams,
    patients: &[PatientInput],
    idx: &[usize],
    threshold: f64,
) -> Result<Metrics> {
    let scores = predict_all(params, patients, idx)?;
    let labels: Vec<bool> = idx.iter().map(|&i| patients[i].label).collect();
    metrics(&scores, &labels, threshold)
}

/// Trains on `split.train`, selects the epoch with the best validation metric.
pub fn run_finetune(
    patients: &[PatientInput],
    split: &SplitPlan,
    init: &EncoderParams,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    let errs = cfg.validation_errors();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    if let Some(&i) = split
        .train
        .iter()
        .chain(&split.validation)
        .find(|&&i| i >= patients.len())
    {
        return Err(Error::contract(format!("split index {i} out of range")));
    }
    if cfg.epochs == 0 {
        let validation = validation_metrics(init, patients, &split.validation, cfg.threshold)?;
        return Ok(FinetuneOutcome {
            params: init.clone(),
            best_epoch: 0,
            epochs: vec![EpochReport {
                epoch: 0,
                train_loss: f64::NAN,
                validation,
            }],
        });
    }
    let train_labels: Vec<bool> = split.train.iter().map(|&i| patients[i].label).collect();
    let hyper = cfg.adam();
    let mut params = init.clone();
    let mut opt = AdamState::new(&params);
    let mut best: Option<(EpochReport, EncoderParams)> = None;
    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut sampler_rng = rng::stream(cfg.seed, &format!("finetune-sampler-{epoch}"));
        let mut dropout_rng = rng::stream(cfg.seed, &format!("finetune-dropout-{epoch}"));
        let plan = stratified_batches(&train_labels, cfg.batch_size, &mut sampler_rng)?;
        let mut loss_sum = 0.0;
        for batch in &plan.batches {
            let members: Vec<&PatientInput> =
                batch.iter().map(|&j| &patients[split.train[j]]).collect();
            let mut grads = params.zeros_like();
            let drop = (params.config.dropout > 0.0).then_some(&mut dropout_rng);
            loss_sum += batch_loss(&params, &members, &mut grads, drop)?;
            grads.freeze_prefix(cfg.freeze_depth);
            adam_step(&mut params, &mut grads, &mut opt, &hyper)?;
        }
        let train_loss = loss_sum / plan.batches.len() as f64;
        let validation = validation_metrics(&params, patients, &split.validation, cfg.threshold)?;
        log::info!(
            "finetune epoch {epoch}: train loss {train_loss:.4}, validation AUC {:.4}, F1 {:.4}",
            validation.auc,
            validation.f1
        );
        let report = EpochReport {
            epoch,
            train_loss,
            validation,
        };
        if best
            .as_ref()
            .is_none_or(|(b, _)| better(&report, b, cfg.selection))
        {
            best = Some((report.clone(), params.clone()));
        }
        reports.push(report);
    }
    let (best_report, best_params) = best.expect("at least one epoch");
    Ok(FinetuneOutcome {
        params: best_params,
        best_epoch: best_report.epoch,
        epochs: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, EncoderConfig};
    use crate::tokenizer::encode_section_ids;
    use ndarray::array;

    #[test]
    fn max_pool_examples() {
        assert_eq!(max_pool(&[array![1.0, 4.0]]).unwrap(), array![1.0, 4.0]);
        assert_eq!(
            max_pool(&[array![1.0, 4.0], array![3.0, 2.0]]).unwrap(),
            array![3.0, 4.0]
        );
        assert!(max_pool(&[]).is_err());
        let (_, arg) = max_pool_argmax(&[array![1.0, 2.0], array![1.0, 5.0]]).unwrap();
        assert_eq!(arg, [0, 1]);
    }

    #[test]
    fn zero_classifier_predicts_half() {
        let mut p = init_params(&EncoderConfig::tiny(50), 1).unwrap();
        p.cls_w.fill(0.0);
        let patient = PatientInput {
            patient_id: "x".into(),
            sections: vec![encode_section_ids(vec![7, 8], 8)],
            label: true,
        };
        assert_eq!(predict_patient(&p, &patient).unwrap(), 0.5);
    }

    #[test]
    fn embedding_matches_forward_pooled() {
        let p = init_params(&EncoderConfig::tiny(50), 1).unwrap();
        let s = encode_section_ids(vec![7, 8, 9], 8);
        let out = crate::encoder::forward(&p, std::slice::from_ref(&s)).unwrap();
        assert_eq!(embed_section(&p, &s).unwrap(), out[0].pooled);
    }

    #[test]
    fn weight_examples() {
        assert_eq!(
            batch_weights(&[true, false, false, false]).unwrap(),
            (2.0, 2.0 / 3.0)
        );
        assert_eq!(
            batch_weights(&[true, true, false, false]).unwrap(),
            (1.0, 1.0)
        );
        assert!(batch_weights(&[false; 4]).is_err());
        let bce = weighted_bce(&[0.5; 4], &[true, true, false, false], (1.0, 1.0));
        assert!((bce - 2f64.ln()).abs() < 1e-15);
        assert!(weighted_bce(&[1.0, 0.0], &[true, false], (1.0, 1.0)) < 1e-11);
    }

    #[test]
    fn sampler_example() {
        let labels: Vec<bool> = (0..40).map(|i| i < 4).collect();
        let mut r = rng::from_seed(1);
        let plan = stratified_batches(&labels, 4, &mut r).unwrap();
        assert_eq!(plan.k, 1);
        assert_eq!(plan.batches.len(), 12);
        assert!(plan
            .batches
            .iter()
            .all(|b| b.iter().filter(|&&i| labels[i]).count() == 1));
        assert_eq!(cases_per_batch(4, 0.5), 2);
        assert!(stratified_batches(&[false; 8], 4, &mut r).is_err());
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let cfg = EncoderConfig::tiny(50);
        let p = init_params(&cfg, 3).unwrap();
        let mk = |ids: &[&[u32]], label| PatientInput {
            patient_id: String::new(),
            sections: ids
                .iter()
                .map(|s| encode_section_ids(s.to_vec(), 8))
                .collect(),
            label,
        };
        let patients = [
            mk(&[&[7, 8], &[9, 10, 11], &[7, 8]], true),
            mk(&[&[12], &[13, 14]], false),
            mk(&[&[15, 16, 17, 18]], false),
        ];
        let refs: Vec<&PatientInput> = patients.iter().collect();
        let mut g = p.zeros_like();
        batch_loss(&p, &refs, &mut g, None).unwrap();
        let h = 1e-6;
        let names = [
            "classifier.w",
            "pooler.w",
            "layer1.w2",
            "layer0.wq",
            "embeddings.tok",
        ];
        for name in names {
            let ti = p.tensors().iter().position(|t| t.name == name).unwrap();
            let len = p.tensors()[ti].data.len();
            for j in [0, len / 3, len - 1] {
                let mut up = p.clone();
                up.tensors_mut()[ti].data[j] += h;
                let mut dn = p.clone();
                dn.tensors_mut()[ti].data[j] -= h;
                let mut scratch = p.zeros_like();
                let fd = (batch_loss(&up, &refs, &mut scratch, None).unwrap()
                    - batch_loss(&dn, &refs, &mut scratch, None).unwrap())
                    / (2.0 * h);
                let a = g.tensors()[ti].data[j];
                assert!(
                    (a - fd).abs() <= 1e-5 * a.abs().max(fd.abs()) + 1e-9,
                    "{name}[{j}]: {a} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn epochs_zero_returns_init() {
        let cfg = EncoderConfig::tiny(50);
        let p = init_params(&cfg, 1).unwrap();
        let patients: Vec<PatientInput> = (0..20)
            .map(|i| PatientInput {
                patient_id: format!("p{i}"),
                sections: vec![encode_section_ids(vec![5 + i as u32], 8)],
                label: i % 2 == 0,
            })
            .collect();
        let split = SplitPlan {
            train: (0..12).collect(),
            validation: (12..16).collect(),
            test: (16..20).collect(),
        };
        let ft = FinetuneConfig {
            epochs: 0,
            ..FinetuneConfig::default()
        };
        let out = run_finetune(&patients, &split, &p, &ft).unwrap();
        assert_eq!(out.params, p);
        assert_eq!(out.best_epoch, 0);
    }
}
