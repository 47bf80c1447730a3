//! Masked-LM and next-sentence pretraining.
//!
//! Each step draws a batch of section pairs, masks the pair inputs, and
//! scores both tasks from the same forward pass.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    adam_step, backward, forward_seq, init_params, mlm_loss, nsp_loss, save_checkpoint, AdamHyper,
    AdamState, Checkpoint, EncoderConfig, EncoderParams, Gradients, OutputGrads,
};
use crate::error::{Error, Result};
use crate::rng;
use crate::tokenizer::{encode_pair_ids, tokenize, TokenSequence, Vocab, MASK_ID, N_SPECIAL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mask_fraction: f64,
    /// Fractions of selected positions replaced by `[MASK]`, by a random token, or kept.
    pub corrupt_split: [f64; 3],
    pub nsp_positive_fraction: f64,
    /// Write an intermediate checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            mask_fraction: 0.15,
            corrupt_split: [0.8, 0.1, 0.1],
            nsp_positive_fraction: 0.5,
            checkpoint_every: 500,
            clip_norm: Some(1.0),
            seed: 7,
        }
    }
}

impl PretrainConfig {
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push("pretrain.batch_size must be positive".into());
        }
        for (name, v) in [
            ("mask_fraction", self.mask_fraction),
            ("nsp_positive_fraction", self.nsp_positive_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                errs.push(format!("pretrain.{name} must be in [0, 1], got {v}"));
            }
        }
        if self.corrupt_split.iter().any(|v| !(0.0..=1.0).contains(v))
            || (self.corrupt_split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            errs.push(format!(
                "pretrain.corrupt_split must be three fractions summing to 1, got {:?}",
                self.corrupt_split
            ));
        }
        errs.extend(self.adam().validation_errors("pretrain"));
        errs
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            clip_norm: self.clip_norm,
            ..AdamHyper::default()
        }
    }

    pub fn masking(&self) -> MaskingConfig {
        MaskingConfig {
            mask_fraction: self.mask_fraction,
            corrupt_split: self.corrupt_split,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskingConfig {
    pub mask_fraction: f64,
    pub corrupt_split: [f64; 3],
}

impl Default for MaskingConfig {
    fn default() -> Self {
        PretrainConfig::default().masking()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlmInstance {
    pub input: TokenSequence,
    /// Original id at selected positions, -1 elsewhere.
    pub labels: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NspInstance {
    pub input: TokenSequence,
    pub is_next: bool,
}

/// Selects each content position with probability `mask_fraction` and
/// corrupts it per `corrupt_split`. Ids below the reserved range are never
/// selected.
pub fn make_mlm_instance(
    seq: &TokenSequence,
    vocab_size: usize,
    rng: &mut rng::Rng,
    cfg: &MaskingConfig,
) -> MlmInstance {
    let mut input = seq.clone();
    let mut labels = vec![-1i64; seq.ids.len()];
    let [p_mask, p_random, _] = cfg.corrupt_split;
    for t in 0..seq.ids.len() {
        let id = seq.ids[t];
        if seq.mask[t] == 0 || id < N_SPECIAL {
            continue;
        }
        if rng.random::<f64>() >= cfg.mask_fraction {
            continue;
        }
        labels[t] = i64::from(id);
        let u: f64 = rng.random();
        if u < p_mask {
            input.ids[t] = MASK_ID;
        } else if u < p_mask + p_random {
            input.ids[t] = rng.random_range(N_SPECIAL..vocab_size as u32);
        }
    }
    MlmInstance { input, labels }
}

/// Sections of each note, already tokenized.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedCorpus {
    pub notes: Vec<Vec<Vec<u32>>>,
}

impl TokenizedCorpus {
    pub fn new<S: AsRef<str>>(notes: &[Vec<S>], vocab: &Vocab) -> Self {
        Self {
            notes: notes
                .iter()
                .map(|n| n.iter().map(|s| tokenize(s.as_ref(), vocab)).collect())
                .collect(),
        }
    }

    pub fn n_sections(&self) -> usize {
        self.notes.iter().map(Vec::len).sum()
    }
}

/// Draws `count` pairs; each is a true adjacent pair with probability
/// `positive_fraction`, otherwise its second half comes from another note.
pub fn make_nsp_pairs(
    corpus: &TokenizedCorpus,
    count: usize,
    positive_fraction: f64,
    max_len: usize,
    rng: &mut rng::Rng,
) -> Result<Vec<NspInstance>> {
    let multi: Vec<usize> = (0..corpus.notes.len())
        .filter(|&i| corpus.notes[i].len() >= 2)
        .collect();
    let nonempty: Vec<usize> = (0..corpus.notes.len())
        .filter(|&i| !corpus.notes[i].is_empty())
        .collect();
    if nonempty.len() < 2 {
        return Err(Error::input(
            "next-sentence pairs need at least two non-empty notes",
        ));
    }
    if multi.is_empty() {
        return Err(Error::input(
            "next-sentence pairs need a note with at least two sections",
        ));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let note = *multi.choose(rng).expect("nonempty");
        let sections = &corpus.notes[note];
        let i = rng.random_range(0..sections.len() - 1);
        let is_next = rng.random::<f64>() < positive_fraction;
        let second = if is_next {
            &sections[i + 1]
        } else {
            let other = loop {
                let o = *nonempty.choose(rng).expect("nonempty");
                if o != note {
                    break o;
                }
            };
            corpus.notes[other].choose(rng).expect("nonempty")
        };
        out.push(NspInstance {
            input: encode_pair_ids(&sections[i], second, max_len),
            is_next,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct PretrainLoss {
    pub loss: f64,
    pub mlm: f64,
    pub nsp: f64,
    pub n_masked: usize,
    pub grads: Gradients,
}

/// Mean MLM cross-entropy over labeled positions plus mean NSP
/// cross-entropy. `mlm[i]` must be the masked form of `nsp[i]`; both are
/// scored from one forward pass over `mlm[i].input`.
pub fn pretrain_loss(
    params: &EncoderParams,
    mlm: &[MlmInstance],
    nsp: &[NspInstance],
) -> Result<PretrainLoss> {
    if mlm.len() != nsp.len() || mlm.is_empty() {
        return Err(Error::contract(format!(
            "pretrain batch needs matching non-empty MLM and NSP halves, got {} and {}",
            mlm.len(),
            nsp.len()
        )));
    }
    for (m, n) in mlm.iter().zip(nsp) {
        if m.input.segment_ids != n.input.segment_ids || m.input.mask != n.input.mask {
            return Err(Error::contract(
                "MLM instance is not a masked form of its NSP pair",
            ));
        }
    }
    let n_masked: usize = mlm
        .iter()
        .map(|m| m.labels.iter().filter(|&&y| y >= 0).count())
        .sum();
    if n_masked == 0 {
        log::warn!("pretraining batch has no masked positions; MLM term is 0");
    }
    let mlm_scale = if n_masked > 0 {
        1.0 / n_masked as f64
    } else {
        0.0
    };
    let nsp_scale = 1.0 / nsp.len() as f64;
    let mut grads = params.zeros_like();
    let (mut mlm_sum, mut nsp_sum) = (0.0, 0.0);
    for (m, n) in mlm.iter().zip(nsp) {
        let cache = forward_seq(params, &m.input, None)?;
        let ml = mlm_loss(
            params,
            cache.hidden.view(),
            &m.labels,
            mlm_scale,
            &mut grads,
        )?;
        let nl = nsp_loss(
            params,
            cache.pooled.view(),
            n.is_next,
            nsp_scale,
            &mut grads,
        );
        mlm_sum += ml.loss_sum;
        nsp_sum += nl.loss;
        let up = OutputGrads {
            d_hidden: Some(ml.d_hidden),
            d_pooled: Some(nl.d_pooled),
        };
        backward(params, &cache, &up, &mut grads)?;
    }
    let mlm_mean = mlm_sum * mlm_scale;
    let nsp_mean = nsp_sum * nsp_scale;
    Ok(PretrainLoss {
        loss: mlm_mean + nsp_mean,
        mlm: mlm_mean,
        nsp: nsp_mean,
        n_masked,
        grads,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub mlm: f64,
    pub nsp: f64,
}

pub fn loss_curve_csv(curve: &[LossPoint]) -> String {
    let mut s = String::from("step,loss,mlm,nsp\n");
    for p in curve {
        let _ = writeln!(s, "{},{},{},{}", p.step, p.loss, p.mlm, p.nsp);
    }
    s
}

pub fn parse_loss_curve(text: &str) -> Result<Vec<LossPoint>> {
    let mut lines = text.lines();
    if lines.next() != Some("step,loss,mlm,nsp") {
        return Err(Error::format("loss curve", "missing header"));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::format("loss curve", format!("bad row {l:?}")))
            };
            Ok(LossPoint {
                step: f[0]
                    .parse()
                    .map_err(|_| Error::format("loss curve", format!("bad row {l:?}")))?,
                loss: num(1)?,
                mlm: num(2)?,
                nsp: num(3)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: EncoderParams,
    pub optimizer: AdamState,
    pub curve: Vec<LossPoint>,
    /// Checkpoint files written, in order; the last is the final model.
    pub checkpoints: Vec<PathBuf>,
}

pub fn step_checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("step-{step:06}.ckpt"))
}

pub fn final_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("pretrained.ckpt")
}

/// Trains from a fresh initialization. When `out_dir` is given, writes the
/// loss curve, periodic checkpoints, and the final checkpoint there.
pub fn run_pretraining(
    corpus: &TokenizedCorpus,
    encoder: &EncoderConfig,
    cfg: &PretrainConfig,
    out_dir: Option<&Path>,
) -> Result<PretrainOutcome> {
    let mut errs = encoder.validation_errors();
    errs.extend(cfg.validation_errors());
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let mut params = init_params(encoder, cfg.seed)?;
    let mut opt = AdamState::new(&params);
    let hyper = cfg.adam();
    let masking = cfg.masking();
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut checkpoints = Vec::new();
    let save =
        |params: &EncoderParams, opt: &AdamState, path: PathBuf, step: usize| -> Result<PathBuf> {
            let ck = Checkpoint {
                params: params.clone(),
                optimizer: Some(opt.clone()),
                meta: vec![
                    ("stage".into(), "pretrain".into()),
                    ("step".into(), step.to_string()),
                ],
            };
            save_checkpoint(&ck, &path)?;
            Ok(path)
        };
    for step in 1..=cfg.steps {
        let mut r = rng::stream(cfg.seed, &format!("pretrain-step-{step}"));
        let nsp = make_nsp_pairs(
            corpus,
            cfg.batch_size,
            cfg.nsp_positive_fraction,
            encoder.max_len,
            &mut r,
        )?;
        let mlm: Vec<MlmInstance> = nsp
            .iter()
            .map(|n| make_mlm_instance(&n.input, encoder.vocab_size, &mut r, &masking))
            .collect();
        let mut out = pretrain_loss(&params, &mlm, &nsp)?;
        if !out.loss.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("non-finite loss {}", out.loss),
            });
        }
        adam_step(&mut params, &mut out.grads, &mut opt, &hyper)?;
        curve.push(LossPoint {
            step,
            loss: out.loss,
            mlm: out.mlm,
            nsp: out.nsp,
        });
        if step % 100 == 0 {
            log::info!(
                "pretrain step {step}: loss {:.4} (mlm {:.4}, nsp {:.4})",
                out.loss,
                out.mlm,
                out.nsp
            );
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps {
                checkpoints.push(save(&params, &opt, step_checkpoint_path(dir, step), step)?);
            }
        }
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let loss_path = dir.join("loss.csv");
        fs::write(&loss_path, loss_curve_csv(&curve))
            .map_err(|e| Error::io(format!("writing {}", loss_path.display()), e))?;
        checkpoints.push(save(&params, &opt, final_checkpoint_path(dir), cfg.steps)?);
    }
    Ok(PretrainOutcome {
        params,
        optimizer: opt,
        curve,
        checkpoints,
    })
}

/// Mean of `f` over the first and last `window` points of a curve.
pub fn leading_trailing_means(
    curve: &[LossPoint],
    window: usize,
    f: impl Fn(&LossPoint) -> f64,
) -> Option<(f64, f64)> {
    if curve.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(curve.len());
    let mean = |s: &[LossPoint]| s.iter().map(&f).sum::<f64>() / s.len() as f64;
    Some((mean(&curve[..w]), mean(&curve[curve.len() - w..])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::load_checkpoint;
    use crate::tokenizer::{encode_section_ids, CLS_ID, SEP_ID};

    fn seq_of(body: &[u32], max_len: usize) -> TokenSequence {
        encode_section_ids(body.to_vec(), max_len)
    }

    #[test]
    fn specials_only_sequence_is_never_selected() {
        let s = seq_of(&[], 8);
        let mut r = rng::from_seed(1);
        let cfg = MaskingConfig {
            mask_fraction: 1.0,
            corrupt_split: [1.0, 0.0, 0.0],
        };
        let m = make_mlm_instance(&s, 50, &mut r, &cfg);
        assert!(m.labels.iter().all(|&y| y == -1));
        assert_eq!(m.input, s);
    }

    #[test]
    fn full_masking_replaces_every_content_token() {
        let s = seq_of(&[9, 10, 11], 8);
        let mut r = rng::from_seed(1);
        let cfg = MaskingConfig {
            mask_fraction: 1.0,
            corrupt_split: [1.0, 0.0, 0.0],
        };
        let m = make_mlm_instance(&s, 50, &mut r, &cfg);
        assert_eq!(
            &m.input.ids[..5],
            &[CLS_ID, MASK_ID, MASK_ID, MASK_ID, SEP_ID]
        );
        assert_eq!(&m.labels[..5], &[-1, 9, 10, 11, -1]);
    }

    #[test]
    fn masking_frequencies() {
        let s = seq_of(&[20; 30], 32);
        let mut r = rng::from_seed(3);
        let cfg = MaskingConfig::default();
        let (mut positions, mut selected, mut masked, mut random, mut kept) = (0, 0, 0, 0, 0);
        while positions < 100_000 {
            let m = make_mlm_instance(&s, 50, &mut r, &cfg);
            positions += 30;
            for t in 1..31 {
                if m.labels[t] >= 0 {
                    selected += 1;
                    match m.input.ids[t] {
                        MASK_ID => masked += 1,
                        20 => kept += 1,
                        _ => random += 1,
                    }
                }
            }
        }
        let rate = selected as f64 / positions as f64;
        assert!((rate - 0.15).abs() < 0.01, "{rate}");
        let f = |c: usize| c as f64 / selected as f64;
        // A random replacement can hit the original id, 1 in 45 times.
        assert!((f(masked) - 0.8).abs() < 0.02);
        assert!((f(random) - 0.1 * 44.0 / 45.0).abs() < 0.02);
        assert!((f(kept) - (0.1 + 0.1 / 45.0)).abs() < 0.02);
    }

    fn corpus() -> TokenizedCorpus {
        TokenizedCorpus {
            notes: vec![
                vec![vec![10, 11], vec![12, 13], vec![14]],
                vec![vec![20, 21], vec![22]],
            ],
        }
    }

    #[test]
    fn nsp_negatives_cross_notes() {
        let c = corpus();
        let mut r = rng::from_seed(5);
        let pairs = make_nsp_pairs(&c, 10_000, 0.5, 16, &mut r).unwrap();
        let pos = pairs.iter().filter(|p| p.is_next).count() as f64 / pairs.len() as f64;
        assert!((pos - 0.5).abs() < 0.02);
        for p in &pairs {
            let a_first = p.input.ids[1];
            let b_start = p.input.segment_ids.iter().position(|&s| s == 1).unwrap();
            let b_first = p.input.ids[b_start];
            let same_note = (a_first < 20) == (b_first < 20);
            assert_eq!(same_note, p.is_next, "{p:?}");
        }
    }

    #[test]
    fn nsp_rejects_tiny_corpus() {
        let mut r = rng::from_seed(5);
        let single = TokenizedCorpus {
            notes: vec![vec![vec![10]], vec![vec![11]]],
        };
        assert!(make_nsp_pairs(&single, 4, 0.5, 16, &mut r).is_err());
        let one_note = TokenizedCorpus {
            notes: vec![vec![vec![10], vec![11]]],
        };
        assert!(make_nsp_pairs(&one_note, 4, 0.5, 16, &mut r).is_err());
    }

    #[test]
    fn unlabeled_positions_do_not_affect_loss() {
        let cfg = EncoderConfig::tiny(50);
        let p = init_params(&cfg, 2).unwrap();
        let mut r = rng::from_seed(8);
        let hidden = ndarray::Array2::from_shape_fn((6, 16), |_| r.random::<f64>() - 0.5);
        let labels = [-1, 7, -1, 30, -1, -1, -1, -1];
        let mut g = p.zeros_like();
        let a = mlm_loss(&p, hidden.view(), &labels, 1.0, &mut g).unwrap();
        let mut h2 = hidden.clone();
        h2.row_mut(2).fill(3.0);
        h2.row_mut(5).fill(-1.0);
        let b = mlm_loss(&p, h2.view(), &labels, 1.0, &mut g).unwrap();
        assert_eq!(a.loss_sum, b.loss_sum);
        assert_eq!(a.count, 2);
        assert!(a.d_hidden.row(2).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn untrained_losses_match_uniform_values() {
        let cfg = EncoderConfig {
            vocab_size: 300,
            ..EncoderConfig::default()
        };
        let p = init_params(&cfg, 11).unwrap();
        let notes: Vec<Vec<Vec<u32>>> = (0..20)
            .map(|i| {
                (0..3)
                    .map(|j| {
                        (0..10)
                            .map(|k| 5 + ((i * 31 + j * 7 + k * 13) % 295) as u32)
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let c = TokenizedCorpus { notes };
        let mut r = rng::from_seed(1);
        let nsp = make_nsp_pairs(&c, 16, 0.5, 32, &mut r).unwrap();
        let mlm: Vec<_> = nsp
            .iter()
            .map(|n| make_mlm_instance(&n.input, 300, &mut r, &MaskingConfig::default()))
            .collect();
        let l = pretrain_loss(&p, &mlm, &nsp).unwrap();
        assert!((l.mlm / (300f64).ln() - 1.0).abs() < 0.05, "{}", l.mlm);
        assert!((l.nsp / 2f64.ln() - 1.0).abs() < 0.05, "{}", l.nsp);
    }

    #[test]
    fn zero_steps_writes_init_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let enc = EncoderConfig::tiny(50);
        let cfg = PretrainConfig {
            steps: 0,
            ..PretrainConfig::default()
        };
        let out = run_pretraining(&corpus(), &enc, &cfg, Some(dir.path())).unwrap();
        let ck = load_checkpoint(out.checkpoints.last().unwrap()).unwrap();
        assert_eq!(ck.params, init_params(&enc, cfg.seed).unwrap());
        assert!(out.curve.is_empty());
    }

    #[test]
    fn short_run_is_deterministic() {
        let enc = EncoderConfig::tiny(50);
        let cfg = PretrainConfig {
            steps: 20,
            batch_size: 4,
            ..PretrainConfig::default()
        };
        let a = run_pretraining(&corpus(), &enc, &cfg, None).unwrap();
        let b = run_pretraining(&corpus(), &enc, &cfg, None).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.params, b.params);
        let text = loss_curve_csv(&a.curve);
        assert_eq!(parse_loss_curve(&text).unwrap(), a.curve);
    }
}
