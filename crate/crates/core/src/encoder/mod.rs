//! Compact BERT-style encoder with hand-written backward pass.
//!
//! Everything is computed in `f64`. With [`Precision::F32`] the parameters and
//! optimizer moments are rounded to `f32`-representable values after every
//! update, and checkpoints store them as little-endian `f32`.
//!
//! Each sequence is processed over its non-pad prefix only; pad positions are
//! excluded from attention as keys and their output rows are zero.

mod adam;
mod checkpoint;
mod forward;
mod gradcheck;
mod heads;
mod math;

pub use adam::{adam_step, clip_global_norm, global_norm, AdamHyper, AdamState};
pub use checkpoint::{
    blob_path, decode as decode_checkpoint, encode as encode_checkpoint, load_checkpoint,
    load_checkpoint_for, save_checkpoint, Checkpoint,
};
pub use forward::{backward, forward, forward_seq, EncoderOutput, OutputGrads, SeqCache};
pub use gradcheck::{
    gradient_check, gradient_check_with, GradCheckOptions, GradCheckReport, ParamCheck,
};
pub use heads::{
    classifier_backward, classifier_logit, mlm_loss, nsp_loss, sigmoid, MlmLoss, NspLoss,
};
pub use math::{gelu, gelu_grad, layer_norm, LN_EPS};

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub precision: Precision,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2048,
            max_len: 32,
            hidden: 64,
            layers: 2,
            heads: 2,
            ffn: 256,
            dropout: 0.0,
            precision: Precision::F64,
        }
    }
}

impl EncoderConfig {
    /// The configuration used for gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            max_len: 8,
            hidden: 16,
            layers: 2,
            heads: 2,
            ffn: 32,
            dropout: 0.0,
            precision: Precision::F64,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.vocab_size <= crate::tokenizer::N_SPECIAL as usize {
            errs.push(format!(
                "encoder.vocab_size must exceed the 5 reserved tokens, got {}",
                self.vocab_size
            ));
        }
        if self.max_len < 2 {
            errs.push(format!(
                "encoder.max_len must be >= 2, got {}",
                self.max_len
            ));
        }
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            errs.push(format!(
                "encoder.hidden ({}) must be a positive multiple of encoder.heads ({})",
                self.hidden, self.heads
            ));
        }
        if self.ffn == 0 {
            errs.push("encoder.ffn must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!(
                "encoder.dropout must be in [0, 1), got {}",
                self.dropout
            ));
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.validation_errors();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
}

/// All trainable weights. The same type doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub seg_emb: Array2<f64>,
    pub emb_ln_g: Array1<f64>,
    pub emb_ln_b: Array1<f64>,
    pub layers: Vec<LayerParams>,
    pub pool_w: Array2<f64>,
    pub pool_b: Array1<f64>,
    /// MLM transform; the decoder reuses `tok_emb`.
    pub mlm_w: Array2<f64>,
    pub mlm_b: Array1<f64>,
    pub mlm_ln_g: Array1<f64>,
    pub mlm_ln_b: Array1<f64>,
    pub mlm_bias: Array1<f64>,
    pub nsp_w: Array2<f64>,
    pub nsp_b: Array1<f64>,
    pub cls_w: Array1<f64>,
    pub cls_b: Array1<f64>,
}

pub type Gradients = EncoderParams;

/// Parameter family, used to report gradient-check coverage.
pub fn family(name: &str) -> &'static str {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    if name.starts_with("embeddings.") && !leaf.starts_with("ln") {
        "embedding"
    } else if leaf.starts_with("ln") || name.contains("ln_") {
        "layer-norm"
    } else if name.starts_with("layer") && (leaf.starts_with('w') || leaf.starts_with('b')) {
        if leaf.ends_with('1') || leaf.ends_with('2') {
            "ffn"
        } else {
            "attention"
        }
    } else {
        "head"
    }
}

/// A named flat view of one parameter tensor.
pub struct TensorView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorViewMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
}

impl EncoderParams {
    /// All tensors in canonical order.
    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = Vec::new();
        macro_rules! m {
            ($name:expr, $a:expr) => {
                out.push(TensorView {
                    name: $name.to_string(),
                    shape: $a.shape().to_vec(),
                    data: $a.as_slice().expect("standard layout"),
                })
            };
        }
        m!("embeddings.tok", self.tok_emb);
        m!("embeddings.pos", self.pos_emb);
        m!("embeddings.seg", self.seg_emb);
        m!("embeddings.ln_g", self.emb_ln_g);
        m!("embeddings.ln_b", self.emb_ln_b);
        for (i, l) in self.layers.iter().enumerate() {
            m!(format!("layer{i}.wq"), l.wq);
            m!(format!("layer{i}.bq"), l.bq);
            m!(format!("layer{i}.wk"), l.wk);
            m!(format!("layer{i}.bk"), l.bk);
            m!(format!("layer{i}.wv"), l.wv);
            m!(format!("layer{i}.bv"), l.bv);
            m!(format!("layer{i}.wo"), l.wo);
            m!(format!("layer{i}.bo"), l.bo);
            m!(format!("layer{i}.ln1_g"), l.ln1_g);
            m!(format!("layer{i}.ln1_b"), l.ln1_b);
            m!(format!("layer{i}.w1"), l.w1);
            m!(format!("layer{i}.b1"), l.b1);
            m!(format!("layer{i}.w2"), l.w2);
            m!(format!("layer{i}.b2"), l.b2);
            m!(format!("layer{i}.ln2_g"), l.ln2_g);
            m!(format!("layer{i}.ln2_b"), l.ln2_b);
        }
        m!("pooler.w", self.pool_w);
        m!("pooler.b", self.pool_b);
        m!("mlm.w", self.mlm_w);
        m!("mlm.b", self.mlm_b);
        m!("mlm.ln_g", self.mlm_ln_g);
        m!("mlm.ln_b", self.mlm_ln_b);
        m!("mlm.bias", self.mlm_bias);
        m!("nsp.w", self.nsp_w);
        m!("nsp.b", self.nsp_b);
        m!("classifier.w", self.cls_w);
        m!("classifier.b", self.cls_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        let mut out = Vec::new();
        macro_rules! m {
            ($name:expr, $a:expr) => {
                out.push(TensorViewMut {
                    name: $name.to_string(),
                    data: $a.as_slice_mut().expect("standard layout"),
                })
            };
        }
        m!("embeddings.tok", self.tok_emb);
        m!("embeddings.pos", self.pos_emb);
        m!("embeddings.seg", self.seg_emb);
        m!("embeddings.ln_g", self.emb_ln_g);
        m!("embeddings.ln_b", self.emb_ln_b);
        for (i, l) in self.layers.iter_mut().enumerate() {
            m!(format!("layer{i}.wq"), l.wq);
            m!(format!("layer{i}.bq"), l.bq);
            m!(format!("layer{i}.wk"), l.wk);
            m!(format!("layer{i}.bk"), l.bk);
            m!(format!("layer{i}.wv"), l.wv);
            m!(format!("layer{i}.bv"), l.bv);
            m!(format!("layer{i}.wo"), l.wo);
            m!(format!("layer{i}.bo"), l.bo);
            m!(format!("layer{i}.ln1_g"), l.ln1_g);
            m!(format!("layer{i}.ln1_b"), l.ln1_b);
            m!(format!("layer{i}.w1"), l.w1);
            m!(format!("layer{i}.b1"), l.b1);
            m!(format!("layer{i}.w2"), l.w2);
            m!(format!("layer{i}.b2"), l.b2);
            m!(format!("layer{i}.ln2_g"), l.ln2_g);
            m!(format!("layer{i}.ln2_b"), l.ln2_b);
        }
        m!("pooler.w", self.pool_w);
        m!("pooler.b", self.pool_b);
        m!("mlm.w", self.mlm_w);
        m!("mlm.b", self.mlm_b);
        m!("mlm.ln_g", self.mlm_ln_g);
        m!("mlm.ln_b", self.mlm_ln_b);
        m!("mlm.bias", self.mlm_bias);
        m!("nsp.w", self.nsp_w);
        m!("nsp.b", self.nsp_b);
        m!("classifier.w", self.cls_w);
        m!("classifier.b", self.cls_b);
        out
    }

    /// Every parameter set to `value`, with this model's shapes.
    pub fn filled(config: &EncoderConfig, value: f64) -> Self {
        let (v, l, h, f) = (config.vocab_size, config.max_len, config.hidden, config.ffn);
        let m2 = |r, c| Array2::from_elem((r, c), value);
        let m1 = |n| Array1::from_elem(n, value);
        let layer = || LayerParams {
            wq: m2(h, h),
            bq: m1(h),
            wk: m2(h, h),
            bk: m1(h),
            wv: m2(h, h),
            bv: m1(h),
            wo: m2(h, h),
            bo: m1(h),
            ln1_g: m1(h),
            ln1_b: m1(h),
            w1: m2(h, f),
            b1: m1(f),
            w2: m2(f, h),
            b2: m1(h),
            ln2_g: m1(h),
            ln2_b: m1(h),
        };
        Self {
            config: config.clone(),
            tok_emb: m2(v, h),
            pos_emb: m2(l, h),
            seg_emb: m2(2, h),
            emb_ln_g: m1(h),
            emb_ln_b: m1(h),
            layers: (0..config.layers).map(|_| layer()).collect(),
            pool_w: m2(h, h),
            pool_b: m1(h),
            mlm_w: m2(h, h),
            mlm_b: m1(h),
            mlm_ln_g: m1(h),
            mlm_ln_b: m1(h),
            mlm_bias: m1(v),
            nsp_w: m2(h, 2),
            nsp_b: m1(2),
            cls_w: m1(h),
            cls_b: m1(1),
        }
    }

    pub fn zeros(config: &EncoderConfig) -> Self {
        Self::filled(config, 0.0)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Round every value to the configured storage precision.
    pub fn round_to_precision(&mut self) {
        let p = self.config.precision;
        if p == Precision::F64 {
            return;
        }
        for t in self.tensors_mut() {
            for x in t.data.iter_mut() {
                *x = p.round(*x);
            }
        }
    }

    /// `self += other` elementwise.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            for x in t.data.iter_mut() {
                *x *= s;
            }
        }
    }

    /// Zero the gradients of embeddings and the first `depth` layers.
    pub fn freeze_prefix(&mut self, depth: usize) {
        if depth == 0 {
            return;
        }
        let prefixes: Vec<String> = (0..depth.min(self.config.layers))
            .map(|i| format!("layer{i}."))
            .collect();
        for t in self.tensors_mut() {
            let frozen = t.name.starts_with("embeddings.")
                || prefixes.iter().any(|p| t.name.starts_with(p.as_str()));
            if frozen {
                t.data.fill(0.0);
            }
        }
    }
}

/// Truncated-normal (2σ) weights, zero biases, unit layer-norm scales.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = rng::stream(seed, "encoder-init");
    let mut params = EncoderParams::zeros(config);
    for t in params.tensors_mut() {
        let leaf = t.name.rsplit('.').next().unwrap_or("");
        let is_ln_scale = leaf.starts_with("ln") && leaf.ends_with("_g");
        let is_weight =
            t.name.starts_with("embeddings.") && !leaf.starts_with("ln") || leaf.starts_with('w');
        if is_ln_scale {
            t.data.fill(1.0);
        } else if is_weight {
            for x in t.data.iter_mut() {
                *x = loop {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    if z.abs() <= 2.0 {
                        break z * INIT_STD;
                    }
                };
            }
        }
    }
    params.round_to_precision();
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_layout() {
        let cfg = EncoderConfig {
            vocab_size: 200,
            ..EncoderConfig::default()
        };
        let p = init_params(&cfg, 1).unwrap();
        assert!(p.layers.iter().all(|l| l.ln1_g.iter().all(|&g| g == 1.0)));
        assert!(p.emb_ln_g.iter().all(|&g| g == 1.0));
        assert!(p.layers[0].bq.iter().all(|&b| b == 0.0));
        assert!(p.mlm_bias.iter().all(|&b| b == 0.0));
        assert_eq!(p, init_params(&cfg, 1).unwrap());
        assert_ne!(p, init_params(&cfg, 2).unwrap());
    }

    #[test]
    fn init_std_near_target() {
        let cfg = EncoderConfig {
            vocab_size: 200,
            ..EncoderConfig::default()
        };
        let p = init_params(&cfg, 3).unwrap();
        let w = p.layers[0].w1.as_slice().unwrap();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!((std - INIT_STD).abs() / INIT_STD < 0.15, "std {std}");
        assert!(w.iter().all(|x| x.abs() <= 2.0 * INIT_STD));
    }

    #[test]
    fn config_validation() {
        let bad = EncoderConfig {
            hidden: 10,
            heads: 3,
            max_len: 1,
            ..EncoderConfig::default()
        };
        assert_eq!(bad.validation_errors().len(), 2);
        assert!(init_params(&bad, 0).is_err());
    }

    #[test]
    fn f32_precision_rounds() {
        let cfg = EncoderConfig {
            vocab_size: 50,
            precision: Precision::F32,
            ..EncoderConfig::tiny(50)
        };
        let p = init_params(&cfg, 0).unwrap();
        assert!(p.tok_emb.iter().all(|&x| x == x as f32 as f64));
    }

    #[test]
    fn mutable_and_shared_views_agree() {
        let mut p = EncoderParams::zeros(&EncoderConfig::tiny(20));
        let names: Vec<String> = p.tensors().into_iter().map(|t| t.name).collect();
        let lens: Vec<usize> = p.tensors().iter().map(|t| t.data.len()).collect();
        let mut_views: Vec<(String, usize)> = p
            .tensors_mut()
            .into_iter()
            .map(|t| (t.name, t.data.len()))
            .collect();
        assert_eq!(mut_views, names.into_iter().zip(lens).collect::<Vec<_>>());
    }

    #[test]
    fn families_cover_all_tensors() {
        let p = EncoderParams::zeros(&EncoderConfig::tiny(20));
        let fams: std::collections::BTreeSet<_> =
            p.tensors().iter().map(|t| family(&t.name)).collect();
        assert_eq!(
            fams.into_iter().collect::<Vec<_>>(),
            ["attention", "embedding", "ffn", "head", "layer-norm"]
        );
        assert_eq!(family("layer0.ln1_g"), "layer-norm");
        assert_eq!(family("layer1.w2"), "ffn");
        assert_eq!(family("layer1.bo"), "attention");
        assert_eq!(family("mlm.ln_g"), "layer-norm");
        assert_eq!(family("embeddings.ln_b"), "layer-norm");
        assert_eq!(family("embeddings.seg"), "embedding");
    }
}
