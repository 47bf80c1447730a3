use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array1;
use rand::Rng as _;

use super::heads::{classifier_backward, classifier_logit, mlm_loss, nsp_loss, sigmoid};
use super::{
    backward, family, forward_seq, init_params, EncoderConfig, EncoderParams, Gradients,
    OutputGrads, Precision,
};
use crate::error::{Error, Result};
use crate::rng;
use crate::tokenizer::{TokenSequence, CLS_ID, N_SPECIAL, SEP_ID};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    /// Minimum number of sampled scalars; spread evenly over all tensors.
    pub n_samples: usize,
    pub step: f64,
    /// Denominator floor for the relative error, so gradients that are
    /// numerically zero compare on absolute difference.
    pub floor: f64,
    pub seed: u64,
    /// Applied to the analytic gradients before comparison (negative controls).
    pub corrupt: Option<fn(&mut Gradients)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            n_samples: 240,
            step: 1e-5,
            floor: 1e-6,
            seed: 17,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub index: usize,
    pub family: &'static str,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl fmt::Display for ParamCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}[{}] analytic={:.9e} numeric={:.9e} rel_error={:.3e}",
            self.name, self.index, self.analytic, self.numeric, self.rel_error
        )
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub checks: Vec<ParamCheck>,
    pub worst: ParamCheck,
    /// Number of checked scalars per parameter family.
    pub families: BTreeMap<&'static str, usize>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst.rel_error < self.tolerance
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.checks
            .iter()
            .filter(move |c| !(c.rel_error < self.tolerance))
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} parameters checked, tolerance {:e}: {}",
            self.checks.len(),
            self.tolerance,
            if self.passed() { "pass" } else { "FAIL" }
        )?;
        for (fam, n) in &self.families {
            writeln!(f, "  {fam}: {n}")?;
        }
        write!(f, "  worst: {}", self.worst)
    }
}

struct Probe {
    seqs: Vec<TokenSequence>,
    mlm_labels: Vec<Vec<i64>>,
    is_next: Vec<bool>,
    targets: Vec<f64>,
}

fn make_probe(cfg: &EncoderConfig, seed: u64) -> Probe {
    let mut rng = rng::stream(seed, "gradcheck-data");
    let len = cfg.max_len;
    let lens = [len, len - 2, (len / 2).max(2)];
    let mut probe = Probe {
        seqs: Vec::new(),
        mlm_labels: Vec::new(),
        is_next: Vec::new(),
        targets: Vec::new(),
    };
    for (i, &n) in lens.iter().enumerate() {
        let mut ids = vec![0u32; len];
        let mut segs = vec![0u8; len];
        let mut mask = vec![0u8; len];
        ids[0] = CLS_ID;
        for t in 1..n {
            ids[t] = rng.random_range(N_SPECIAL..cfg.vocab_size as u32);
        }
        ids[n - 1] = SEP_ID;
        if i == 0 && n >= 4 {
            ids[n / 2] = SEP_ID;
            segs[n / 2 + 1..n].fill(1);
        }
        mask[..n].fill(1);
        let mut labels = vec![-1i64; len];
        for t in [1, n - 2].into_iter().filter(|&t| t > 0) {
            labels[t] = rng.random_range(N_SPECIAL as i64..cfg.vocab_size as i64);
        }
        probe.seqs.push(TokenSequence {
            ids,
            segment_ids: segs,
            mask,
        });
        probe.mlm_labels.push(labels);
        probe.is_next.push(i % 2 == 0);
        probe.targets.push(if i == 1 { 1.0 } else { 0.0 });
    }
    probe
}

/// Mean MLM loss + mean NSP loss + mean BCE of the classifier head. When
/// `grads` is given, accumulates the exact gradient of that sum.
fn probe_loss(
    params: &EncoderParams,
    probe: &Probe,
    mut grads: Option<&mut Gradients>,
) -> Result<f64> {
    let b = probe.seqs.len() as f64;
    let n_mlm: usize = probe
        .mlm_labels
        .iter()
        .map(|l| l.iter().filter(|&&y| y >= 0).count())
        .sum();
    let mut scratch = params.zeros_like();
    let mut total = 0.0;
    for (i, seq) in probe.seqs.iter().enumerate() {
        let cache = forward_seq(params, seq, None)?;
        let g = grads.as_deref_mut().unwrap_or(&mut scratch);
        let mlm = mlm_loss(
            params,
            cache.hidden.view(),
            &probe.mlm_labels[i],
            1.0 / n_mlm as f64,
            g,
        )?;
        let nsp = nsp_loss(params, cache.pooled.view(), probe.is_next[i], 1.0 / b, g);
        let z = classifier_logit(params, cache.pooled.view());
        let y = probe.targets[i];
        let p = sigmoid(z);
        let bce = -(y * p.max(1e-300).ln() + (1.0 - y) * (1.0 - p).max(1e-300).ln());
        let d_cls: Array1<f64> = classifier_backward(params, cache.pooled.view(), (p - y) / b, g);
        total += mlm.loss_sum / n_mlm as f64 + nsp.loss / b + bce / b;
        if grads.is_some() {
            let up = OutputGrads {
                d_hidden: Some(mlm.d_hidden),
                d_pooled: Some(nsp.d_pooled + d_cls),
            };
            backward(params, &cache, &up, grads.as_deref_mut().expect("checked"))?;
        }
    }
    Ok(total)
}

pub fn gradient_check(config: &EncoderConfig, tolerance: f64) -> Result<GradCheckReport> {
    gradient_check_with(
        config,
        &GradCheckOptions {
            tolerance,
            ..GradCheckOptions::default()
        },
    )
}

/// Central finite differences against the analytic backward pass on a
/// fixed probe batch that exercises every head.
pub fn gradient_check_with(
    config: &EncoderConfig,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if config.precision != Precision::F64 {
        return Err(Error::config("gradient check requires 64-bit precision"));
    }
    if config.dropout != 0.0 {
        return Err(Error::config("gradient check requires dropout = 0"));
    }
    let params = init_params(config, opts.seed)?;
    let probe = make_probe(config, opts.seed);
    let mut analytic = params.zeros_like();
    probe_loss(&params, &probe, Some(&mut analytic))?;
    if let Some(corrupt) = opts.corrupt {
        corrupt(&mut analytic);
    }

    let mut rng = rng::stream(opts.seed, "gradcheck-sample");
    let views = params.tensors();
    let per_tensor = opts.n_samples.div_ceil(views.len()).max(1);
    let mut picks: Vec<(usize, usize)> = Vec::new();
    for (ti, t) in views.iter().enumerate() {
        let take = per_tensor.min(t.data.len());
        let mut chosen: Vec<usize> =
            rand::seq::index::sample(&mut rng, t.data.len(), take).into_vec();
        chosen.sort_unstable();
        picks.extend(chosen.into_iter().map(|j| (ti, j)));
    }
    let names: Vec<String> = views.iter().map(|t| t.name.clone()).collect();
    drop(views);
    let analytic_views = analytic.tensors();

    let mut work = params.clone();
    let mut checks = Vec::with_capacity(picks.len());
    for (ti, j) in picks {
        let orig = params.tensors()[ti].data[j];
        work.tensors_mut()[ti].data[j] = orig + opts.step;
        let up = probe_loss(&work, &probe, None)?;
        work.tensors_mut()[ti].data[j] = orig - opts.step;
        let down = probe_loss(&work, &probe, None)?;
        work.tensors_mut()[ti].data[j] = orig;
        let numeric = (up - down) / (2.0 * opts.step);
        let a = analytic_views[ti].data[j];
        let denom = a.abs().max(numeric.abs()).max(opts.floor);
        let rel_error = if a.is_finite() {
            (a - numeric).abs() / denom
        } else {
            f64::INFINITY
        };
        checks.push(ParamCheck {
            name: names[ti].clone(),
            index: j,
            family: family(&names[ti]),
            analytic: a,
            numeric,
            rel_error,
        });
    }
    let worst = checks
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .cloned()
        .ok_or_else(|| Error::contract("no parameters to check"))?;
    let mut families = BTreeMap::new();
    for c in &checks {
        *families.entry(c.family).or_insert(0) += 1;
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        checks,
        worst,
        families,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passes_on_tiny_config() {
        let r = gradient_check(&EncoderConfig::tiny(50), 1e-4).unwrap();
        assert!(r.passed(), "{r}");
        assert!(r.checks.len() >= 200);
        assert_eq!(r.families.len(), 5);
    }

    #[test]
    fn corrupted_layer_norm_gradient_fails() {
        fn corrupt(g: &mut Gradients) {
            for l in &mut g.layers {
                l.ln1_g *= 1.01;
                l.ln2_b *= 1.01;
            }
        }
        let opts = GradCheckOptions {
            corrupt: Some(corrupt),
            ..GradCheckOptions::default()
        };
        let r = gradient_check_with(&EncoderConfig::tiny(50), &opts).unwrap();
        assert!(!r.passed());
        assert_eq!(r.worst.family, "layer-norm");
        assert!(r.failures().all(|c| c.family == "layer-norm"));
    }

    #[test]
    fn infinite_tolerance_always_passes() {
        fn corrupt(g: &mut Gradients) {
            g.scale(-3.0);
        }
        let opts = GradCheckOptions {
            tolerance: f64::INFINITY,
            corrupt: Some(corrupt),
            ..GradCheckOptions::default()
        };
        assert!(gradient_check_with(&EncoderConfig::tiny(50), &opts)
            .unwrap()
            .passed());
    }

    #[test]
    fn rejects_f32() {
        let cfg = EncoderConfig {
            precision: Precision::F32,
            ..EncoderConfig::tiny(50)
        };
        assert!(gradient_check(&cfg, 1e-4).is_err());
    }
}
