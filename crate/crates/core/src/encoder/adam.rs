use serde::{Deserialize, Serialize};

use super::{EncoderParams, Gradients};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

impl AdamHyper {
    pub fn validation_errors(&self, prefix: &str) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(format!("{prefix}.lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                errs.push(format!("{prefix}.{name} must be in [0, 1), got {b}"));
            }
        }
        if self.eps <= 0.0 {
            errs.push(format!("{prefix}.eps must be positive, got {}", self.eps));
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                errs.push(format!("{prefix}.clip_norm must be positive, got {c}"));
            }
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    /// Number of updates applied so far.
    pub step: usize,
    pub m: EncoderParams,
    pub v: EncoderParams,
}

impl AdamState {
    pub fn new(params: &EncoderParams) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

pub fn global_norm(grads: &Gradients) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// One Adam update with bias correction. Clips `grads` in place when
/// configured and returns the pre-clip gradient norm.
pub fn adam_step(
    params: &mut EncoderParams,
    grads: &mut Gradients,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<f64> {
    let step = state.step + 1;
    if grads.config != params.config || state.m.config != params.config {
        return Err(Error::contract(
            "gradient or optimizer state shapes do not match the parameters",
        ));
    }
    if let Some(t) = grads
        .tensors()
        .into_iter()
        .find(|t| t.data.iter().any(|g| !g.is_finite()))
    {
        return Err(Error::Training {
            step,
            reason: format!("non-finite gradient in {}", t.name),
        });
    }
    let norm = match hyper.clip_norm {
        Some(c) => clip_global_norm(grads, c),
        None => global_norm(grads),
    };
    let precision = params.config.precision;
    let bc1 = 1.0 - hyper.beta1.powi(step as i32);
    let bc2 = 1.0 - hyper.beta2.powi(step as i32);
    let g_views = grads.tensors();
    let m_views = state.m.tensors_mut();
    let v_views = state.v.tensors_mut();
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(g_views)
        .zip(m_views)
        .zip(v_views)
    {
        for (((w, &g), m), v) in p
            .data
            .iter_mut()
            .zip(g.data)
            .zip(m.data.iter_mut())
            .zip(v.data.iter_mut())
        {
            *m = precision.round(hyper.beta1 * *m + (1.0 - hyper.beta1) * g);
            *v = precision.round(hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g);
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w = precision.round(*w - hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps));
        }
    }
    state.step = step;
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, EncoderConfig};

    fn tiny() -> EncoderParams {
        init_params(&EncoderConfig::tiny(20), 0).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = tiny();
        let before = p.clone();
        let mut g = p.zeros_like();
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &mut g, &mut s, &AdamHyper::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // f(w) = w^2 at w = 1: g = 2, m_hat = 2, v_hat = 4, update = lr * 2 / (2 + eps).
        let mut p = tiny();
        p.cls_b[0] = 1.0;
        let mut g = p.zeros_like();
        g.cls_b[0] = 2.0 * p.cls_b[0];
        let mut s = AdamState::new(&p);
        let hyper = AdamHyper {
            lr: 0.1,
            clip_norm: None,
            ..AdamHyper::default()
        };
        adam_step(&mut p, &mut g, &mut s, &hyper).unwrap();
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p.cls_b[0] - expected).abs() < 1e-15);
        assert!((p.cls_b[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn non_finite_gradient_reports_step() {
        let mut p = tiny();
        let mut g = p.zeros_like();
        let mut s = AdamState::new(&p);
        s.step = 41;
        g.layers[1].w2[[0, 0]] = f64::NAN;
        match adam_step(&mut p, &mut g, &mut s, &AdamHyper::default()) {
            Err(Error::Training { step, reason }) => {
                assert_eq!(step, 42);
                assert!(reason.contains("layer1.w2"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn clipping_preserves_direction() {
        let p = tiny();
        let mut g = p.zeros_like();
        g.cls_w[0] = 3.0;
        g.cls_w[1] = 4.0;
        let norm = clip_global_norm(&mut g, 1.0);
        assert_eq!(norm, 5.0);
        assert!((g.cls_w[0] - 0.6).abs() < 1e-15 && (g.cls_w[1] - 0.8).abs() < 1e-15);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
    }
}
