use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::math::{gelu, gelu_grad, layer_norm, layer_norm_backward, log_sum_exp};
use super::{EncoderParams, Gradients};
use crate::error::{Error, Result};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn classifier_logit(params: &EncoderParams, pooled: ArrayView1<f64>) -> f64 {
    pooled.dot(&params.cls_w) + params.cls_b[0]
}

/// Accumulates classifier gradients and returns the gradient w.r.t. `pooled`.
pub fn classifier_backward(
    params: &EncoderParams,
    pooled: ArrayView1<f64>,
    d_logit: f64,
    grads: &mut Gradients,
) -> Array1<f64> {
    grads.cls_w.scaled_add(d_logit, &pooled);
    grads.cls_b[0] += d_logit;
    &params.cls_w * d_logit
}

#[derive(Debug, Clone)]
pub struct MlmLoss {
    /// Sum of token cross-entropies over labeled positions.
    pub loss_sum: f64,
    pub count: usize,
    pub correct: usize,
    /// Gradient w.r.t. the hidden rows passed in, already multiplied by `scale`.
    pub d_hidden: Array2<f64>,
}

/// Masked-token cross-entropy. `labels[t] < 0` means position `t` is not
/// predicted. The decoder is the token-embedding table; gradients for it are
/// added to `grads.tok_emb`. All parameter gradients are multiplied by `scale`.
pub fn mlm_loss(
    params: &EncoderParams,
    hidden: ArrayView2<f64>,
    labels: &[i64],
    scale: f64,
    grads: &mut Gradients,
) -> Result<MlmLoss> {
    let (n, h) = hidden.dim();
    let vocab = params.config.vocab_size;
    if labels.len() < n {
        return Err(Error::contract(format!(
            "{} labels for {n} hidden rows",
            labels.len()
        )));
    }
    if labels[n..].iter().any(|&y| y >= 0) {
        return Err(Error::contract("MLM label on a pad position"));
    }
    let picked: Vec<(usize, usize)> = labels[..n]
        .iter()
        .enumerate()
        .filter(|(_, &y)| y >= 0)
        .map(|(t, &y)| (t, y as usize))
        .collect();
    if let Some(&(_, y)) = picked.iter().find(|(_, y)| *y >= vocab) {
        return Err(Error::input(format!("MLM label {y} out of range")));
    }
    let mut d_hidden = Array2::zeros((n, h));
    if picked.is_empty() {
        return Ok(MlmLoss {
            loss_sum: 0.0,
            count: 0,
            correct: 0,
            d_hidden,
        });
    }
    let m = picked.len();
    let mut hm = Array2::zeros((m, h));
    for (r, &(t, _)) in picked.iter().enumerate() {
        hm.row_mut(r).assign(&hidden.row(t));
    }
    let mut u = hm.dot(&params.mlm_w);
    u += &params.mlm_b;
    let g = u.mapv(gelu);
    let (tr, xhat, inv) = layer_norm(g.view(), params.mlm_ln_g.view(), params.mlm_ln_b.view());
    let mut logits = tr.dot(&params.tok_emb.t());
    logits += &params.mlm_bias;

    let mut loss_sum = 0.0;
    let mut correct = 0;
    for (mut row, &(_, y)) in logits.axis_iter_mut(Axis(0)).zip(&picked) {
        let lse = log_sum_exp(row.view());
        loss_sum += lse - row[y];
        let argmax = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            })
            .0;
        correct += usize::from(argmax == y);
        row.mapv_inplace(|v| (v - lse).exp() * scale);
        row[y] -= scale;
    }
    let d_logits = logits;
    grads.mlm_bias += &d_logits.sum_axis(Axis(0));
    ndarray::linalg::general_mat_mul(1.0, &d_logits.t(), &tr, 1.0, &mut grads.tok_emb);
    let d_tr = d_logits.dot(&params.tok_emb);
    let mut d_u = layer_norm_backward(
        d_tr.view(),
        xhat.view(),
        inv.view(),
        params.mlm_ln_g.view(),
        &mut grads.mlm_ln_g,
        &mut grads.mlm_ln_b,
    );
    d_u.zip_mut_with(&u, |d, &x| *d *= gelu_grad(x));
    grads.mlm_b += &d_u.sum_axis(Axis(0));
    ndarray::linalg::general_mat_mul(1.0, &hm.t(), &d_u, 1.0, &mut grads.mlm_w);
    let d_hm = d_u.dot(&params.mlm_w.t());
    for (r, &(t, _)) in picked.iter().enumerate() {
        d_hidden.row_mut(t).assign(&d_hm.row(r));
    }
    Ok(MlmLoss {
        loss_sum,
        count: m,
        correct,
        d_hidden,
    })
}

#[derive(Debug, Clone)]
pub struct NspLoss {
    pub loss: f64,
    pub correct: bool,
    pub d_pooled: Array1<f64>,
}

/// Two-way next-sentence cross-entropy; class 0 is "is next".
pub fn nsp_loss(
    params: &EncoderParams,
    pooled: ArrayView1<f64>,
    is_next: bool,
    scale: f64,
    grads: &mut Gradients,
) -> NspLoss {
    let y = usize::from(!is_next);
    let mut logits = pooled.dot(&params.nsp_w) + &params.nsp_b;
    let lse = log_sum_exp(logits.view());
    let loss = lse - logits[y];
    let correct = (logits[0] >= logits[1]) == is_next;
    logits.mapv_inplace(|v| (v - lse).exp() * scale);
    logits[y] -= scale;
    let d = logits;
    for (i, &p) in pooled.iter().enumerate() {
        grads.nsp_w.row_mut(i).scaled_add(p, &d);
    }
    grads.nsp_b += &d;
    NspLoss {
        loss,
        correct,
        d_pooled: params.nsp_w.dot(&d),
    }
}
