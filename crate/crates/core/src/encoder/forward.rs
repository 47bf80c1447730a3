use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;

use super::math::{gelu, gelu_grad, layer_norm, layer_norm_backward, softmax_rows};
use super::{EncoderParams, Gradients};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tokenizer::TokenSequence;

/// Per-sequence result with fixed `max_len` shapes; pad rows are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub hidden: Array2<f64>,
    pub pooled: Array1<f64>,
    /// `layers x heads x max_len x max_len`; rows and columns at pad positions are zero.
    pub attention: Array4<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    drop_attn: Option<Array2<f64>>,
    ln1_xhat: Array2<f64>,
    ln1_inv: Array1<f64>,
    h1: Array2<f64>,
    f_pre: Array2<f64>,
    f_act: Array2<f64>,
    drop_ffn: Option<Array2<f64>>,
    ln2_xhat: Array2<f64>,
    ln2_inv: Array1<f64>,
}

/// Activations of one sequence over its valid prefix, kept for [`backward`].
#[derive(Debug, Clone)]
pub struct SeqCache {
    ids: Vec<usize>,
    segments: Vec<usize>,
    emb_xhat: Array2<f64>,
    emb_inv: Array1<f64>,
    drop_emb: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
    /// Final hidden states, `n_valid x hidden`.
    pub hidden: Array2<f64>,
    pub pooled: Array1<f64>,
}

impl SeqCache {
    pub fn n_valid(&self) -> usize {
        self.ids.len()
    }

    /// Attention probabilities of `layer`, one `n x n` matrix per head.
    pub fn attention(&self, layer: usize) -> &[Array2<f64>] {
        &self.layers[layer].probs
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Upstream gradients for one sequence. `d_hidden` has `n_valid` rows.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads {
    pub d_hidden: Option<Array2<f64>>,
    pub d_pooled: Option<Array1<f64>>,
}

fn validate_seq(params: &EncoderParams, seq: &TokenSequence) -> Result<usize> {
    let cfg = &params.config;
    let len = seq.ids.len();
    if len != seq.segment_ids.len() || len != seq.mask.len() {
        return Err(Error::input("token sequence fields have different lengths"));
    }
    if len > cfg.max_len {
        return Err(Error::input(format!(
            "sequence length {len} exceeds max_len {}",
            cfg.max_len
        )));
    }
    let n = seq.mask.iter().take_while(|&&m| m == 1).count();
    if n == 0 {
        return Err(Error::input("sequence has no unmasked positions"));
    }
    if seq.mask[n..].iter().any(|&m| m != 0) {
        return Err(Error::input(
            "attention mask must be a prefix of ones followed by zeros",
        ));
    }
    if let Some(&id) = seq.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::input(format!(
            "token id {id} out of range for vocab_size {}",
            cfg.vocab_size
        )));
    }
    if let Some(&sg) = seq.segment_ids.iter().find(|&&sg| sg > 1) {
        return Err(Error::input(format!("segment id {sg} must be 0 or 1")));
    }
    Ok(n)
}

fn dropout_mask(
    rows: usize,
    cols: usize,
    p: f64,
    rng: &mut Option<&mut Rng>,
) -> Option<Array2<f64>> {
    let rng = rng.as_deref_mut()?;
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(Array2::from_shape_fn((rows, cols), |_| {
        if rng.random::<f64>() < p {
            0.0
        } else {
            keep
        }
    }))
}

fn apply_mask(x: &mut Array2<f64>, mask: &Option<Array2<f64>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

fn add_row(mut m: Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    m += b;
    m
}

/// Runs one sequence. Dropout is active only when `rng` is given and the
/// configured rate is positive.
pub fn forward_seq(
    params: &EncoderParams,
    seq: &TokenSequence,
    mut rng: Option<&mut Rng>,
) -> Result<SeqCache> {
    let n = validate_seq(params, seq)?;
    let cfg = &params.config;
    let h = cfg.hidden;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let ids: Vec<usize> = seq.ids[..n].iter().map(|&i| i as usize).collect();
    let segments: Vec<usize> = seq.segment_ids[..n].iter().map(|&s| s as usize).collect();

    let mut e = Array2::zeros((n, h));
    for (t, mut row) in e.axis_iter_mut(Axis(0)).enumerate() {
        row += &params.tok_emb.row(ids[t]);
        row += &params.pos_emb.row(t);
        row += &params.seg_emb.row(segments[t]);
    }
    let (mut x, emb_xhat, emb_inv) =
        layer_norm(e.view(), params.emb_ln_g.view(), params.emb_ln_b.view());
    let drop_emb = dropout_mask(n, h, cfg.dropout, &mut rng);
    apply_mask(&mut x, &drop_emb);

    let mut layers = Vec::with_capacity(cfg.layers);
    for lp in &params.layers {
        let q = add_row(x.dot(&lp.wq), &lp.bq);
        let k = add_row(x.dot(&lp.wk), &lp.bk);
        let v = add_row(x.dot(&lp.wv), &lp.bv);
        let mut ctx = Array2::zeros((n, h));
        let mut probs = Vec::with_capacity(cfg.heads);
        for a in 0..cfg.heads {
            let cols = s![.., a * dh..(a + 1) * dh];
            let mut p = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut p);
            ctx.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let mut attn = add_row(ctx.dot(&lp.wo), &lp.bo);
        let drop_attn = dropout_mask(n, h, cfg.dropout, &mut rng);
        apply_mask(&mut attn, &drop_attn);
        let r1 = &x + &attn;
        let (h1, ln1_xhat, ln1_inv) = layer_norm(r1.view(), lp.ln1_g.view(), lp.ln1_b.view());
        let f_pre = add_row(h1.dot(&lp.w1), &lp.b1);
        let f_act = f_pre.mapv(gelu);
        let mut f_out = add_row(f_act.dot(&lp.w2), &lp.b2);
        let drop_ffn = dropout_mask(n, h, cfg.dropout, &mut rng);
        apply_mask(&mut f_out, &drop_ffn);
        let r2 = &h1 + &f_out;
        let (out, ln2_xhat, ln2_inv) = layer_norm(r2.view(), lp.ln2_g.view(), lp.ln2_b.view());
        layers.push(LayerCache {
            x: std::mem::replace(&mut x, out),
            q,
            k,
            v,
            probs,
            ctx,
            drop_attn,
            ln1_xhat,
            ln1_inv,
            h1,
            f_pre,
            f_act,
            drop_ffn,
            ln2_xhat,
            ln2_inv,
        });
    }
    let pooled = (x.row(0).dot(&params.pool_w) + &params.pool_b).mapv(f64::tanh);
    Ok(SeqCache {
        ids,
        segments,
        emb_xhat,
        emb_inv,
        drop_emb,
        layers,
        hidden: x,
        pooled,
    })
}

/// Deterministic batch forward pass (dropout off).
pub fn forward(params: &EncoderParams, batch: &[TokenSequence]) -> Result<Vec<EncoderOutput>> {
    let cfg = &params.config;
    batch
        .iter()
        .map(|seq| {
            let c = forward_seq(params, seq, None)?;
            let n = c.n_valid();
            let len = cfg.max_len;
            let mut hidden = Array2::zeros((len, cfg.hidden));
            hidden.slice_mut(s![..n, ..]).assign(&c.hidden);
            let mut attention = Array4::zeros((cfg.layers, cfg.heads, len, len));
            for (l, lc) in c.layers.iter().enumerate() {
                for (a, p) in lc.probs.iter().enumerate() {
                    attention.slice_mut(s![l, a, ..n, ..n]).assign(p);
                }
            }
            Ok(EncoderOutput {
                hidden,
                pooled: c.pooled,
                attention,
            })
        })
        .collect()
}

fn outer_acc(acc: &mut Array2<f64>, a: ArrayView2<f64>, b: ArrayView2<f64>) {
    // acc += a^T b
    ndarray::linalg::general_mat_mul(1.0, &a.t(), &b, 1.0, acc);
}

fn col_sum_acc(acc: &mut Array1<f64>, d: ArrayView2<f64>) {
    *acc += &d.sum_axis(Axis(0));
}

fn vec_outer_acc(acc: &mut Array2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    for (i, &ai) in a.iter().enumerate() {
        if ai != 0.0 {
            acc.row_mut(i).scaled_add(ai, &b);
        }
    }
}

/// Accumulates parameter gradients for one sequence into `grads`.
pub fn backward(
    params: &EncoderParams,
    cache: &SeqCache,
    upstream: &OutputGrads,
    grads: &mut Gradients,
) -> Result<()> {
    let cfg = &params.config;
    let n = cache.n_valid();
    let h = cfg.hidden;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    if grads.config != params.config
        || cache.layers.len() != cfg.layers
        || cache.hidden.ncols() != h
    {
        return Err(Error::contract(
            "gradient buffer or cache does not match the model configuration",
        ));
    }

    let mut d_x = match &upstream.d_hidden {
        Some(d) if d.dim() == (n, h) => d.clone(),
        Some(d) => {
            return Err(Error::contract(format!(
                "d_hidden has shape {:?}, expected ({n}, {h})",
                d.dim()
            )))
        }
        None => Array2::zeros((n, h)),
    };
    if let Some(dp) = &upstream.d_pooled {
        if dp.len() != h {
            return Err(Error::contract(format!(
                "d_pooled has length {}, expected {h}",
                dp.len()
            )));
        }
        let d_pre = dp * &cache.pooled.mapv(|p| 1.0 - p * p);
        vec_outer_acc(&mut grads.pool_w, cache.hidden.row(0), d_pre.view());
        grads.pool_b += &d_pre;
        let back = params.pool_w.dot(&d_pre);
        d_x.row_mut(0).scaled_add(1.0, &back);
    }

    for (li, (lp, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let g = &mut grads.layers[li];
        let d_r2 = layer_norm_backward(
            d_x.view(),
            lc.ln2_xhat.view(),
            lc.ln2_inv.view(),
            lp.ln2_g.view(),
            &mut g.ln2_g,
            &mut g.ln2_b,
        );
        let mut d_fout = d_r2.clone();
        apply_mask(&mut d_fout, &lc.drop_ffn);
        col_sum_acc(&mut g.b2, d_fout.view());
        outer_acc(&mut g.w2, lc.f_act.view(), d_fout.view());
        let mut d_fpre = d_fout.dot(&lp.w2.t());
        d_fpre.zip_mut_with(&lc.f_pre, |d, &x| *d *= gelu_grad(x));
        col_sum_acc(&mut g.b1, d_fpre.view());
        outer_acc(&mut g.w1, lc.h1.view(), d_fpre.view());
        let d_h1 = d_r2 + d_fpre.dot(&lp.w1.t());

        let d_r1 = layer_norm_backward(
            d_h1.view(),
            lc.ln1_xhat.view(),
            lc.ln1_inv.view(),
            lp.ln1_g.view(),
            &mut g.ln1_g,
            &mut g.ln1_b,
        );
        let mut d_attn = d_r1.clone();
        apply_mask(&mut d_attn, &lc.drop_attn);
        col_sum_acc(&mut g.bo, d_attn.view());
        outer_acc(&mut g.wo, lc.ctx.view(), d_attn.view());
        let d_ctx = d_attn.dot(&lp.wo.t());

        let mut d_q = Array2::zeros((n, h));
        let mut d_k = Array2::zeros((n, h));
        let mut d_v = Array2::zeros((n, h));
        for (a, p) in lc.probs.iter().enumerate() {
            let cols = s![.., a * dh..(a + 1) * dh];
            let dc = d_ctx.slice(cols);
            let d_p = dc.dot(&lc.v.slice(cols).t());
            d_v.slice_mut(cols).assign(&p.t().dot(&dc));
            let mut d_s = d_p;
            for (mut ds_row, p_row) in d_s.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
                let dot: f64 = ds_row.iter().zip(p_row).map(|(d, p)| d * p).sum();
                ds_row.zip_mut_with(&p_row, |d, &p| *d = p * (*d - dot) * scale);
            }
            d_q.slice_mut(cols).assign(&d_s.dot(&lc.k.slice(cols)));
            d_k.slice_mut(cols).assign(&d_s.t().dot(&lc.q.slice(cols)));
        }
        outer_acc(&mut g.wq, lc.x.view(), d_q.view());
        outer_acc(&mut g.wk, lc.x.view(), d_k.view());
        outer_acc(&mut g.wv, lc.x.view(), d_v.view());
        col_sum_acc(&mut g.bq, d_q.view());
        col_sum_acc(&mut g.bk, d_k.view());
        col_sum_acc(&mut g.bv, d_v.view());
        let mut d_in = d_r1;
        ndarray::linalg::general_mat_mul(1.0, &d_q, &lp.wq.t(), 1.0, &mut d_in);
        ndarray::linalg::general_mat_mul(1.0, &d_k, &lp.wk.t(), 1.0, &mut d_in);
        ndarray::linalg::general_mat_mul(1.0, &d_v, &lp.wv.t(), 1.0, &mut d_in);
        d_x = d_in;
    }

    apply_mask(&mut d_x, &cache.drop_emb);
    let d_e = layer_norm_backward(
        d_x.view(),
        cache.emb_xhat.view(),
        cache.emb_inv.view(),
        params.emb_ln_g.view(),
        &mut grads.emb_ln_g,
        &mut grads.emb_ln_b,
    );
    for (t, row) in d_e.axis_iter(Axis(0)).enumerate() {
        grads.tok_emb.row_mut(cache.ids[t]).scaled_add(1.0, &row);
        grads.pos_emb.row_mut(t).scaled_add(1.0, &row);
        grads
            .seg_emb
            .row_mut(cache.segments[t])
            .scaled_add(1.0, &row);
    }
    Ok(())
}
