//! Forward and reverse passes of the decoder-only rewriting network. The
//! backward pass is written by hand against the forward pass and is held to
//! finite-difference agreement by the gradient tests.

use crate::text::TokenId;

use super::params::{Grads, PolicyParameters};
use super::tensor::Mat;
use super::PolicyError;

const NORM_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `y[t] = x[t] * gain / rms(x[t])`; returns the per-row inverse rms.
fn rmsnorm(x: &Mat, gain: &Mat) -> (Mat, Vec<f64>) {
    let mut out = Mat::zeros(x.rows, x.cols);
    let mut inv = Vec::with_capacity(x.rows);
    let g = gain.row(0);
    for t in 0..x.rows {
        let row = x.row(t);
        let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / x.cols as f64;
        let r = 1.0 / (ms + NORM_EPS).sqrt();
        inv.push(r);
        let out_row = out.row_mut(t);
        for j in 0..x.cols {
            out_row[j] = row[j] * r * g[j];
        }
    }
    (out, inv)
}

/// Reverse of [`rmsnorm`]: accumulates the gain gradient into `d_gain` and
/// returns the gradient with respect to `x`.
fn rmsnorm_backward(x: &Mat, gain: &Mat, inv: &[f64], dy: &Mat, d_gain: &mut Mat) -> Mat {
    let mut dx = Mat::zeros(x.rows, x.cols);
    let g = gain.row(0);
    let d = x.cols as f64;
    for t in 0..x.rows {
        let r = inv[t];
        let x_row = x.row(t);
        let dy_row = dy.row(t);
        let dg_row = d_gain.row_mut(0);
        let mut s = 0.0;
        for j in 0..x.cols {
            let dyg = dy_row[j] * g[j];
            s += dyg * x_row[j];
            dg_row[j] += dy_row[j] * x_row[j] * r;
        }
        let dx_row = dx.row_mut(t);
        let r3_s_over_d = r * r * r * s / d;
        for j in 0..x.cols {
            dx_row[j] = r * dy_row[j] * g[j] - r3_s_over_d * x_row[j];
        }
    }
    dx
}

pub(crate) fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - log_sum).collect()
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

struct LayerCache {
    x_in: Mat,
    xn1: Mat,
    inv1: Vec<f64>,
    q: Mat,
    k: Mat,
    v: Mat,
    /// Causal attention weights, one T×T matrix per head.
    probs: Vec<Mat>,
    ctx: Mat,
    x_mid: Mat,
    xn2: Mat,
    inv2: Vec<f64>,
    h_pre: Mat,
    h_act: Mat,
    /// Materialized `w + b·a` for each adapted projection (q, k, v, o).
    weff: [Option<Mat>; 4],
}

/// Activations of one sequence, kept for the reverse pass.
pub(crate) struct Forward {
    pub tokens: Vec<TokenId>,
    pub logits: Mat,
    pub values: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
    x_last: Mat,
    xf: Mat,
    invf: Vec<f64>,
}

fn effective_weight(params: &PolicyParameters, layer: usize, which: usize) -> Option<Mat> {
    let layer_ix = &params.ix.layers[layer];
    let (a_ix, b_ix) = layer_ix.lora[which]?;
    let base = match which {
        0 => &params.tensors[layer_ix.wq],
        1 => &params.tensors[layer_ix.wk],
        2 => &params.tensors[layer_ix.wv],
        _ => &params.tensors[layer_ix.wo],
    };
    let mut w = params.tensors[b_ix].matmul_nn(&params.tensors[a_ix]);
    w.add_assign(base);
    Some(w)
}

pub(crate) fn forward(
    params: &PolicyParameters,
    tokens: &[TokenId],
) -> Result<Forward, PolicyError> {
    let cfg = params.config();
    let t_len = tokens.len();
    if t_len > cfg.max_seq {
        return Err(PolicyError::SequenceTooLong { len: t_len, max: cfg.max_seq });
    }
    for &tok in tokens {
        if tok as usize >= cfg.vocab_size {
            return Err(PolicyError::TokenOutOfRange { id: tok, vocab: cfg.vocab_size });
        }
    }

    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let wte = &params.tensors[params.ix.wte];
    let wpe = &params.tensors[params.ix.wpe];
    let mut x = Mat::zeros(t_len, d);
    for (t, &tok) in tokens.iter().enumerate() {
        let row = x.row_mut(t);
        let e = wte.row(tok as usize);
        let p = wpe.row(t);
        for j in 0..d {
            row[j] = e[j] + p[j];
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let lix = params.ix.layers[l].clone();
        let x_in = x;

        let (xn1, inv1) = rmsnorm(&x_in, &params.tensors[lix.ln1]);
        let weff: [Option<Mat>; 4] = [
            effective_weight(params, l, 0),
            effective_weight(params, l, 1),
            effective_weight(params, l, 2),
            effective_weight(params, l, 3),
        ];
        let wq = weff[0].as_ref().unwrap_or(&params.tensors[lix.wq]);
        let wk = weff[1].as_ref().unwrap_or(&params.tensors[lix.wk]);
        let wv = weff[2].as_ref().unwrap_or(&params.tensors[lix.wv]);
        let wo = weff[3].as_ref().unwrap_or(&params.tensors[lix.wo]);
        let q = xn1.matmul_nt(wq);
        let k = xn1.matmul_nt(wk);
        let v = xn1.matmul_nt(wv);

        let mut probs = Vec::with_capacity(heads);
        let mut ctx = Mat::zeros(t_len, d);
        for h in 0..heads {
            let base = h * hd;
            let mut p = Mat::zeros(t_len, t_len);
            for i in 0..t_len {
                let q_row = &q.row(i)[base..base + hd];
                let mut scores = Vec::with_capacity(i + 1);
                for j in 0..=i {
                    let k_row = &k.row(j)[base..base + hd];
                    let mut s = 0.0;
                    for c in 0..hd {
                        s += q_row[c] * k_row[c];
                    }
                    scores.push(s * scale);
                }
                let soft = softmax_row(&scores);
                let p_row = p.row_mut(i);
                p_row[..=i].copy_from_slice(&soft);
                let ctx_row = &mut ctx.row_mut(i)[base..base + hd];
                for (j, &w) in soft.iter().enumerate() {
                    let v_row = &v.row(j)[base..base + hd];
                    for c in 0..hd {
                        ctx_row[c] += w * v_row[c];
                    }
                }
            }
            probs.push(p);
        }

        let attn = ctx.matmul_nt(wo);
        let mut x_mid = x_in.clone();
        x_mid.add_assign(&attn);

        let (xn2, inv2) = rmsnorm(&x_mid, &params.tensors[lix.ln2]);
        let h_pre = xn2.matmul_nt(&params.tensors[lix.w1]);
        let mut h_act = h_pre.clone();
        for vgelu in &mut h_act.data {
            *vgelu = gelu(*vgelu);
        }
        let ffn = h_act.matmul_nt(&params.tensors[lix.w2]);
        let mut x_out = x_mid.clone();
        x_out.add_assign(&ffn);

        layers.push(LayerCache {
            x_in,
            xn1,
            inv1,
            q,
            k,
            v,
            probs,
            ctx,
            x_mid,
            xn2,
            inv2,
            h_pre,
            h_act,
            weff,
        });
        x = x_out;
    }

    let x_last = x;
    let (xf, invf) = rmsnorm(&x_last, &params.tensors[params.ix.ln_f]);
    let logits = xf.matmul_nt(&params.tensors[params.ix.head]);

    let values = match (params.ix.value_w, params.ix.value_b) {
        (Some(w_ix), Some(b_ix)) => {
            let w = params.tensors[w_ix].row(0);
            let b = params.tensors[b_ix].at(0, 0);
            Some(
                (0..t_len)
                    .map(|t| {
                        let row = xf.row(t);
                        let mut acc = b;
                        for j in 0..d {
                            acc += row[j] * w[j];
                        }
                        acc
                    })
                    .collect(),
            )
        }
        _ => None,
    };

    Ok(Forward { tokens: tokens.to_vec(), logits, values, layers, x_last, xf, invf })
}

/// Accumulates gradients of a scalar loss into `grads`, given the loss
/// gradient with respect to the logits (and optionally the value outputs).
pub(crate) fn backward(
    params: &PolicyParameters,
    fwd: &Forward,
    d_logits: Option<&Mat>,
    d_values: Option<&[f64]>,
    grads: &mut Grads,
) {
    let cfg = params.config();
    let t_len = fwd.tokens.len();
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let mut d_xf = Mat::zeros(t_len, d);
    if let Some(dl) = d_logits {
        let head = &params.tensors[params.ix.head];
        d_xf = dl.matmul_nn(head);
        grads.accum(params.ix.head, &dl.matmul_tn(&fwd.xf));
    }
    if let Some(dv) = d_values {
        let w_ix = params.ix.value_w.expect("value gradient without a value head");
        let b_ix = params.ix.value_b.expect("value gradient without a value head");
        let w = params.tensors[w_ix].row(0).to_vec();
        let mut d_w = Mat::zeros(1, d);
        let mut d_b = 0.0;
        for t in 0..t_len {
            let g = dv[t];
            if g == 0.0 {
                continue;
            }
            d_b += g;
            let xf_row = fwd.xf.row(t);
            let dxf_row = d_xf.row_mut(t);
            let dw_row = d_w.row_mut(0);
            for j in 0..d {
                dw_row[j] += g * xf_row[j];
                dxf_row[j] += g * w[j];
            }
        }
        grads.accum(w_ix, &d_w);
        grads.accum(b_ix, &Mat { rows: 1, cols: 1, data: vec![d_b] });
    }

    let mut d_gain_f = Mat::zeros(1, d);
    let mut dx = rmsnorm_backward(
        &fwd.x_last,
        &params.tensors[params.ix.ln_f],
        &fwd.invf,
        &d_xf,
        &mut d_gain_f,
    );
    grads.accum(params.ix.ln_f, &d_gain_f);

    for l in (0..cfg.n_layers).rev() {
        let lix = params.ix.layers[l].clone();
        let cache = &fwd.layers[l];

        // ffn block: x_out = x_mid + W2 · gelu(W1 · xn2)
        let d_h_act = dx.matmul_nn(&params.tensors[lix.w2]);
        accum_linear(params, grads, lix.w2, None, &dx, &cache.h_act);
        let mut d_h_pre = d_h_act;
        for (g, &pre) in d_h_pre.data.iter_mut().zip(&cache.h_pre.data) {
            *g *= gelu_grad(pre);
        }
        let d_xn2 = d_h_pre.matmul_nn(&params.tensors[lix.w1]);
        accum_linear(params, grads, lix.w1, None, &d_h_pre, &cache.xn2);

        let mut d_gain2 = Mat::zeros(1, d);
        let d_from_norm2 = rmsnorm_backward(
            &cache.x_mid,
            &params.tensors[lix.ln2],
            &cache.inv2,
            &d_xn2,
            &mut d_gain2,
        );
        grads.accum(lix.ln2, &d_gain2);
        let mut d_x_mid = dx;
        d_x_mid.add_assign(&d_from_norm2);

        // attention block: x_mid = x_in + Wo · ctx
        let wo = cache.weff[3].as_ref().unwrap_or(&params.tensors[lix.wo]);
        let d_ctx = d_x_mid.matmul_nn(wo);
        accum_linear(params, grads, lix.wo, lix.lora[3], &d_x_mid, &cache.ctx);

        let mut d_q = Mat::zeros(t_len, d);
        let mut d_k = Mat::zeros(t_len, d);
        let mut d_v = Mat::zeros(t_len, d);
        for h in 0..heads {
            let base = h * hd;
            let p = &cache.probs[h];
            for i in 0..t_len {
                let p_row = &p.row(i)[..=i];
                let dctx_row = &d_ctx.row(i)[base..base + hd];
                // dp_j = dctx_i · v_j, then softmax backward to ds
                let mut dp = Vec::with_capacity(i + 1);
                for j in 0..=i {
                    let v_row = &cache.v.row(j)[base..base + hd];
                    let mut acc = 0.0;
                    for c in 0..hd {
                        acc += dctx_row[c] * v_row[c];
                    }
                    dp.push(acc);
                }
                let dot: f64 = p_row.iter().zip(&dp).map(|(&pw, &g)| pw * g).sum();
                let q_row = cache.q.row(i)[base..base + hd].to_vec();
                let dq_row = &mut d_q.row_mut(i)[base..base + hd];
                for j in 0..=i {
                    let ds = p_row[j] * (dp[j] - dot) * scale;
                    let k_row = &cache.k.row(j)[base..base + hd];
                    let dk_row = &mut d_k.row_mut(j)[base..base + hd];
                    for c in 0..hd {
                        dq_row[c] += ds * k_row[c];
                        dk_row[c] += ds * q_row[c];
                    }
                    let pw = p_row[j];
                    let dv_row = &mut d_v.row_mut(j)[base..base + hd];
                    for c in 0..hd {
                        dv_row[c] += pw * dctx_row[c];
                    }
                }
            }
        }

        let wq = cache.weff[0].as_ref().unwrap_or(&params.tensors[lix.wq]);
        let wk = cache.weff[1].as_ref().unwrap_or(&params.tensors[lix.wk]);
        let wv = cache.weff[2].as_ref().unwrap_or(&params.tensors[lix.wv]);
        let mut d_xn1 = d_q.matmul_nn(wq);
        d_xn1.add_assign(&d_k.matmul_nn(wk));
        d_xn1.add_assign(&d_v.matmul_nn(wv));
        accum_linear(params, grads, lix.wq, lix.lora[0], &d_q, &cache.xn1);
        accum_linear(params, grads, lix.wk, lix.lora[1], &d_k, &cache.xn1);
        accum_linear(params, grads, lix.wv, lix.lora[2], &d_v, &cache.xn1);

        let mut d_gain1 = Mat::zeros(1, d);
        let d_from_norm1 = rmsnorm_backward(
            &cache.x_in,
            &params.tensors[lix.ln1],
            &cache.inv1,
            &d_xn1,
            &mut d_gain1,
        );
        grads.accum(lix.ln1, &d_gain1);
        d_x_mid.add_assign(&d_from_norm1);
        dx = d_x_mid;
    }

    if grads.trainable[params.ix.wte] || grads.trainable[params.ix.wpe] {
        let wte_on = grads.trainable[params.ix.wte];
        let wpe_on = grads.trainable[params.ix.wpe];
        for (t, &tok) in fwd.tokens.iter().enumerate() {
            let dx_row = dx.row(t);
            if wte_on {
                let row = grads.tensors[params.ix.wte].row_mut(tok as usize);
                for j in 0..d {
                    row[j] += dx_row[j];
                }
            }
            if wpe_on {
                let row = grads.tensors[params.ix.wpe].row_mut(t);
                for j in 0..d {
                    row[j] += dx_row[j];
                }
            }
        }
    }
}

/// Routes the gradient of one projection either to its base weight or, when
/// an adapter wraps it, to the adapter factors.
fn accum_linear(
    params: &PolicyParameters,
    grads: &mut Grads,
    base_slot: usize,
    lora: Option<(usize, usize)>,
    d_out: &Mat,
    x_in: &Mat,
) {
    match lora {
        Some((a_ix, b_ix)) => {
            let d_weff = d_out.matmul_tn(x_in);
            grads.accum(a_ix, &params.tensors[b_ix].matmul_tn(&d_weff));
            grads.accum(b_ix, &d_weff.matmul_nt(&params.tensors[a_ix]));
        }
        None => {
            if grads.trainable[base_slot] {
                let d_w = d_out.matmul_tn(x_in);
                grads.accum(base_slot, &d_w);
            }
        }
    }
}
