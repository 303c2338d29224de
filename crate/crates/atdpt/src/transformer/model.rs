//! Forward, exact reverse-mode backward, loss, and incremental (KV-cached)
//! inference for the causal transformer.
//!
//! Layout: pre-normalization residual blocks, causal multi-head attention,
//! GELU-gated MLP of width 4x, learned positional embeddings, linear head.

use super::{ModelParams, TransformerConfig};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Strided f64 GEMM: C = alpha * A(m x k) * B(k x n) + beta * C. Thin safe
/// wrapper; the blocked kernel is deterministic for fixed shapes and strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    debug_assert!(m >= 1 && k >= 1 && n >= 1);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

// y[t, o] = b[o] + sum_i x[t, i] * w[o, i]
fn linear(x: &[f64], w: &[f64], b: Option<&[f64]>, rows: usize, in_dim: usize, out_dim: usize) -> Vec<f64> {
    let mut y = vec![0.0f64; rows * out_dim];
    if let Some(b) = b {
        for t in 0..rows {
            y[t * out_dim..(t + 1) * out_dim].copy_from_slice(b);
        }
    }
    // w is stored [out, in] row-major; read it as the [in, out] operand
    gemm(
        rows,
        in_dim,
        out_dim,
        1.0,
        x,
        in_dim as isize,
        1,
        w,
        1,
        in_dim as isize,
        1.0,
        &mut y,
        out_dim as isize,
        1,
    );
    y
}

#[allow(clippy::too_many_arguments)]
fn linear_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    rows: usize,
    in_dim: usize,
    out_dim: usize,
    dx: &mut [f64],
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) {
    // dx += dy * w  ([rows, out] x [out, in])
    gemm(
        rows,
        out_dim,
        in_dim,
        1.0,
        dy,
        out_dim as isize,
        1,
        w,
        in_dim as isize,
        1,
        1.0,
        dx,
        in_dim as isize,
        1,
    );
    // dw += dy^T * x  ([out, rows] x [rows, in])
    gemm(
        out_dim,
        rows,
        in_dim,
        1.0,
        dy,
        1,
        out_dim as isize,
        x,
        in_dim as isize,
        1,
        1.0,
        dw,
        in_dim as isize,
        1,
    );
    if let Some(db) = db {
        for t in 0..rows {
            let dyr = &dy[t * out_dim..(t + 1) * out_dim];
            for o in 0..out_dim {
                db[o] += dyr[o];
            }
        }
    }
}

/// Row-wise layer norm; returns (output, xhat, rstd).
fn layer_norm(x: &[f64], g: &[f64], b: &[f64], rows: usize, dim: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0f64; rows * dim];
    let mut xhat = vec![0.0f64; rows * dim];
    let mut rstd = vec![0.0f64; rows];
    for t in 0..rows {
        let xr = &x[t * dim..(t + 1) * dim];
        let mut mean = 0.0f64;
        for &v in xr {
            mean += v;
        }
        mean /= dim as f64;
        let mut var = 0.0f64;
        for &v in xr {
            let d = v - mean;
            var += d * d;
        }
        var /= dim as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[t] = rs;
        for i in 0..dim {
            let xh = (xr[i] - mean) * rs;
            xhat[t * dim + i] = xh;
            y[t * dim + i] = xh * g[i] + b[i];
        }
    }
    (y, xhat, rstd)
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    g: &[f64],
    rows: usize,
    dim: usize,
    dx: &mut [f64],
    dg: &mut [f64],
    db: &mut [f64],
) {
    for t in 0..rows {
        let dyr = &dy[t * dim..(t + 1) * dim];
        let xhr = &xhat[t * dim..(t + 1) * dim];
        let mut sum_dxhat = 0.0f64;
        let mut sum_dxhat_xhat = 0.0f64;
        for i in 0..dim {
            dg[i] += dyr[i] * xhr[i];
            db[i] += dyr[i];
            let dxh = dyr[i] * g[i];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xhr[i];
        }
        let inv_dim = 1.0 / dim as f64;
        for i in 0..dim {
            let dxh = dyr[i] * g[i];
            dx[t * dim + i] +=
                rstd[t] * (dxh - sum_dxhat * inv_dim - xhr[i] * sum_dxhat_xhat * inv_dim);
        }
    }
}

const GELU_C: f64 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

struct LayerCache {
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    ln1_out: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>, // heads x T x T, row-major
    att: Vec<f64>,   // concatenated head outputs, pre-projection
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    ln2_out: Vec<f64>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
}

/// Activations retained for the backward pass.
pub struct ForwardCache {
    len: usize,
    tokens: Vec<f64>,
    layers: Vec<LayerCache>,
    x_final: Vec<f64>,
    xhatf: Vec<f64>,
    rstdf: Vec<f64>,
    pub logits: Vec<f64>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn logits_at(&self, pos: usize, out_dim: usize) -> &[f64] {
        &self.logits[pos * out_dim..(pos + 1) * out_dim]
    }
}

fn causal_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    cfg: &TransformerConfig,
    t_len: usize,
) -> (Vec<f64>, Vec<f64>) {
    let d = cfg.embed_dim;
    let nh = cfg.num_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut probs = vec![0.0f64; nh * t_len * t_len];
    let mut att = vec![0.0f64; t_len * d];
    let mut scores = vec![0.0f64; t_len * t_len];
    for h in 0..nh {
        let off = h * hd;
        // scores = q_h * k_h^T (masked entries computed but never read)
        gemm(
            t_len,
            hd,
            t_len,
            scale,
            &q[off..],
            d as isize,
            1,
            &k[off..],
            1,
            d as isize,
            0.0,
            &mut scores,
            t_len as isize,
            1,
        );
        for t in 0..t_len {
            let row = &scores[t * t_len..t * t_len + t + 1];
            let mut max = f64::MIN;
            for &s in row {
                if s > max {
                    max = s;
                }
            }
            let mut sum = 0.0f64;
            for u in 0..=t {
                let e = (row[u] - max).exp();
                probs[(h * t_len + t) * t_len + u] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for u in 0..=t {
                probs[(h * t_len + t) * t_len + u] *= inv;
            }
        }
        // att_h = probs_h * v_h (masked prob entries are exactly zero)
        gemm(
            t_len,
            t_len,
            hd,
            1.0,
            &probs[h * t_len * t_len..],
            t_len as isize,
            1,
            &v[off..],
            d as isize,
            1,
            0.0,
            &mut att[off..],
            d as isize,
            1,
        );
    }
    (probs, att)
}

/// Full-sequence forward pass; returns per-position logits inside the cache.
pub fn forward(params: &ModelParams, tokens: &[f64], t_len: usize) -> Result<ForwardCache> {
    let cfg = &params.cfg;
    let d = cfg.embed_dim;
    if t_len > cfg.max_seq_len() {
        return Err(Error::ContextOverflow {
            len: t_len,
            capacity: cfg.max_seq_len(),
        });
    }
    assert_eq!(tokens.len(), t_len * cfg.input_width);

    let mut x = linear(tokens, &params.tok_w, Some(&params.tok_b), t_len, cfg.input_width, d);
    for t in 0..t_len {
        for i in 0..d {
            x[t * d + i] += params.pos[t * d + i];
        }
    }

    let mut layers = Vec::with_capacity(cfg.num_layers);
    for lp in &params.layers {
        let (ln1_out, xhat1, rstd1) = layer_norm(&x, &lp.ln1_g, &lp.ln1_b, t_len, d);
        let q = linear(&ln1_out, &lp.wq, None, t_len, d, d);
        let k = linear(&ln1_out, &lp.wk, None, t_len, d, d);
        let v = linear(&ln1_out, &lp.wv, None, t_len, d, d);
        let (probs, att) = causal_attention(&q, &k, &v, cfg, t_len);
        let proj = linear(&att, &lp.wo, None, t_len, d, d);
        for i in 0..t_len * d {
            x[i] += proj[i];
        }
        let (ln2_out, xhat2, rstd2) = layer_norm(&x, &lp.ln2_g, &lp.ln2_b, t_len, d);
        let h_pre = linear(&ln2_out, &lp.w1, Some(&lp.b1), t_len, d, 4 * d);
        let h_act: Vec<f64> = h_pre.iter().map(|&v| gelu(v)).collect();
        let mlp_out = linear(&h_act, &lp.w2, Some(&lp.b2), t_len, 4 * d, d);
        for i in 0..t_len * d {
            x[i] += mlp_out[i];
        }
        layers.push(LayerCache {
            xhat1,
            rstd1,
            ln1_out,
            q,
            k,
            v,
            probs,
            att,
            xhat2,
            rstd2,
            ln2_out,
            h_pre,
            h_act,
        });
    }

    let x_final = x.clone();
    let (lnf_out, xhatf, rstdf) = layer_norm(&x, &params.lnf_g, &params.lnf_b, t_len, d);
    let logits = linear(&lnf_out, &params.head_w, Some(&params.head_b), t_len, d, cfg.output_width);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("transformer forward"));
    }
    Ok(ForwardCache {
        len: t_len,
        tokens: tokens.to_vec(),
        layers,
        x_final,
        xhatf,
        rstdf,
        logits,
    })
}

/// Exact reverse-mode gradients for every named tensor, accumulated into
/// `grads` (which mirrors the parameter layout).
pub fn backward(params: &ModelParams, cache: &ForwardCache, dlogits: &[f64], grads: &mut ModelParams) {
    let cfg = &params.cfg;
    let d = cfg.embed_dim;
    let nh = cfg.num_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let t_len = cache.len;

    // head and final norm
    let (lnf_out, _, _) = layer_norm(&cache.x_final, &params.lnf_g, &params.lnf_b, t_len, d);
    let mut d_lnf_out = vec![0.0f64; t_len * d];
    linear_backward(
        &lnf_out,
        &params.head_w,
        dlogits,
        t_len,
        d,
        cfg.output_width,
        &mut d_lnf_out,
        &mut grads.head_w,
        Some(&mut grads.head_b),
    );
    let mut dx = vec![0.0f64; t_len * d];
    layer_norm_backward(
        &d_lnf_out,
        &cache.xhatf,
        &cache.rstdf,
        &params.lnf_g,
        t_len,
        d,
        &mut dx,
        &mut grads.lnf_g,
        &mut grads.lnf_b,
    );

    for (li, lp) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[li];
        let lg = &mut grads.layers[li];

        // MLP block: x = x_mid + w2(gelu(w1 ln2(x_mid)))
        let mut d_h_act = vec![0.0f64; t_len * 4 * d];
        linear_backward(
            &lc.h_act,
            &lp.w2,
            &dx,
            t_len,
            4 * d,
            d,
            &mut d_h_act,
            &mut lg.w2,
            Some(&mut lg.b2),
        );
        let mut d_h_pre = vec![0.0f64; t_len * 4 * d];
        for i in 0..t_len * 4 * d {
            d_h_pre[i] = d_h_act[i] * gelu_grad(lc.h_pre[i]);
        }
        let mut d_ln2_out = vec![0.0f64; t_len * d];
        linear_backward(
            &lc.ln2_out,
            &lp.w1,
            &d_h_pre,
            t_len,
            d,
            4 * d,
            &mut d_ln2_out,
            &mut lg.w1,
            Some(&mut lg.b1),
        );
        // residual: dx flows through both branches
        layer_norm_backward(
            &d_ln2_out,
            &lc.xhat2,
            &lc.rstd2,
            &lp.ln2_g,
            t_len,
            d,
            &mut dx,
            &mut lg.ln2_g,
            &mut lg.ln2_b,
        );

        // attention block: x_mid = x_in + wo(att)
        let mut d_att = vec![0.0f64; t_len * d];
        linear_backward(&lc.att, &lp.wo, &dx, t_len, d, d, &mut d_att, &mut lg.wo, None);
        let mut dq = vec![0.0f64; t_len * d];
        let mut dk = vec![0.0f64; t_len * d];
        let mut dv = vec![0.0f64; t_len * d];
        let mut dp = vec![0.0f64; t_len * t_len];
        let mut ds = vec![0.0f64; t_len * t_len];
        for h in 0..nh {
            let off = h * hd;
            let probs_h = &lc.probs[h * t_len * t_len..(h + 1) * t_len * t_len];
            // dp = d_att_h * v_h^T (masked entries unused below)
            gemm(
                t_len,
                hd,
                t_len,
                1.0,
                &d_att[off..],
                d as isize,
                1,
                &lc.v[off..],
                1,
                d as isize,
                0.0,
                &mut dp,
                t_len as isize,
                1,
            );
            // dv_h += probs_h^T * d_att_h (masked probs are zero)
            gemm(
                t_len,
                t_len,
                hd,
                1.0,
                probs_h,
                1,
                t_len as isize,
                &d_att[off..],
                d as isize,
                1,
                1.0,
                &mut dv[off..],
                d as isize,
                1,
            );
            // softmax backward per query row, masked entries forced to zero
            for t in 0..t_len {
                let mut dot = 0.0f64;
                for u in 0..=t {
                    dot += dp[t * t_len + u] * probs_h[t * t_len + u];
                }
                for u in 0..=t {
                    let p = probs_h[t * t_len + u];
                    ds[t * t_len + u] = p * (dp[t * t_len + u] - dot) * scale;
                }
                for u in t + 1..t_len {
                    ds[t * t_len + u] = 0.0;
                }
            }
            // dq_h += ds * k_h ; dk_h += ds^T * q_h
            gemm(
                t_len,
                t_len,
                hd,
                1.0,
                &ds,
                t_len as isize,
                1,
                &lc.k[off..],
                d as isize,
                1,
                1.0,
                &mut dq[off..],
                d as isize,
                1,
            );
            gemm(
                t_len,
                t_len,
                hd,
                1.0,
                &ds,
                1,
                t_len as isize,
                &lc.q[off..],
                d as isize,
                1,
                1.0,
                &mut dk[off..],
                d as isize,
                1,
            );
        }
        let mut d_ln1_out = vec![0.0f64; t_len * d];
        linear_backward(&lc.ln1_out, &lp.wq, &dq, t_len, d, d, &mut d_ln1_out, &mut lg.wq, None);
        linear_backward(&lc.ln1_out, &lp.wk, &dk, t_len, d, d, &mut d_ln1_out, &mut lg.wk, None);
        linear_backward(&lc.ln1_out, &lp.wv, &dv, t_len, d, d, &mut d_ln1_out, &mut lg.wv, None);
        layer_norm_backward(
            &d_ln1_out,
            &lc.xhat1,
            &lc.rstd1,
            &lp.ln1_g,
            t_len,
            d,
            &mut dx,
            &mut lg.ln1_g,
            &mut lg.ln1_b,
        );
    }

    // embeddings
    for t in 0..t_len {
        for i in 0..d {
            grads.pos[t * d + i] += dx[t * d + i];
        }
    }
    let mut d_tokens = vec![0.0f64; t_len * cfg.input_width];
    linear_backward(
        &cache.tokens,
        &params.tok_w,
        &dx,
        t_len,
        cfg.input_width,
        d,
        &mut d_tokens,
        &mut grads.tok_w,
        Some(&mut grads.tok_b),
    );
}

/// Mean negative log-softmax probability of targets over masked positions.
/// Returns the loss and d(loss)/d(logits).
pub fn nll_loss(
    logits: &[f64],
    targets: &[usize],
    mask: &[bool],
    out_dim: usize,
) -> Result<(f64, Vec<f64>)> {
    let t_len = targets.len();
    assert_eq!(mask.len(), t_len);
    assert_eq!(logits.len(), t_len * out_dim);
    let n_masked = mask.iter().filter(|&&m| m).count();
    if n_masked == 0 {
        return Err(Error::EmptyLossMask);
    }
    let inv = 1.0 / n_masked as f64;
    let mut loss = 0.0f64;
    let mut dlogits = vec![0.0f64; t_len * out_dim];
    for t in 0..t_len {
        if !mask[t] {
            continue;
        }
        let row = &logits[t * out_dim..(t + 1) * out_dim];
        let max = row.iter().cloned().fold(f64::MIN, f64::max);
        let mut sum = 0.0f64;
        for &l in row {
            sum += (l - max).exp();
        }
        let log_z = max + sum.ln();
        loss += (log_z - row[targets[t]]) * inv;
        for o in 0..out_dim {
            let p = (row[o] - max).exp() / sum;
            dlogits[t * out_dim + o] = (p - if o == targets[t] { 1.0 } else { 0.0 }) * inv;
        }
    }
    Ok((loss, dlogits))
}

/// Convenience wrapper matching the historical two-step API.
pub fn nll_loss_backward(
    params: &ModelParams,
    cache: &ForwardCache,
    targets: &[usize],
    mask: &[bool],
    grads: &mut ModelParams,
) -> Result<f64> {
    let (loss, dlogits) = nll_loss(&cache.logits, targets, mask, params.cfg.output_width)?;
    backward(params, cache, &dlogits, grads);
    Ok(loss)
}

/// Incremental single-token inference with per-layer KV caches. Appending a
/// token yields the logits at its position; results match the full forward
/// pass bit-for-bit.
pub struct InferenceState {
    len: usize,
    k_cache: Vec<Vec<f64>>,
    v_cache: Vec<Vec<f64>>,
}

impl InferenceState {
    pub fn new(cfg: &TransformerConfig) -> Self {
        Self {
            len: 0,
            k_cache: vec![Vec::with_capacity(cfg.max_seq_len() * cfg.embed_dim); cfg.num_layers],
            v_cache: vec![Vec::with_capacity(cfg.max_seq_len() * cfg.embed_dim); cfg.num_layers],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Append one token and return the logits at its position.
    pub fn step(&mut self, params: &ModelParams, token: &[f64]) -> Result<Vec<f64>> {
        let cfg = &params.cfg;
        let d = cfg.embed_dim;
        let nh = cfg.num_heads;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let pos = self.len;
        if pos >= cfg.max_seq_len() {
            return Err(Error::ContextOverflow {
                len: pos + 1,
                capacity: cfg.max_seq_len(),
            });
        }
        assert_eq!(token.len(), cfg.input_width);

        let mut x = linear(token, &params.tok_w, Some(&params.tok_b), 1, cfg.input_width, d);
        for i in 0..d {
            x[i] += params.pos[pos * d + i];
        }

        for (li, lp) in params.layers.iter().enumerate() {
            let (ln1_out, _, _) = layer_norm(&x, &lp.ln1_g, &lp.ln1_b, 1, d);
            let q = linear(&ln1_out, &lp.wq, None, 1, d, d);
            let k = linear(&ln1_out, &lp.wk, None, 1, d, d);
            let v = linear(&ln1_out, &lp.wv, None, 1, d, d);
            self.k_cache[li].extend_from_slice(&k);
            self.v_cache[li].extend_from_slice(&v);
            let kc = &self.k_cache[li];
            let vc = &self.v_cache[li];
            let mut att = vec![0.0f64; d];
            let mut scores = vec![0.0f64; pos + 1];
            let mut exps = vec![0.0f64; pos + 1];
            for h in 0..nh {
                let off = h * hd;
                // same kernel as the full forward so results agree bitwise
                gemm(
                    1,
                    hd,
                    pos + 1,
                    scale,
                    &q[off..],
                    d as isize,
                    1,
                    &kc[off..],
                    1,
                    d as isize,
                    0.0,
                    &mut scores,
                    (pos + 1) as isize,
                    1,
                );
                let mut max = f64::MIN;
                for &s in scores.iter() {
                    if s > max {
                        max = s;
                    }
                }
                let mut sum = 0.0f64;
                for u in 0..=pos {
                    let e = (scores[u] - max).exp();
                    exps[u] = e;
                    sum += e;
                }
                let inv = 1.0 / sum;
                for e in exps.iter_mut() {
                    *e *= inv;
                }
                gemm(
                    1,
                    pos + 1,
                    hd,
                    1.0,
                    &exps,
                    (pos + 1) as isize,
                    1,
                    &vc[off..],
                    d as isize,
                    1,
                    0.0,
                    &mut att[off..],
                    hd as isize,
                    1,
                );
            }
            let proj = linear(&att, &lp.wo, None, 1, d, d);
            for i in 0..d {
                x[i] += proj[i];
            }
            let (ln2_out, _, _) = layer_norm(&x, &lp.ln2_g, &lp.ln2_b, 1, d);
            let h_pre = linear(&ln2_out, &lp.w1, Some(&lp.b1), 1, d, 4 * d);
            let h_act: Vec<f64> = h_pre.iter().map(|&v| gelu(v)).collect();
            let mlp_out = linear(&h_act, &lp.w2, Some(&lp.b2), 1, 4 * d, d);
            for i in 0..d {
                x[i] += mlp_out[i];
            }
        }

        let (lnf_out, _, _) = layer_norm(&x, &params.lnf_g, &params.lnf_b, 1, d);
        let logits = linear(&lnf_out, &params.head_w, Some(&params.head_b), 1, d, cfg.output_width);
        self.len += 1;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("transformer inference"));
        }
        Ok(logits)
    }

    /// Drop all cached positions (new episode).
    pub fn reset(&mut self) {
        self.len = 0;
        for k in &mut self.k_cache {
            k.clear();
        }
        for v in &mut self.v_cache {
            v.clear();
        }
    }
}
