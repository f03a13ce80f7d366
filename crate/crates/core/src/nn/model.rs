//! Forward and backward passes.
//!
//! Layer: multi-head self-attention, residual, layer norm, GELU feed-forward,
//! residual, layer norm (post-norm). Input features go through a linear
//! embedding first; the head mean-pools the last hidden state over positions.

use crate::error::{shape_err, Error, Result};
use crate::numerics::Matrix;

use super::{GradSet, ParamSet};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Clone, Debug)]
struct NormCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

#[derive(Clone, Debug)]
struct LayerCache {
    input: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    concat: Matrix,
    ln1: NormCache,
    n1: Matrix,
    ffn_pre: Matrix,
    ffn_act: Matrix,
    ln2: NormCache,
}

/// Everything a forward pass exposes, plus the activations backward needs.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Output of each layer, `seq_len x hidden_dim`.
    pub hidden_states: Vec<Matrix>,
    /// Attention probabilities of each layer, heads stacked row-wise:
    /// `(num_heads * seq_len) x seq_len`.
    pub attentions: Vec<Matrix>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    layers: Vec<LayerCache>,
    pooled: Matrix,
}

/// Upstream gradients flowing into a trace: w.r.t. output probabilities and
/// each traced hidden state / attention heatmap. `None` means zero.
#[derive(Clone, Debug)]
pub struct LossGradBundle {
    pub probs: Option<Vec<f64>>,
    pub hidden: Vec<Option<Matrix>>,
    pub attention: Vec<Option<Matrix>>,
}

impl LossGradBundle {
    pub fn zeros(num_layers: usize) -> Self {
        Self {
            probs: None,
            hidden: vec![None; num_layers],
            attention: vec![None; num_layers],
        }
    }

    pub fn with_probs(num_layers: usize, probs: Vec<f64>) -> Self {
        Self {
            probs: Some(probs),
            ..Self::zeros(num_layers)
        }
    }
}

pub fn forward(params: &ParamSet, input: &Matrix) -> Result<ForwardTrace> {
    let cfg = params.config();
    if input.shape() != (cfg.seq_len, cfg.input_dim) {
        return Err(shape_err(
            "model input",
            input.shape(),
            (cfg.seq_len, cfg.input_dim),
        ));
    }
    let mut h = linear(input, params.get("embed.w"), params.get("embed.b"));
    let mut hidden_states = Vec::with_capacity(cfg.num_layers);
    let mut attentions = Vec::with_capacity(cfg.num_layers);
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let (out, att, cache) = layer_forward(params, l, h);
        hidden_states.push(out.clone());
        attentions.push(att);
        layers.push(cache);
        h = out;
    }
    let mut pooled = h.col_sums();
    pooled.scale_in_place(1.0 / cfg.seq_len as f64);
    let logits = linear(&pooled, params.get("head.w"), params.get("head.b")).into_vec();
    let probs = softmax(&logits);
    Ok(ForwardTrace {
        hidden_states,
        attentions,
        logits,
        probs,
        layers,
        pooled,
    })
}

/// Argmax class of the model output.
pub fn predict(params: &ParamSet, input: &Matrix) -> Result<usize> {
    let trace = forward(params, input)?;
    Ok(argmax(&trace.probs))
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn layer_forward(params: &ParamSet, l: usize, input: Matrix) -> (Matrix, Matrix, LayerCache) {
    let cfg = params.config();
    let (s, nh, dh) = (cfg.seq_len, cfg.num_heads, cfg.head_dim());
    let p = |name: &str| params.get(&format!("layer.{l}.{name}"));
    let q = linear(&input, p("attn.wq"), p("attn.bq"));
    let k = linear(&input, p("attn.wk"), p("attn.bk"));
    let v = linear(&input, p("attn.wv"), p("attn.bv"));
    let scale = 1.0 / (dh as f64).sqrt();

    let mut att = Matrix::zeros(nh * s, s);
    let mut concat = Matrix::zeros(s, cfg.hidden_dim);
    for head in 0..nh {
        let qh = q.col_block(head * dh, dh);
        let kh = k.col_block(head * dh, dh);
        let vh = v.col_block(head * dh, dh);
        let mut a = qh.mul_nt(&kh);
        a.scale_in_place(scale);
        for i in 0..s {
            let row = softmax(a.row(i));
            a.row_mut(i).copy_from_slice(&row);
        }
        concat.set_col_block(head * dh, &a.mul(&vh));
        att.set_row_block(head * s, &a);
    }
    let mut r1 = linear(&concat, p("attn.wo"), p("attn.bo"));
    r1.add_assign(&input).expect("residual shape");
    let (n1, ln1) = layer_norm(&r1, p("ln1.gamma"), p("ln1.beta"));

    let ffn_pre = linear(&n1, p("ffn.w1"), p("ffn.b1"));
    let ffn_act = ffn_pre.map(gelu);
    let mut r2 = linear(&ffn_act, p("ffn.w2"), p("ffn.b2"));
    r2.add_assign(&n1).expect("residual shape");
    let (out, ln2) = layer_norm(&r2, p("ln2.gamma"), p("ln2.beta"));

    let cache = LayerCache {
        input,
        q,
        k,
        v,
        concat,
        ln1,
        n1,
        ffn_pre,
        ffn_act,
        ln2,
    };
    (out, att, cache)
}

/// Exact gradient of the composed loss w.r.t. every parameter.
pub fn backward(
    params: &ParamSet,
    input: &Matrix,
    trace: &ForwardTrace,
    upstream: &LossGradBundle,
) -> Result<GradSet> {
    let mut grads = GradSet::zeros_like(params);
    backward_into(params, input, trace, upstream, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`] but accumulates into `grads`.
pub fn backward_into(
    params: &ParamSet,
    input: &Matrix,
    trace: &ForwardTrace,
    upstream: &LossGradBundle,
    grads: &mut GradSet,
) -> Result<()> {
    let cfg = params.config();
    let nl = cfg.num_layers;
    grads.check_layout(params)?;
    if input.shape() != (cfg.seq_len, cfg.input_dim) {
        return Err(shape_err(
            "model input",
            input.shape(),
            (cfg.seq_len, cfg.input_dim),
        ));
    }
    if trace.layers.len() != nl || upstream.hidden.len() != nl || upstream.attention.len() != nl
    {
        return Err(Error::Shape(format!(
            "trace/bundle layer counts do not match {nl} model layers"
        )));
    }
    for l in 0..nl {
        if let Some(g) = &upstream.hidden[l] {
            if g.shape() != trace.hidden_states[l].shape() {
                return Err(shape_err("hidden upstream", g.shape(), trace.hidden_states[l].shape()));
            }
        }
        if let Some(g) = &upstream.attention[l] {
            if g.shape() != trace.attentions[l].shape() {
                return Err(shape_err("attention upstream", g.shape(), trace.attentions[l].shape()));
            }
        }
    }

    let mut d_h = Matrix::zeros(cfg.seq_len, cfg.hidden_dim);
    if let Some(dp) = &upstream.probs {
        if dp.len() != cfg.num_classes {
            return Err(Error::Shape(format!(
                "probability gradient has {} entries, expected {}",
                dp.len(),
                cfg.num_classes
            )));
        }
        let d_logits = Matrix::row_vector(&softmax_backward(&trace.probs, dp));
        grads
            .entry("head.w")
            .add_assign(&trace.pooled.mul_tn(&d_logits))?;
        grads.entry("head.b").add_assign(&d_logits)?;
        let d_pooled = d_logits.mul_nt(params.get("head.w"));
        let inv_s = 1.0 / cfg.seq_len as f64;
        for i in 0..cfg.seq_len {
            for (o, &g) in d_h.row_mut(i).iter_mut().zip(d_pooled.data()) {
                *o += g * inv_s;
            }
        }
    }

    for l in (0..nl).rev() {
        if let Some(g) = &upstream.hidden[l] {
            d_h.add_assign(g)?;
        }
        d_h = layer_backward(
            params,
            l,
            &trace.layers[l],
            &trace.attentions[l],
            d_h,
            upstream.attention[l].as_ref(),
            grads,
        )?;
    }

    grads.entry("embed.w").add_assign(&input.mul_tn(&d_h))?;
    grads.entry("embed.b").add_assign(&d_h.col_sums())?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn layer_backward(
    params: &ParamSet,
    l: usize,
    cache: &LayerCache,
    att: &Matrix,
    d_out: Matrix,
    d_att_up: Option<&Matrix>,
    grads: &mut GradSet,
) -> Result<Matrix> {
    let cfg = params.config();
    let (s, nh, dh) = (cfg.seq_len, cfg.num_heads, cfg.head_dim());
    let name = |n: &str| format!("layer.{l}.{n}");
    let p = |n: &str| params.get(&name(n));

    // second norm and feed-forward
    let (d_r2, dg2, db2) = layer_norm_backward(&d_out, &cache.ln2, p("ln2.gamma"));
    grads.entry(&name("ln2.gamma")).add_assign(&dg2)?;
    grads.entry(&name("ln2.beta")).add_assign(&db2)?;

    grads
        .entry(&name("ffn.w2"))
        .add_assign(&cache.ffn_act.mul_tn(&d_r2))?;
    grads.entry(&name("ffn.b2")).add_assign(&d_r2.col_sums())?;
    let d_act = d_r2.mul_nt(p("ffn.w2"));
    let mut d_pre = d_act;
    for (g, &x) in d_pre.data_mut().iter_mut().zip(cache.ffn_pre.data()) {
        *g *= gelu_grad(x);
    }
    grads
        .entry(&name("ffn.w1"))
        .add_assign(&cache.n1.mul_tn(&d_pre))?;
    grads.entry(&name("ffn.b1")).add_assign(&d_pre.col_sums())?;
    let mut d_n1 = d_r2;
    d_n1.add_assign(&d_pre.mul_nt(p("ffn.w1")))?;

    // first norm and attention
    let (d_r1, dg1, db1) = layer_norm_backward(&d_n1, &cache.ln1, p("ln1.gamma"));
    grads.entry(&name("ln1.gamma")).add_assign(&dg1)?;
    grads.entry(&name("ln1.beta")).add_assign(&db1)?;

    grads
        .entry(&name("attn.wo"))
        .add_assign(&cache.concat.mul_tn(&d_r1))?;
    grads.entry(&name("attn.bo")).add_assign(&d_r1.col_sums())?;
    let d_concat = d_r1.mul_nt(p("attn.wo"));

    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Matrix::zeros(s, cfg.hidden_dim);
    let mut dk = Matrix::zeros(s, cfg.hidden_dim);
    let mut dv = Matrix::zeros(s, cfg.hidden_dim);
    for head in 0..nh {
        let a = att.row_block(head * s, s);
        let d_oh = d_concat.col_block(head * dh, dh);
        let qh = cache.q.col_block(head * dh, dh);
        let kh = cache.k.col_block(head * dh, dh);
        let vh = cache.v.col_block(head * dh, dh);

        let mut d_a = d_oh.mul_nt(&vh);
        if let Some(up) = d_att_up {
            d_a.add_assign(&up.row_block(head * s, s))?;
        }
        dv.set_col_block(head * dh, &a.mul_tn(&d_oh));

        let mut d_scores = Matrix::zeros(s, s);
        for i in 0..s {
            let row = softmax_backward(a.row(i), d_a.row(i));
            d_scores.row_mut(i).copy_from_slice(&row);
        }
        d_scores.scale_in_place(scale);
        dq.set_col_block(head * dh, &d_scores.mul(&kh));
        dk.set_col_block(head * dh, &d_scores.mul_tn(&qh));
    }

    let mut d_in = d_r1;
    for (proj, bias, d) in [
        ("attn.wq", "attn.bq", &dq),
        ("attn.wk", "attn.bk", &dk),
        ("attn.wv", "attn.bv", &dv),
    ] {
        grads.entry(&name(proj)).add_assign(&cache.input.mul_tn(d))?;
        grads.entry(&name(bias)).add_assign(&d.col_sums())?;
        d_in.add_assign(&d.mul_nt(p(proj)))?;
    }
    Ok(d_in)
}

fn linear(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut out = x.mul(w);
    out.add_row_broadcast(b);
    out
}

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Gradient w.r.t. softmax inputs given the gradient w.r.t. its outputs.
fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pi, di)| pi * (di - inner)).collect()
}

fn layer_norm(x: &Matrix, gamma: &Matrix, beta: &Matrix) -> (Matrix, NormCache) {
    let (rows, cols) = x.shape();
    let mut xhat = Matrix::zeros(rows, cols);
    let mut out = Matrix::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for j in 0..cols {
            let xh = (row[j] - mean) * is;
            xhat.set(i, j, xh);
            out.set(i, j, gamma.get(0, j) * xh + beta.get(0, j));
        }
    }
    (out, NormCache { xhat, inv_std })
}

fn layer_norm_backward(d_out: &Matrix, cache: &NormCache, gamma: &Matrix) -> (Matrix, Matrix, Matrix) {
    let (rows, cols) = d_out.shape();
    let mut dx = Matrix::zeros(rows, cols);
    let mut dgamma = Matrix::zeros(1, cols);
    let mut dbeta = Matrix::zeros(1, cols);
    let n = cols as f64;
    for i in 0..rows {
        let dy = d_out.row(i);
        let xh = cache.xhat.row(i);
        let mut dxhat = vec![0.0; cols];
        for j in 0..cols {
            dxhat[j] = dy[j] * gamma.get(0, j);
            dgamma.data_mut()[j] += dy[j] * xh[j];
            dbeta.data_mut()[j] += dy[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / n;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
        let is = cache.inv_std[i];
        for j in 0..cols {
            dx.set(i, j, is * (dxhat[j] - mean_d - xh[j] * mean_dx));
        }
    }
    (dx, dgamma, dbeta)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}
