//! Neural primitives composed from tape operations: linear maps, instance
//! and layer normalization, multi-head self-attention and the sinusoidal
//! positional table.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x [T, in] -> x @ w [in, out] (+ b [1, out])`.
pub fn linear<F: Real>(tape: &mut Tape<F>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

/// Per-channel standardization of `[C, T]` over the time axis:
/// `(x - mean) / sqrt(var + eps)`, population variance, no learned affine.
pub fn instance_norm<F: Real>(tape: &mut Tape<F>, x: Var, eps: f64) -> Result<Var> {
    if tape.shape(x).len() != 2 {
        return Err(Error::Shape(format!(
            "instance_norm expects [C, T], got {:?}",
            tape.shape(x)
        )));
    }
    normalize_axis(tape, x, 1, eps)
}

/// Standardize over `axis` (kept with extent 1 internally).
fn normalize_axis<F: Real>(tape: &mut Tape<F>, x: Var, axis: usize, eps: f64) -> Result<Var> {
    let mu = tape.mean_axis(x, axis)?;
    let centered = tape.sub(x, mu)?;
    let sq = tape.square(centered)?;
    let var = tape.mean_axis(sq, axis)?;
    let shifted = tape.shift(var, F::from_f64(eps));
    let denom = tape.sqrt(shifted);
    tape.div(centered, denom)
}

/// Layer normalization over the feature axis of `[T, d]` with learned
/// per-feature scale `gamma [1, d]` and shift `beta [1, d]`.
pub fn layer_norm<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<Var> {
    let normed = normalize_axis(tape, x, 1, eps)?;
    let scaled = tape.mul(normed, gamma)?;
    tape.add(scaled, beta)
}

/// Weights of one pre-norm transformer encoder layer.
#[derive(Clone, Copy)]
pub struct AttentionParams {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub ff1_w: Var,
    pub ff1_b: Var,
    pub ff2_w: Var,
    pub ff2_b: Var,
}

/// Scaled dot-product multi-head self-attention on `x [T, d]`, returning the
/// output projection `concat(head_1..head_h) @ wo + bo`.
pub fn multi_head_attention<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    p: &AttentionParams,
    n_heads: usize,
) -> Result<Var> {
    let d = tape.shape(x)[1];
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Config(format!(
            "model width {d} not divisible by {n_heads} heads"
        )));
    }
    let dh = d / n_heads;
    let q = linear(tape, x, p.wq, Some(p.bq))?;
    let k = linear(tape, x, p.wk, Some(p.bk))?;
    let v = linear(tape, x, p.wv, Some(p.bv))?;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.narrow(q, 1, h * dh, dh)?;
        let kh = tape.narrow(k, 1, h * dh, dh)?;
        let vh = tape.narrow(v, 1, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let ctx = tape.concat(&heads, 1)?;
    linear(tape, ctx, p.wo, Some(p.bo))
}

/// One pre-norm transformer encoder layer:
/// `h = x + MHA(LN(x)); out = h + FFN(LN(h))` with a ReLU feed-forward.
pub fn attention_block<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    p: &AttentionParams,
    n_heads: usize,
) -> Result<Var> {
    let normed = layer_norm(tape, x, p.ln1_g, p.ln1_b, LAYER_NORM_EPS)?;
    let attn = multi_head_attention(tape, normed, p, n_heads)?;
    let h = tape.add(x, attn)?;
    let normed2 = layer_norm(tape, h, p.ln2_g, p.ln2_b, LAYER_NORM_EPS)?;
    let f1 = linear(tape, normed2, p.ff1_w, Some(p.ff1_b))?;
    let f1 = tape.relu(f1);
    let f2 = linear(tape, f1, p.ff2_w, Some(p.ff2_b))?;
    tape.add(h, f2)
}

/// Fixed sinusoidal position table of shape `[t, d]`.
pub fn sinusoidal_encoding<F: Real>(t: usize, d: usize) -> Tensor<F> {
    let mut out = Tensor::zeros(vec![t, d]);
    for pos in 0..t {
        for i in 0..d {
            let exponent = 2.0 * ((i / 2) as f64) / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            out.set(&[pos, i], F::from_f64(v));
        }
    }
    out
}

/// Softmax cross-entropy of a logit row `[1, C]` against a class id.
pub fn softmax_cross_entropy<F: Real>(tape: &mut Tape<F>, logits: Var, label: usize) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let classes = *shape.last().ok_or_else(|| Error::Shape("empty logits".into()))?;
    if tape.data(logits).len() != classes {
        return Err(Error::Shape(format!(
            "expected a single logit row, got shape {shape:?}"
        )));
    }
    if label >= classes {
        return Err(Error::Data(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    let probs = tape.softmax(logits)?;
    let picked = tape.narrow(probs, shape.len() - 1, label, 1)?;
    let logp = tape.ln(picked);
    let s = tape.sum_all(logp);
    Ok(tape.neg(s))
}
