//! Transformer building blocks over [`Var`]s, row convention (`x · W`).

use crate::error::{Error, Result};
use crate::params::{Bound, HEADS};
use crate::tensor::{Real, Var};

pub fn linear<'t, T: Real>(x: &Var<'t, T>, w: &Var<'t, T>, b: &Var<'t, T>) -> Result<Var<'t, T>> {
    x.matmul(w)?.add_bias(b)
}

/// `relu(x W1 + b1) W2 + b2`
pub fn ffn<'t, T: Real>(x: &Var<'t, T>, p: &Bound<'t, T>, prefix: &str) -> Result<Var<'t, T>> {
    let h = linear(x, &p.p(&format!("{prefix}.w1"))?, &p.p(&format!("{prefix}.b1"))?)?.relu();
    linear(&h, &p.p(&format!("{prefix}.w2"))?, &p.p(&format!("{prefix}.b2"))?)
}

/// `LN(x + branch)` with gain/bias `{prefix}.g`, `{prefix}.b`.
pub fn add_norm<'t, T: Real>(x: &Var<'t, T>, branch: &Var<'t, T>, p: &Bound<'t, T>, prefix: &str) -> Result<Var<'t, T>> {
    x.add(branch)?.layernorm(&p.p(&format!("{prefix}.g"))?, &p.p(&format!("{prefix}.b"))?)
}

/// Row-stochastic attention weights `softmax(q kᵀ · scale)`. Keys flagged in
/// `key_mask` and, if `causal`, keys after the query position get weight 0.
pub fn attention_weights<'t, T: Real>(
    q: &Var<'t, T>,
    k: &Var<'t, T>,
    scale: f64,
    key_mask: Option<&[bool]>,
    causal: bool,
) -> Result<Var<'t, T>> {
    let (nq, nk) = (q.shape()[0], k.shape()[0]);
    if nk == 0 {
        return Err(Error::Contract("attention over an empty key sequence".into()));
    }
    if let Some(m) = key_mask {
        if m.len() != nk {
            return Err(Error::shape("attention mask", &[nk], &[m.len()]));
        }
    }
    let scores = q.matmul_t(k)?.scale(T::lit(scale));
    if key_mask.is_none() && !causal {
        return scores.softmax_last();
    }
    let mask: Vec<bool> = (0..nq * nk)
        .map(|i| {
            let (r, c) = (i / nk, i % nk);
            key_mask.is_some_and(|m| m[c]) || (causal && c > r)
        })
        .collect();
    scores.masked_fill(&mask, T::neg_infinity())?.softmax_last()
}

/// Single-head cross-attention `softmax(d^-1/2 (X_A W_Q)(X_B W_K)ᵀ)(X_B W_V)`.
pub fn cross_attention<'t, T: Real>(
    xa: &Var<'t, T>,
    xb: &Var<'t, T>,
    p: &Bound<'t, T>,
    prefix: &str,
    key_mask: Option<&[bool]>,
) -> Result<Var<'t, T>> {
    if xb.shape()[0] == 0 {
        return Err(Error::Contract("cross-attention needs at least one key".into()));
    }
    let d = xa.shape()[1];
    let q = xa.matmul(&p.p(&format!("{prefix}.wq"))?)?;
    let k = xb.matmul(&p.p(&format!("{prefix}.wk"))?)?;
    let v = xb.matmul(&p.p(&format!("{prefix}.wv"))?)?;
    attention_weights(&q, &k, 1.0 / (d as f64).sqrt(), key_mask, false)?.matmul(&v)
}

/// Multi-head self-attention with [`HEADS`] heads and an output projection.
pub fn self_attention<'t, T: Real>(
    x: &Var<'t, T>,
    p: &Bound<'t, T>,
    prefix: &str,
    key_mask: Option<&[bool]>,
    causal: bool,
) -> Result<Var<'t, T>> {
    let d = x.shape()[1];
    let dh = d / HEADS;
    let q = x.matmul(&p.p(&format!("{prefix}.wq"))?)?;
    let k = x.matmul(&p.p(&format!("{prefix}.wk"))?)?;
    let v = x.matmul(&p.p(&format!("{prefix}.wv"))?)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let heads = (0..HEADS)
        .map(|h| {
            let (a, b) = (h * dh, (h + 1) * dh);
            let w = attention_weights(&q.slice_cols(a, b)?, &k.slice_cols(a, b)?, scale, key_mask, causal)?;
            w.matmul(&v.slice_cols(a, b)?)
        })
        .collect::<Result<Vec<_>>>()?;
    x.tape().concat(&heads, 1)?.matmul(&p.p(&format!("{prefix}.wo"))?)
}
