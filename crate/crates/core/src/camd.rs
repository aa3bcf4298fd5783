//! Cross-attentional multimodal decoder and greedy caption generation.

use crate::caie::EncodedImage;
use crate::error::{Error, Result};
use crate::features_cam::{AttentionMap, ModelInput};
use crate::model::encode_image;
use crate::nn::{add_norm, cross_attention, ffn, linear, self_attention};
use crate::nncm::Nncm;
use crate::params::{Bound, ModelParams};
use crate::scene::vocab::{BOS, EOS};
use crate::tensor::{Real, Tape, Var};

pub struct Fused<'t, T: Real> {
    /// One row per text position.
    pub h_mul: Var<'t, T>,
    /// Mean text-token embedding, `[1, d]`.
    pub h_txt: Var<'t, T>,
}

/// Prefixes the pooled image token to the embedded text and applies one causal
/// self-attention + FFN block. Inputs beyond `max_len` tokens are dropped.
pub fn fuse_multimodal<'t, T: Real>(h_img_pooled: &Var<'t, T>, token_ids: &[u32], p: &Bound<'t, T>) -> Result<Fused<'t, T>> {
    match token_ids.first() {
        Some(&BOS) => {}
        Some(&t) => return Err(Error::Contract(format!("token sequence starts with {t}, expected BOS"))),
        None => return Err(Error::Contract("empty token sequence".into())),
    }
    let max_len = p.config.max_len;
    let ids = if token_ids.len() > max_len {
        log::warn!("truncating a {}-token input to {max_len}", token_ids.len());
        &token_ids[..max_len]
    } else {
        token_ids
    };
    let ids: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
    let n = ids.len();
    let emb = p.tape.embedding(p.p("fuse.tok")?, &ids)?;
    let seq = p
        .tape
        .concat(&[*h_img_pooled, emb], 0)?
        .add(&p.p("fuse.pos")?.slice_rows(0, n + 1)?)?;
    let a = self_attention(&seq, p, "fuse.mha", None, true)?;
    let x = add_norm(&seq, &a, p, "fuse.ln1")?;
    let f = ffn(&x, p, "fuse.ffn")?;
    let x = add_norm(&x, &f, p, "fuse.ln2")?;
    Ok(Fused {
        h_mul: x.slice_rows(1, n + 1)?,
        h_txt: emb.mean_rows()?,
    })
}

pub struct DecoderOutput<'t, T: Real> {
    pub logits: Var<'t, T>,
    pub p_next: Var<'t, T>,
    /// Input of the last layer's FFN, one row per position.
    pub z: Var<'t, T>,
}

/// `x = LN(h + CrossAttn(h, h_imgs))`, `h = LN(x + FFN(x))` per layer, then a softmax head.
pub fn decode<'t, T: Real>(h_mul: &Var<'t, T>, image: &EncodedImage<'t, T>, p: &Bound<'t, T>) -> Result<DecoderOutput<'t, T>> {
    if image.h_imgs.shape()[0] == 0 || image.valid_rows() == 0 {
        return Err(Error::Contract("decoder needs a non-empty image sequence".into()));
    }
    let mut h = *h_mul;
    let mut z = h;
    for l in 0..p.config.dec_layers {
        let a = cross_attention(&h, &image.h_imgs, p, &format!("dec.{l}.ca"), Some(&image.mask))?;
        let x = add_norm(&h, &a, p, &format!("dec.{l}.ln1"))?;
        let f = ffn(&x, p, &format!("dec.{l}.ffn"))?;
        h = add_norm(&x, &f, p, &format!("dec.{l}.ln2"))?;
        z = x;
    }
    let logits = linear(&h, &p.p("out.w")?, &p.p("out.b")?)?;
    Ok(DecoderOutput {
        p_next: logits.softmax_last()?,
        logits,
        z,
    })
}

/// Lowest index among the maxima.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding driven by `step(prefix) -> (p_next, z)` for the last prefix
/// position. Returns the emitted tokens (EOS included when reached).
pub fn greedy_decode(
    mut step: impl FnMut(&[u32]) -> Result<(Vec<f64>, Vec<f32>)>,
    nncm: Option<&Nncm<'_>>,
    max_len: usize,
) -> Result<Vec<u32>> {
    let mut tokens = vec![BOS];
    while tokens.len() <= max_len {
        let (p_model, z) = step(&tokens)?;
        let p = match nncm {
            Some(n) => n.rescore(&z, &p_model)?,
            None => p_model,
        };
        let next = argmax(&p) as u32;
        tokens.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(tokens.split_off(1))
}

pub fn greedy_generate<T: Real>(
    input: &ModelInput<T>,
    att: &AttentionMap,
    params: &ModelParams<T>,
    nncm: Option<&Nncm<'_>>,
) -> Result<Vec<u32>> {
    let tape = Tape::new();
    let p = params.bind(&tape, |_| false);
    let image = encode_image(input, att, &p)?;
    let pooled = image.pooled()?;
    greedy_decode(
        |prefix| {
            let fused = fuse_multimodal(&pooled, prefix, &p)?;
            let out = decode(&fused.h_mul, &image, &p)?;
            let last = prefix.len() - 1;
            let probs = out.p_next.slice_rows(last, last + 1)?.data().iter().map(|v| v.as_f64()).collect();
            let z = out.z.slice_rows(last, last + 1)?.data().iter().map(|v| v.as_f32()).collect();
            Ok((probs, z))
        },
        nncm,
        params.config.max_len,
    )
}
