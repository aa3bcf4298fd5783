//! Cross-attentional image encoder: destination and obstacle streams attend to the target.

use crate::error::{Error, Result};
use crate::nn::{add_norm, ffn, self_attention};
use crate::params::Bound;
use crate::tensor::{Real, Var};

pub use crate::nn::cross_attention;

#[derive(Clone, Debug)]
pub struct EncoderState<'t, T: Real> {
    pub h_img: Var<'t, T>,
    pub h_obst: Var<'t, T>,
    /// True at padded obstacle rows.
    pub obst_mask: Vec<bool>,
    pub layer_index: usize,
}

/// Encoder output: image rows followed by obstacle rows, and the key mask over them.
#[derive(Clone, Debug)]
pub struct EncodedImage<'t, T: Real> {
    pub h_imgs: Var<'t, T>,
    pub mask: Vec<bool>,
}

impl<'t, T: Real> EncodedImage<'t, T> {
    pub fn valid_rows(&self) -> usize {
        self.mask.iter().filter(|m| !**m).count()
    }

    /// Mean over the unmasked rows, shape `[1, d]`.
    pub fn pooled(&self) -> Result<Var<'t, T>> {
        let n = self.valid_rows();
        if n == 0 {
            return Err(Error::Contract("no unmasked image rows to pool".into()));
        }
        let w = self.mask.iter().map(|&m| if m { T::zero() } else { T::lit(1.0 / n as f64) }).collect();
        let tape = self.h_imgs.tape();
        tape.constant_vec(&[1, self.mask.len()], w)?.matmul(&self.h_imgs)
    }
}

fn stream<'t, T: Real>(
    x: &Var<'t, T>,
    h_targ: &Var<'t, T>,
    p: &Bound<'t, T>,
    prefix: &str,
    mask: Option<&[bool]>,
) -> Result<Var<'t, T>> {
    let a = cross_attention(x, h_targ, p, &format!("{prefix}.ca"), None)?;
    let x = add_norm(x, &a, p, &format!("{prefix}.ln1"))?;
    let f = ffn(&x, p, &format!("{prefix}.ffn1"))?;
    let x = add_norm(&x, &f, p, &format!("{prefix}.ln2"))?;
    let m = self_attention(&x, p, &format!("{prefix}.mha"), mask, false)?;
    let x = add_norm(&x, &m, p, &format!("{prefix}.ln3"))?;
    let f = ffn(&x, p, &format!("{prefix}.ffn2"))?;
    add_norm(&x, &f, p, &format!("{prefix}.ln4"))
}

/// One encoder layer: cross-attention to `h_targ`, FFN, 4-head self-attention,
/// FFN, each with residual and layer norm; the two streams have separate weights.
pub fn caie_layer<'t, T: Real>(
    state: EncoderState<'t, T>,
    h_targ: &Var<'t, T>,
    p: &Bound<'t, T>,
) -> Result<EncoderState<'t, T>> {
    let l = state.layer_index;
    if l >= p.config.enc_layers {
        return Err(Error::Contract(format!("layer {l} beyond the {} configured", p.config.enc_layers)));
    }
    let h_img = stream(&state.h_img, h_targ, p, &format!("enc.{l}.img"), None)?;
    let h_obst = stream(&state.h_obst, h_targ, p, &format!("enc.{l}.obst"), Some(&state.obst_mask))?;
    Ok(EncoderState {
        h_img,
        h_obst,
        obst_mask: state.obst_mask,
        layer_index: l + 1,
    })
}

pub fn encode<'t, T: Real>(
    h_dest: &Var<'t, T>,
    h_obst: &Var<'t, T>,
    obst_mask: &[bool],
    h_targ: &Var<'t, T>,
    p: &Bound<'t, T>,
) -> Result<EncodedImage<'t, T>> {
    if obst_mask.len() != h_obst.shape()[0] {
        return Err(Error::shape("obstacle mask", &h_obst.shape(), &[obst_mask.len()]));
    }
    let mut state = EncoderState {
        h_img: *h_dest,
        h_obst: *h_obst,
        obst_mask: obst_mask.to_vec(),
        layer_index: 0,
    };
    for _ in 0..p.config.enc_layers {
        state = caie_layer(state, h_targ, p)?;
    }
    let n_img = state.h_img.shape()[0];
    let mut mask = vec![false; n_img];
    mask.extend_from_slice(&state.obst_mask);
    Ok(EncodedImage {
        h_imgs: p.tape.concat(&[state.h_img, state.h_obst], 0)?,
        mask,
    })
}
