//! Whole-model forward passes shared by training, datastore building and generation.

use crate::caie::{encode, EncodedImage};
use crate::camd::{decode, fuse_multimodal};
use crate::error::{Error, Result};
use crate::features_cam::{collision_attention, embed_obstacles, encode_destination, encode_target, AttentionMap, ModelInput};
use crate::params::{Bound, ModelParams};
use crate::tensor::{Real, Var};

/// Visual encoder: destination (with attention channel), target and obstacles through CAIE.
pub fn encode_image<'t, T: Real>(input: &ModelInput<T>, att: &AttentionMap, p: &Bound<'t, T>) -> Result<EncodedImage<'t, T>> {
    let tape = p.tape;
    let dest = tape.constant(&input.dest);
    let targ = tape.constant(&input.targ);
    let att = tape.constant(&att.to_tensor());
    let h_dest = encode_destination(&dest, &att, p)?;
    let h_targ = encode_target(&targ, p)?;
    let (h_obst, mask) = embed_obstacles(&input.regions, p)?;
    encode(&h_dest, &h_obst, &mask, &h_targ, p)
}

/// The attention map the captioner sees: the frozen CAM's output, or zeros without a CAM.
pub fn attention_for<T: Real>(params: &ModelParams<T>, input: &ModelInput<T>) -> Result<AttentionMap> {
    if params.config.use_cam {
        Ok(collision_attention(params, input)?.1)
    } else {
        Ok(AttentionMap::zeros())
    }
}

pub struct TeacherForced<'t, T: Real> {
    /// `[T-1, V]` next-token logits for inputs `y[0..T-1]`.
    pub logits: Var<'t, T>,
    pub z: Var<'t, T>,
    pub h_img: Var<'t, T>,
    pub h_txt: Var<'t, T>,
    /// `y[1..T]`
    pub targets: Vec<u32>,
}

pub fn teacher_forced<'t, T: Real>(
    input: &ModelInput<T>,
    att: &AttentionMap,
    caption: &[u32],
    p: &Bound<'t, T>,
) -> Result<TeacherForced<'t, T>> {
    if caption.len() < 2 {
        return Err(Error::Input(format!("caption of {} tokens has nothing to predict", caption.len())));
    }
    let n = caption.len().min(p.config.max_len + 1);
    if n < caption.len() {
        log::warn!("truncating a {}-token caption to {n}", caption.len());
    }
    let image = encode_image(input, att, p)?;
    let h_img = image.pooled()?;
    let fused = fuse_multimodal(&h_img, &caption[..n - 1], p)?;
    let out = decode(&fused.h_mul, &image, p)?;
    Ok(TeacherForced {
        logits: out.logits,
        z: out.z,
        h_img,
        h_txt: fused.h_txt,
        targets: caption[1..n].to_vec(),
    })
}
