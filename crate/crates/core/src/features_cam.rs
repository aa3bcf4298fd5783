//! Input embeddings and the collision attention module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::linear;
use crate::params::Bound;
use crate::scene::catalog::GRID;
use crate::scene::dataset::{RegionDescriptor, Sample, CHANNELS, REGION_DIM};
use crate::scene::layout::MAX_OBSTACLES;
use crate::tensor::{Real, Tape, Tensor, Var};

const CELLS: usize = GRID * GRID;

/// `(x1, y1, x2, y2)` scaled by `grid_size`, followed by width, height and area.
pub fn encode_positional(bbox: [f64; 4], grid_size: f64) -> Result<[f64; 7]> {
    let [x1, y1, x2, y2] = bbox;
    if !(grid_size > 0.0) || bbox.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input(format!("invalid box {bbox:?} for grid {grid_size}")));
    }
    if x2 <= x1 || y2 <= y1 {
        return Err(Error::Input(format!("degenerate box {bbox:?}")));
    }
    if x1 < 0.0 || y1 < 0.0 || x2 > grid_size || y2 > grid_size {
        return Err(Error::Input(format!("box {bbox:?} leaves the {grid_size} grid")));
    }
    let [x1, y1, x2, y2] = [x1 / grid_size, y1 / grid_size, x2 / grid_size, y2 / grid_size];
    let (w, h) = (x2 - x1, y2 - y1);
    Ok([x1, y1, x2, y2, w, h, w * h])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionFeature {
    pub visual: Vec<f64>,
    /// Normalised `(x1, y1, x2, y2)`.
    pub bbox: [f64; 4],
    pub pos7: [f64; 7],
}

impl RegionFeature {
    pub fn new(visual: Vec<f64>, cell_box: [f64; 4], grid_size: f64) -> Result<Self> {
        if visual.len() != REGION_DIM {
            return Err(Error::shape("region visual", &[REGION_DIM], &[visual.len()]));
        }
        let pos7 = encode_positional(cell_box, grid_size)?;
        Ok(Self {
            visual,
            bbox: [pos7[0], pos7[1], pos7[2], pos7[3]],
            pos7,
        })
    }

    pub fn from_descriptor(d: &RegionDescriptor) -> Result<Self> {
        Self::new(
            d.visual.iter().map(|&v| v as f64).collect(),
            d.bbox.map(f64::from),
            GRID as f64,
        )
    }

    fn row<T: Real>(&self) -> impl Iterator<Item = T> + '_ {
        self.visual.iter().chain(&self.pos7).map(|&v| T::lit(v))
    }
}

/// Per-cell collision attention in [0, 1], row-major 16×16.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub map: Vec<f32>,
}

impl AttentionMap {
    pub fn zeros() -> Self {
        Self { map: vec![0.0; CELLS] }
    }

    pub fn new(map: Vec<f32>) -> Result<Self> {
        if map.len() != CELLS {
            return Err(Error::shape("attention map", &[GRID, GRID], &[map.len()]));
        }
        if map.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("attention values must lie in [0, 1]".into()));
        }
        Ok(Self { map })
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(&[1, GRID, GRID], self.map.iter().map(|&v| T::lit(v as f64)).collect()).expect("16x16 map")
    }
}

/// Visual inputs of one sample.
#[derive(Clone, Debug)]
pub struct ModelInput<T: Real = f32> {
    pub dest: Tensor<T>,
    pub targ: Tensor<T>,
    pub regions: Vec<RegionFeature>,
}

impl<T: Real> ModelInput<T> {
    pub fn from_sample(s: &Sample) -> Result<Self> {
        let grid = |g: &[f32]| Tensor::new(&[CHANNELS, GRID, GRID], g.iter().map(|&v| T::lit(v as f64)).collect());
        Ok(Self {
            dest: grid(&s.dest_grid)?,
            targ: grid(&s.targ_grid)?,
            regions: s.regions.iter().map(RegionFeature::from_descriptor).collect::<Result<_>>()?,
        })
    }
}

/// `LN(concat(visual, pos7) W + b)` for one region, shape `[1, d]`.
pub fn embed_obstacle<'t, T: Real>(rf: &RegionFeature, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
    let x = p.tape.constant_vec(&[1, REGION_DIM + 7], rf.row().collect())?;
    linear(&x, &p.p("obst.w")?, &p.p("obst.b")?)?.layernorm(&p.p("obst.ln.g")?, &p.p("obst.ln.b")?)
}

/// Embeds all regions and pads to [`MAX_OBSTACLES`] zero rows; `mask[i]` marks padding.
pub fn embed_obstacles<'t, T: Real>(regions: &[RegionFeature], p: &Bound<'t, T>) -> Result<(Var<'t, T>, Vec<bool>)> {
    let n = regions.len();
    if n == 0 || n > MAX_OBSTACLES {
        return Err(Error::Input(format!("scene has {n} regions, expected 1..={MAX_OBSTACLES}")));
    }
    let d = p.config.d_model;
    let x = p
        .tape
        .constant_vec(&[n, REGION_DIM + 7], regions.iter().flat_map(RegionFeature::row).collect())?;
    let h = linear(&x, &p.p("obst.w")?, &p.p("obst.b")?)?.layernorm(&p.p("obst.ln.g")?, &p.p("obst.ln.b")?)?;
    let mask = (0..MAX_OBSTACLES).map(|i| i >= n).collect();
    if n == MAX_OBSTACLES {
        return Ok((h, mask));
    }
    let pad = p.tape.constant(&Tensor::zeros(&[MAX_OBSTACLES - n, d]));
    Ok((p.tape.concat(&[h, pad], 0)?, mask))
}

pub struct CamOutput<'t, T: Real> {
    pub logit: Var<'t, T>,
    pub p_collision: Var<'t, T>,
    /// `[1, 16, 16]`
    pub att: Var<'t, T>,
}

/// Attention branch: two 3×3 convs and a 1×1 sigmoid head over the stacked
/// destination and target grids. Prediction branch: attention-weighted mean
/// of the conv features, mean target colour and mean region descriptor.
pub fn cam_forward<'t, T: Real>(
    dest: &Var<'t, T>,
    targ: &Var<'t, T>,
    regions: &[RegionFeature],
    p: &Bound<'t, T>,
) -> Result<CamOutput<'t, T>> {
    let tape = p.tape;
    let cc = p.config.cam_channels;
    let x = tape.concat(&[*dest, *targ], 0)?;
    let f = x.conv2d(&p.p("cam.conv1.w")?, &p.p("cam.conv1.b")?, 1, 1)?.relu();
    let f = f.conv2d(&p.p("cam.conv2.w")?, &p.p("cam.conv2.b")?, 1, 1)?.relu();
    let att_logit = f.conv2d(&p.p("cam.att.w")?, &p.p("cam.att.b")?, 1, 0)?;
    let att = att_logit.sigmoid();

    // pooling weights are a softmax over the same logits, so cells the map
    // highlights dominate the pooled feature instead of being averaged away
    let weights = att_logit.reshape(&[1, CELLS])?.softmax_last()?;
    let pooled = weights.matmul_t(&f.reshape(&[cc, CELLS])?)?;
    let targ_mean = targ.reshape(&[CHANNELS, CELLS])?.transpose()?.mean_rows()?;
    let mut region_mean = vec![T::zero(); REGION_DIM];
    for r in regions {
        for (m, &v) in region_mean.iter_mut().zip(&r.visual) {
            *m += T::lit(v / regions.len() as f64);
        }
    }
    let region_mean = tape.constant_vec(&[1, REGION_DIM], region_mean)?;
    let feat = tape.concat(&[pooled, targ_mean, region_mean], 1)?;
    let hid = linear(&feat, &p.p("cam.hid.w")?, &p.p("cam.hid.b")?)?.relu();
    let logit = linear(&hid, &p.p("cam.out.w")?, &p.p("cam.out.b")?)?;
    Ok(CamOutput {
        p_collision: logit.sigmoid(),
        logit,
        att,
    })
}

/// Destination grid with the attention map as a fifth channel; two stride-2
/// convs and a stride-1 conv give a 4×4 map, i.e. 16 tokens of width d.
pub fn encode_destination<'t, T: Real>(dest: &Var<'t, T>, att: &Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
    let d = p.config.d_model;
    let x = p.tape.concat(&[*dest, *att], 0)?;
    let x = x.conv2d(&p.p("dest.conv1.w")?, &p.p("dest.conv1.b")?, 2, 1)?.relu();
    let x = x.conv2d(&p.p("dest.conv2.w")?, &p.p("dest.conv2.b")?, 2, 1)?.relu();
    let x = x.conv2d(&p.p("dest.conv3.w")?, &p.p("dest.conv3.b")?, 1, 1)?;
    let tokens = x.reshape(&[d, 16])?.transpose()?;
    tokens.add(&p.p("dest.pos")?)
}

/// Three stride-2 convs give 2×2 patch tokens; a mean-pooled token goes first.
pub fn encode_target<'t, T: Real>(targ: &Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
    let d = p.config.d_model;
    let x = targ.conv2d(&p.p("targ.conv1.w")?, &p.p("targ.conv1.b")?, 2, 1)?.relu();
    let x = x.conv2d(&p.p("targ.conv2.w")?, &p.p("targ.conv2.b")?, 2, 1)?.relu();
    let x = x.conv2d(&p.p("targ.conv3.w")?, &p.p("targ.conv3.b")?, 2, 1)?;
    let patches = x.reshape(&[d, 4])?.transpose()?;
    let pooled = patches.mean_rows()?;
    p.tape.concat(&[pooled, patches], 0)?.add(&p.p("targ.pos")?)
}

/// Runs the CAM alone and returns `(p_collision, attention map)`.
pub fn collision_attention<T: Real>(
    params: &crate::params::ModelParams<T>,
    input: &ModelInput<T>,
) -> Result<(f64, AttentionMap)> {
    let tape = Tape::new();
    let p = params.bind(&tape, |_| false);
    let out = cam_forward(&tape.constant(&input.dest), &tape.constant(&input.targ), &input.regions, &p)?;
    let map = out.att.data().iter().map(|v| v.as_f32()).collect();
    Ok((out.p_collision.item().as_f64(), AttentionMap { map }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_examples() {
        assert_eq!(encode_positional([0.0, 0.0, 16.0, 16.0], 16.0).unwrap(), [0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(
            encode_positional([4.0, 4.0, 8.0, 8.0], 16.0).unwrap(),
            [0.25, 0.25, 0.5, 0.5, 0.25, 0.25, 0.0625]
        );
        assert!(matches!(encode_positional([3.0, 3.0, 3.0, 5.0], 16.0), Err(Error::Input(_))));
    }

    #[test]
    fn attention_map_bounds() {
        assert!(AttentionMap::new(vec![0.5; CELLS]).is_ok());
        assert!(AttentionMap::new(vec![1.5; CELLS]).is_err());
        assert!(AttentionMap::new(vec![0.5; 3]).is_err());
    }
}
