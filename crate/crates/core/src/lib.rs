//! Future captioning of robot placement outcomes: synthetic scenes, a
//! transformer captioner with a collision attention module, and a
//! nearest-neighbour rescoring stage, all on a small reverse-mode autodiff core.

pub mod baselines;
pub mod caie;
pub mod camd;
pub mod error;
pub mod features_cam;
pub mod model;
pub mod nn;
pub mod metrics;
pub mod nncm;
pub mod params;
pub mod pipeline;
pub mod scene;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use params::{ModelConfig, ModelParams};
pub use tensor::{Real, Tape, Tensor, Var};
