//! Deterministic synthetic placement scenes, outcomes and captions.

pub mod captions;
pub mod catalog;
pub mod dataset;
pub mod layout;
pub mod vocab;

pub use captions::{make_captions, TemplateBank, COLLISION_VERBS};
pub use catalog::{DestinationKind, ObstacleClass, TargetClass, GRID};
pub use dataset::{
    build_dataset, child_seed, load_dataset, read_split, write_dataset, Dataset, DatasetConfig, RegionDescriptor,
    Sample, Split, DEFAULT_RATIOS,
};
pub use layout::{generate_scene, simulate_placement, CellRect, Event, Obstacle, Outcome, Scene, SceneConfig, Traits};
pub use vocab::{Vocabulary, BOS, EOS, PAD, UNK};
