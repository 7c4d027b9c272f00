//! End-to-end tracking: cropping, backbone, model, per-frame tracker,
//! synthetic data, sequence I/O, metrics and toy training.

pub mod backbone;
pub mod crop;
pub mod dump;
pub mod io;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tracker;
pub mod train;

pub use backbone::{backbone_forward, init_backbone, BackboneOutput};
pub use crop::{crop_search, crop_template, CropResult, Frame};
pub use metrics::{evaluate, Metrics};
pub use model::{ModelConfig, TrTrModel};
pub use synth::{generate_synthetic_sequence, SynthSpec, SyntheticSequence};
pub use tracker::{TrackOutput, TrackerConfig, TrackerState};
pub use train::{train_toy, TrainConfig, TrainReport};
