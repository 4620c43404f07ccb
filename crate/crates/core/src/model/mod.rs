//! The reconstruction backbone and its checkpoint format.

mod backbone;
mod checkpoint;
mod layers;

pub use backbone::{
    images_to_tensor, Backbone, BackboneConfig, BottleneckFeatures, Encoder, FeatureMap,
    FeaturePyramid, ForwardOutput, ProjectedPyramid, ProjectorInit, STAGES,
};
pub use checkpoint::{
    load_checkpoint, load_checkpoint_for, read_manifest, save_checkpoint, CheckpointManifest,
};
pub use layers::l2_normalize;
