//! Dataset ingestion, synthetic data, augmentation and class-aware batching.

mod augment;
mod dataset;
mod sampler;
mod synthetic;

pub use augment::{augment, augment_with, AugmentConfig, AugmentParams};
pub use dataset::{dataset_fingerprint, scan_dataset, DatasetIndex, ImageSample, LabelSource, Split};
pub use sampler::{sample_batch, stratified_draw, BatchSampler, ContrastiveBatch};
pub use synthetic::{generate_synthetic_dataset, DefectKind, SyntheticSpec, SyntheticSummary};
