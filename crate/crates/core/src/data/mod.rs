//! Dataset ingestion, manifests, patient-disjoint splitting, augmentation,
//! patch extraction and input normalization.

pub mod dataset;
pub mod ingest;
pub mod manifest;
pub mod pipeline;
pub mod split;
pub mod transform;

pub use dataset::{ChannelStats, Dataset, ImageDataset, InMemoryDataset};
pub use ingest::{ingest, IngestReport};
pub use manifest::{ClassLabel, DatasetId, LabelTask, Layout, Magnification, Manifest, SampleRecord, Split, Subclass};
pub use pipeline::{augment_manifest, patch_manifest, PatchConfig, PatchMode};
pub use split::split_by_patient;
pub use transform::AugmentConfig;
