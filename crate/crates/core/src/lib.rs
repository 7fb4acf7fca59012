//! Keypoint estimation pipeline for farm-animal video: keyframe sampling,
//! swap-aware augmentation, confidence-map encoding, a stacked dense
//! hourglass network with its own reverse-mode gradients, and evaluation.

pub mod analysis;
pub mod augment;
pub mod dataset;
pub mod error;
pub mod heatmap;
pub mod network;
pub mod pose;
pub mod raster;
pub mod rng;
pub mod sampler;
pub mod skeleton;
pub mod synthetic;
pub mod tensor;

pub use dataset::{DatasetManifest, FrameRecord, SplitRole};
pub use error::{Error, Result};
pub use heatmap::{ConfidenceStack, MapSpec};
pub use network::{ModelParams, NetworkConfig, TrainConfig, TrainHistory};
pub use pose::{Keypoint, Pose};
pub use raster::Raster;
pub use skeleton::{KeypointDef, Skeleton};
pub use tensor::Tensor;
