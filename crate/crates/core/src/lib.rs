//! Contour-aware gland segmentation for H&E histology images.
//!
//! The pipeline is a U-Net with batch normalization and two expansive paths:
//! one predicts the probability of gland, the other the probability of the
//! contour band separating neighbouring glands. Thresholding both maps and
//! subtracting the contour splits touching glands into separate instances.
//!
//! Module map:
//!
//! - [`dataset`]: Warwick-QU style loading, target derivation, synthetic data.
//! - [`tiling`]: non-overlapping patch split and merge.
//! - [`augmentation`]: joint image/mask affine augmentation.
//! - [`network`]: the dual-decoder network, hand-written forward/backward.
//! - [`training`]: BCE + Dice loss, RMSprop, the epoch loop.
//! - [`postprocess`]: threshold fusion into labelled instances.
//! - [`evaluation`]: pixel and object level metrics.

pub mod augmentation;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod network;
pub mod postprocess;
pub mod raster;
mod rng;
pub mod tiling;
pub mod training;

pub use error::{Error, Result};
pub use raster::{LabelMap, Mask, ProbMap, Raster, RgbRaster};

pub use augmentation::{AugmentConfig, AugmentedSample, Transform};
pub use dataset::{DatasetSplit, ImageSample, SplitSpec, TargetPair};
pub use evaluation::{ImageMetrics, MetricsReport};
pub use network::{Mode, NetworkConfig, NetworkParams, ProbabilityPair};
pub use postprocess::{FusionConfig, InstanceResult};
pub use tiling::{PadMode, PatchGrid};
pub use training::{OptimizerState, TrainConfig, TrainPatch};
