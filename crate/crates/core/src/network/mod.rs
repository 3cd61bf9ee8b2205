//! Dual-decoder U-Net with batch normalization.
//!
//! A contracting path of `depth` conv blocks (2×2 max pooling between them,
//! filters doubling per stage) feeds a bottleneck block. Two independent
//! expansive paths consume the same skip tensors; each ends in a 1×1
//! convolution to two channels and an element-wise sigmoid. Channel 1 of
//! the first path is the gland probability, of the second the contour
//! probability.
//!
//! Forward and backward are hand-written over NCHW `f64` tensors; the
//! convolutions are im2col + GEMM.

pub mod checkpoint;
pub mod layers;
mod model;
pub mod params;
mod tensor;

pub use model::{backward, conv_block, forward_batch, update_running_stats, upconv_block, BatchOutput, ForwardCache};
pub use params::{BatchNorm, Conv2d, ConvBlock, ConvBn, Decoder, Gradients, NetworkParams, TensorRole, UpBlock};
pub use tensor::Tensor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ProbMap, Raster, RgbRaster};
use crate::tiling::{merge, split, PadMode, MIN_PATCH_SIZE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of down-sampling stages.
    pub depth: usize,
    pub base_filters: usize,
    /// Side of the square kernels in conv blocks.
    pub kernel: usize,
    /// Side of the square input patch.
    pub input_size: usize,
    pub channels_in: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_filters: 32,
            kernel: 3,
            input_size: 256,
            channels_in: 3,
            bn_momentum: 0.99,
            bn_eps: 1e-3,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("network: {m}")));
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.input_size == 0 || self.input_size % (1 << self.depth) != 0 {
            return bad(format!("input_size {} not divisible by 2^{}", self.input_size, self.depth));
        }
        if self.base_filters < 4 {
            return bad(format!("base_filters {} below 4", self.base_filters));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        if self.channels_in == 0 {
            return bad("channels_in must be positive".into());
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return bad("bn_momentum must lie in [0, 1) and bn_eps be positive".into());
        }
        Ok(())
    }

    /// Filter count at encoder stage `level` (the bottleneck is `depth`).
    pub fn filters_at(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Spatial side at each encoder stage followed by the bottleneck.
    pub fn stage_sizes(&self) -> Vec<usize> {
        (0..=self.depth).map(|l| self.input_size >> l).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in BN; intermediates cached for backward.
    Train,
    /// Running statistics in BN.
    Infer,
}

/// Gland and contour probability maps for one patch or image.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityPair {
    pub gland: ProbMap,
    pub contour: ProbMap,
}

/// Intensities divided by 255.
pub fn image_to_input(image: &RgbRaster) -> Raster<f64> {
    image.map(|v| f64::from(v) / 255.0)
}

/// Infer-mode forward of a single normalized patch.
pub fn forward(params: &NetworkParams, patch: &Raster<f64>) -> Result<ProbabilityPair> {
    let x = Tensor::from_rasters(std::slice::from_ref(patch))?;
    let mut out = forward_patches(params, &x)?;
    Ok(out.remove(0))
}

/// Infer-mode forward of an N×C×S×S batch, split into per-patch maps.
pub fn forward_patches(params: &NetworkParams, x: &Tensor) -> Result<Vec<ProbabilityPair>> {
    let (out, _) = forward_batch(params, x, Mode::Infer)?;
    Ok((0..x.n)
        .map(|i| ProbabilityPair {
            gland: out.gland.plane_raster(i, 0),
            contour: out.contour.plane_raster(i, 0),
        })
        .collect())
}

/// Whole-image inference: split into `input_size` patches, run them through
/// the network `batch` at a time, merge both maps back to the image frame.
pub fn predict_image(params: &NetworkParams, image: &RgbRaster, pad_mode: PadMode, batch: usize) -> Result<ProbabilityPair> {
    if batch == 0 {
        return Err(Error::Config("inference batch must be positive".into()));
    }
    if params.config.input_size < MIN_PATCH_SIZE {
        return Err(Error::Config(format!(
            "input_size {} is below the smallest tiling patch {MIN_PATCH_SIZE}",
            params.config.input_size
        )));
    }
    let input = image_to_input(image);
    let (grid, patches) = split(&input, params.config.input_size, pad_mode);
    let mut gland = Vec::with_capacity(patches.len());
    let mut contour = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(batch) {
        for pair in forward_patches(params, &Tensor::from_rasters(chunk)?)? {
            gland.push(pair.gland);
            contour.push(pair.contour);
        }
    }
    Ok(ProbabilityPair {
        gland: merge(&grid, &gland)?,
        contour: merge(&grid, &contour)?,
    })
}
