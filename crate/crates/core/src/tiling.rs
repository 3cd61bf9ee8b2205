//! Non-overlapping square tiling of images for patch-wise inference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{reflect_index, Raster};

pub const DEFAULT_PATCH_SIZE: usize = 256;
pub const MIN_PATCH_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    #[default]
    Reflect,
    Zero,
}

impl std::str::FromStr for PadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reflect" => Ok(Self::Reflect),
            "zero" => Ok(Self::Zero),
            other => Err(Error::Config(format!("unknown pad mode {other:?}"))),
        }
    }
}

/// Tiling decomposition of one image. The padded canvas is
/// `rows * patch_size` by `cols * patch_size`, padding on the bottom/right.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub orig_h: usize,
    pub orig_w: usize,
    pub patch_size: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub rows: usize,
    pub cols: usize,
    pub pad_mode: PadMode,
}

impl PatchGrid {
    pub fn new(orig_h: usize, orig_w: usize, patch_size: usize, pad_mode: PadMode) -> Self {
        assert!(orig_h >= 1 && orig_w >= 1, "image must be non-empty");
        assert!(patch_size >= MIN_PATCH_SIZE, "patch_size must be at least {MIN_PATCH_SIZE}");
        let rows = orig_h.div_ceil(patch_size);
        let cols = orig_w.div_ceil(patch_size);
        Self {
            orig_h,
            orig_w,
            patch_size,
            pad_h: rows * patch_size - orig_h,
            pad_w: cols * patch_size - orig_w,
            rows,
            cols,
            pad_mode,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Top-left corner on the padded canvas of patch `index` (row-major).
    pub fn origin(&self, index: usize) -> (usize, usize) {
        ((index / self.cols) * self.patch_size, (index % self.cols) * self.patch_size)
    }
}

/// Split into row-major `patch_size`² patches, padding bottom/right per `pad_mode`.
pub fn split<T: Copy + Default>(image: &Raster<T>, patch_size: usize, pad_mode: PadMode) -> (PatchGrid, Vec<Raster<T>>) {
    let grid = PatchGrid::new(image.height(), image.width(), patch_size, pad_mode);
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let patches = (0..grid.len())
        .map(|i| {
            let (oy, ox) = grid.origin(i);
            Raster::from_fn(patch_size, patch_size, c, |py, px, ch| {
                let (y, x) = (oy + py, ox + px);
                if y < h && x < w {
                    image.get(y, x, ch)
                } else {
                    match pad_mode {
                        PadMode::Zero => T::default(),
                        PadMode::Reflect => image.get(reflect_index(y as isize, h), reflect_index(x as isize, w), ch),
                    }
                }
            })
        })
        .collect();
    (grid, patches)
}

/// Reassemble row-major patches and crop to the original size.
pub fn merge<T: Copy + Default>(grid: &PatchGrid, patches: &[Raster<T>]) -> Result<Raster<T>> {
    if patches.len() != grid.len() {
        return Err(Error::Shape(format!(
            "expected {} patches for a {}x{} grid, got {}",
            grid.len(),
            grid.rows,
            grid.cols,
            patches.len()
        )));
    }
    let c = patches[0].channels();
    for (i, p) in patches.iter().enumerate() {
        if p.height() != grid.patch_size || p.width() != grid.patch_size || p.channels() != c {
            return Err(Error::Shape(format!(
                "patch {i} is {}x{}x{}, expected {}x{}x{c}",
                p.height(),
                p.width(),
                p.channels(),
                grid.patch_size,
                grid.patch_size
            )));
        }
    }
    let ps = grid.patch_size;
    let mut out = Raster::filled(grid.orig_h, grid.orig_w, c, T::default());
    let row_len = grid.orig_w * c;
    let dst = out.as_mut_slice();
    for (i, p) in patches.iter().enumerate() {
        let (oy, ox) = grid.origin(i);
        if oy >= grid.orig_h || ox >= grid.orig_w {
            continue;
        }
        let rows = ps.min(grid.orig_h - oy);
        let cols = ps.min(grid.orig_w - ox);
        for py in 0..rows {
            let src = &p.as_slice()[py * ps * c..py * ps * c + cols * c];
            let start = (oy + py) * row_len + ox * c;
            dst[start..start + cols * c].copy_from_slice(src);
        }
    }
    Ok(out)
}
