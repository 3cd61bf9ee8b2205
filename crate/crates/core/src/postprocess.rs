//! Threshold fusion of the gland and contour maps into labelled instances.
//!
//! seed = (gland ≥ τ_g) ∧ ¬(contour ≥ τ_c); 8-connected components of the
//! seed; small components dropped; interior holes filled; each component
//! grown back by `restore_dilate_px` into gland foreground without ever
//! touching another component; labels renumbered in row-major order.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::dataset::DEFAULT_BAND_WIDTH;
use crate::error::{Error, Result};
use crate::network::ProbabilityPair;
use crate::raster::{ensure_same_dims, LabelMap, Mask, RgbRaster};

/// Frame area the default `min_object_px` refers to (775×522).
pub const REFERENCE_AREA: f64 = 775.0 * 522.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub tau_gland: f64,
    pub tau_contour: f64,
    pub min_object_px: usize,
    pub fill_holes: bool,
    pub restore_dilate_px: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            tau_gland: 0.5,
            tau_contour: 0.5,
            min_object_px: 500,
            fill_holes: true,
            restore_dilate_px: DEFAULT_BAND_WIDTH,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let inside = |t: f64| t > 0.0 && t < 1.0;
        if !inside(self.tau_gland) || !inside(self.tau_contour) {
            return Err(Error::Config("fusion thresholds must lie strictly inside (0, 1)".into()));
        }
        Ok(())
    }

    /// `min_object_px` rescaled from the reference frame to an `h`×`w` image.
    pub fn for_image(&self, h: usize, w: usize) -> Self {
        let scaled = self.min_object_px as f64 * (h * w) as f64 / REFERENCE_AREA;
        Self {
            min_object_px: scaled.round() as usize,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Self::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Self::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceResult {
    pub binary_mask: Mask,
    pub labels: LabelMap,
    pub object_count: usize,
}

/// Foreground pixels before component analysis.
pub fn seed_mask(probs: &ProbabilityPair, tau_gland: f64, tau_contour: f64) -> Result<Mask> {
    ensure_same_dims(&probs.gland, &probs.contour, "gland vs contour map")?;
    let (h, w) = probs.gland.dims();
    Ok(Mask::from_fn(h, w, 1, |y, x, _| {
        u8::from(probs.gland.at(y, x) >= tau_gland && probs.contour.at(y, x) < tau_contour)
    }))
}

pub fn fuse(probs: &ProbabilityPair, cfg: &FusionConfig) -> Result<InstanceResult> {
    cfg.validate()?;
    let seed = seed_mask(probs, cfg.tau_gland, cfg.tau_contour)?;
    let (mut labels, _) = label_components(&seed, Connectivity::Eight);
    remove_small(&mut labels, cfg.min_object_px);
    if cfg.fill_holes {
        fill_holes(&mut labels);
    }
    let allowed = probs.gland.map(|g| u8::from(g >= cfg.tau_gland));
    constrained_dilate(&mut labels, &allowed, cfg.restore_dilate_px);
    let object_count = relabel_row_major(&mut labels);
    Ok(InstanceResult {
        binary_mask: labels.map(|l| u8::from(l > 0)),
        labels,
        object_count,
    })
}

/// Connected components with labels 1..=K in order of each component's
/// first pixel in row-major scan. Returns the map and K.
pub fn label_components(mask: &Mask, conn: Connectivity) -> (LabelMap, usize) {
    let (h, w) = mask.dims();
    let mut parent: Vec<u32> = vec![0];
    let mut prov = vec![0u32; h * w];

    fn find(parent: &mut [u32], mut x: u32) -> u32 {
        while parent[x as usize] != x {
            parent[x as usize] = parent[parent[x as usize] as usize];
            x = parent[x as usize];
        }
        x
    }

    // First pass over already-visited neighbours only.
    let back: &[(isize, isize)] = match conn {
        Connectivity::Four => &[(-1, 0), (0, -1)],
        Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1)],
    };
    for y in 0..h {
        for x in 0..w {
            if mask.at(y, x) == 0 {
                continue;
            }
            let mut label = 0u32;
            for &(dy, dx) in back {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy < 0 || xx < 0 || xx >= w as isize {
                    continue;
                }
                let n = prov[yy as usize * w + xx as usize];
                if n == 0 {
                    continue;
                }
                if label == 0 {
                    label = find(&mut parent, n);
                } else {
                    let (a, b) = (find(&mut parent, label), find(&mut parent, n));
                    if a != b {
                        let (lo, hi) = (a.min(b), a.max(b));
                        parent[hi as usize] = lo;
                        label = lo;
                    }
                }
            }
            if label == 0 {
                label = parent.len() as u32;
                parent.push(label);
            }
            prov[y * w + x] = label;
        }
    }

    let mut out = LabelMap::filled(h, w, 1, 0);
    let mut remap = vec![0u32; parent.len()];
    let mut next = 0;
    for (i, &p) in prov.iter().enumerate() {
        if p == 0 {
            continue;
        }
        let root = find(&mut parent, p) as usize;
        if remap[root] == 0 {
            next += 1;
            remap[root] = next;
        }
        out.as_mut_slice()[i] = remap[root];
    }
    (out, next as usize)
}

fn component_sizes(labels: &LabelMap) -> Vec<usize> {
    let max = labels.as_slice().iter().copied().max().unwrap_or(0) as usize;
    let mut sizes = vec![0; max + 1];
    for &l in labels.as_slice() {
        sizes[l as usize] += 1;
    }
    sizes
}

/// Zero out components with fewer than `min_px` pixels.
pub fn remove_small(labels: &mut LabelMap, min_px: usize) {
    if min_px == 0 {
        return;
    }
    let sizes = component_sizes(labels);
    for l in labels.as_mut_slice() {
        if *l != 0 && sizes[*l as usize] < min_px {
            *l = 0;
        }
    }
}

/// Fill background pixels enclosed by a single component.
pub fn fill_holes(labels: &mut LabelMap) {
    let (h, w) = labels.dims();
    let max = labels.as_slice().iter().copied().max().unwrap_or(0) as usize;
    let mut bbox = vec![(usize::MAX, usize::MAX, 0usize, 0usize); max + 1];
    for y in 0..h {
        for x in 0..w {
            let l = labels.at(y, x) as usize;
            if l > 0 {
                let b = &mut bbox[l];
                *b = (b.0.min(y), b.1.min(x), b.2.max(y), b.3.max(x));
            }
        }
    }
    for (label, &(y0, x0, y1, x1)) in bbox.iter().enumerate().skip(1) {
        if y0 == usize::MAX {
            continue;
        }
        let label = label as u32;
        // Flood the complement of the component from the border of its
        // bounding box grown by one (virtual) pixel.
        let bh = y1 - y0 + 3;
        let bw = x1 - x0 + 3;
        let inside = |by: usize, bx: usize| -> bool {
            if by == 0 || bx == 0 || by == bh - 1 || bx == bw - 1 {
                return false;
            }
            labels.at(y0 + by - 1, x0 + bx - 1) == label
        };
        let mut reached = vec![false; bh * bw];
        let mut queue = VecDeque::new();
        reached[0] = true;
        queue.push_back((0usize, 0usize));
        while let Some((by, bx)) = queue.pop_front() {
            for &(dy, dx) in Connectivity::Four.offsets() {
                let (ny, nx) = (by as isize + dy, bx as isize + dx);
                if ny < 0 || nx < 0 || ny >= bh as isize || nx >= bw as isize {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                if !reached[ny * bw + nx] && !inside(ny, nx) {
                    reached[ny * bw + nx] = true;
                    queue.push_back((ny, nx));
                }
            }
        }
        for by in 1..bh - 1 {
            for bx in 1..bw - 1 {
                let (y, x) = (y0 + by - 1, x0 + bx - 1);
                if !reached[by * bw + bx] && labels.at(y, x) == 0 {
                    labels.set(y, x, 0, label);
                }
            }
        }
    }
}

/// Grow labels `radius` times by one 8-neighbourhood step into `allowed`
/// background. A pixel reachable from two different labels in the same step
/// stays background, so components never merge.
pub fn constrained_dilate(labels: &mut LabelMap, allowed: &Mask, radius: usize) {
    let (h, w) = labels.dims();
    for _ in 0..radius {
        let prev = labels.clone();
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                if prev.at(y, x) != 0 || allowed.at(y, x) == 0 {
                    continue;
                }
                let mut found = 0u32;
                let mut conflict = false;
                for &(dy, dx) in Connectivity::Eight.offsets() {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    let l = prev.at(yy as usize, xx as usize);
                    if l == 0 {
                        continue;
                    }
                    if found == 0 {
                        found = l;
                    } else if found != l {
                        conflict = true;
                    }
                }
                if found != 0 && !conflict {
                    labels.set(y, x, 0, found);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
}

/// Renumber to 1..=K by first appearance in row-major order; returns K.
pub fn relabel_row_major(labels: &mut LabelMap) -> usize {
    let max = labels.as_slice().iter().copied().max().unwrap_or(0) as usize;
    let mut remap = vec![0u32; max + 1];
    let mut next = 0;
    for l in labels.as_mut_slice() {
        if *l == 0 {
            continue;
        }
        if remap[*l as usize] == 0 {
            next += 1;
            remap[*l as usize] = next;
        }
        *l = remap[*l as usize];
    }
    next as usize
}

/// Source image with instance boundaries drawn in and interiors tinted.
pub fn render_overlay(image: &RgbRaster, labels: &LabelMap) -> RgbRaster {
    const EDGE: [u8; 3] = [0, 255, 64];
    const TINT: [f64; 3] = [0.0, 200.0, 255.0];
    let (h, w) = labels.dims();
    RgbRaster::from_fn(h, w, 3, |y, x, c| {
        let l = labels.at(y, x);
        let src = image.get(y, x, c);
        if l == 0 {
            return src;
        }
        let edge = Connectivity::Four.offsets().iter().any(|&(dy, dx)| {
            let (yy, xx) = (y as isize + dy, x as isize + dx);
            yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize || labels.at(yy as usize, xx as usize) != l
        });
        if edge {
            EDGE[c]
        } else {
            (0.75 * f64::from(src) + 0.25 * TINT[c]).round() as u8
        }
    })
}
