//! Joint geometric augmentation of an image and its masks.
//!
//! One affine map (flip, zoom, rotation, shift, all about the image centre)
//! is applied to the image with bilinear sampling and to every mask with
//! nearest-neighbour sampling, so masks stay binary. Out-of-frame samples
//! are reflected back into the frame.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{derive_targets, DatasetSplit, ImageSample, TargetPair};
use crate::error::{Error, Result};
use crate::raster::{reflect_index, Raster, RgbRaster};
use crate::rng::{hash_str, stream_rng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FillMode {
    #[default]
    Reflect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Output copies per input sample, the untouched original included.
    pub factor: usize,
    /// Maximum shift as a fraction of the side length.
    pub shift_frac: f64,
    /// Maximum absolute rotation in degrees.
    pub rot_deg: f64,
    pub zoom_min: f64,
    pub zoom_max: f64,
    pub flip_h: f64,
    pub flip_v: f64,
    pub fill_mode: FillMode,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            factor: 10,
            shift_frac: 0.1,
            rot_deg: 20.0,
            zoom_min: 0.9,
            zoom_max: 1.1,
            flip_h: 0.5,
            flip_v: 0.5,
            fill_mode: FillMode::Reflect,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("augment: {m}")));
        if self.factor < 1 {
            return bad("factor must be at least 1");
        }
        if !(self.zoom_min > 0.0 && self.zoom_min <= 1.0 && 1.0 <= self.zoom_max) {
            return bad("zoom range must be positive and contain 1.0");
        }
        if !(0.0..=1.0).contains(&self.flip_h) || !(0.0..=1.0).contains(&self.flip_v) {
            return bad("flip probabilities must lie in [0, 1]");
        }
        if !(self.shift_frac >= 0.0 && self.rot_deg >= 0.0) {
            return bad("shift and rotation ranges must be non-negative");
        }
        Ok(())
    }
}

/// A concrete geometric transform. Shifts are in pixels, rotation is
/// counter-clockwise as displayed (y axis pointing down).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Transform {
    pub shift_y: f64,
    pub shift_x: f64,
    pub angle_deg: f64,
    pub zoom: f64,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl Transform {
    pub fn identity() -> Self {
        Self {
            zoom: 1.0,
            ..Default::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn draw(cfg: &AugmentConfig, h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let sym = |rng: &mut dyn rand::RngCore, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let shift_y = sym(rng, cfg.shift_frac * h as f64);
        let shift_x = sym(rng, cfg.shift_frac * w as f64);
        let angle_deg = sym(rng, cfg.rot_deg);
        let zoom = if cfg.zoom_max > cfg.zoom_min {
            rng.random_range(cfg.zoom_min..=cfg.zoom_max)
        } else {
            cfg.zoom_min
        };
        Self {
            shift_y,
            shift_x,
            angle_deg,
            zoom,
            flip_h: rng.random_bool(cfg.flip_h),
            flip_v: rng.random_bool(cfg.flip_v),
        }
    }

    /// Source coordinate sampled by output pixel (y, x).
    pub fn source_of(&self, h: usize, w: usize, y: usize, x: usize) -> (f64, f64) {
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let qy = y as f64 - cy - self.shift_y;
        let qx = x as f64 - cx - self.shift_x;
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let ux = qx * c - qy * s;
        let uy = qx * s + qy * c;
        let mut sx = ux / self.zoom;
        let mut sy = uy / self.zoom;
        if self.flip_h {
            sx = -sx;
        }
        if self.flip_v {
            sy = -sy;
        }
        (sy + cy, sx + cx)
    }
}

/// Nearest-neighbour resampling with reflected borders.
pub fn warp_nearest<T: Copy>(src: &Raster<T>, t: &Transform) -> Raster<T> {
    let (h, w) = src.dims();
    if t.is_identity() {
        return src.clone();
    }
    let mut out = src.clone();
    let c = src.channels();
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = t.source_of(h, w, y, x);
            let iy = reflect_index(sy.round() as isize, h);
            let ix = reflect_index(sx.round() as isize, w);
            for ch in 0..c {
                out.set(y, x, ch, src.get(iy, ix, ch));
            }
        }
    }
    out
}

/// Bilinear resampling with reflected borders.
pub fn warp_bilinear(src: &RgbRaster, t: &Transform) -> RgbRaster {
    let (h, w) = src.dims();
    if t.is_identity() {
        return src.clone();
    }
    let c = src.channels();
    let mut out = src.clone();
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = t.source_of(h, w, y, x);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let ys = [reflect_index(y0 as isize, h), reflect_index(y0 as isize + 1, h)];
            let xs = [reflect_index(x0 as isize, w), reflect_index(x0 as isize + 1, w)];
            for ch in 0..c {
                let p = |iy: usize, ix: usize| f64::from(src.get(ys[iy], xs[ix], ch));
                let top = p(0, 0) * (1.0 - fx) + p(0, 1) * fx;
                let bot = p(1, 0) * (1.0 - fx) + p(1, 1) * fx;
                let v = top * (1.0 - fy) + bot * fy;
                out.set(y, x, ch, v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// A training sample: image, instance mask and the two derived targets.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSample {
    pub sample: ImageSample,
    pub targets: TargetPair,
}

pub fn augment_sample(sample: &ImageSample, targets: &TargetPair, t: &Transform) -> AugmentedSample {
    let rebinarize = |m: Raster<u8>| m.map(|v| u8::from(v >= 1));
    AugmentedSample {
        sample: ImageSample {
            id: sample.id.clone(),
            image: warp_bilinear(&sample.image, t),
            instance_mask: warp_nearest(&sample.instance_mask, t),
        },
        targets: TargetPair {
            gland: rebinarize(warp_nearest(&targets.gland, t)),
            contour: rebinarize(warp_nearest(&targets.contour, t)),
            band_width: targets.band_width,
        },
    }
}

/// Enlarge the training split `factor` times. For each input sample the
/// first copy is the original; copy `k` uses a transform drawn from a stream
/// keyed by (seed, sample id, k), so the output does not depend on order.
pub fn build_augmented_set(split: &DatasetSplit, band_width: usize, cfg: &AugmentConfig) -> Result<Vec<AugmentedSample>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(split.train.len() * cfg.factor);
    for sample in &split.train {
        let targets = derive_targets(sample, band_width);
        let (h, w) = sample.image.dims();
        out.push(AugmentedSample {
            sample: sample.clone(),
            targets: targets.clone(),
        });
        for copy in 1..cfg.factor {
            let mut rng = stream_rng(&[cfg.seed, hash_str(&sample.id), copy as u64]);
            let t = Transform::draw(cfg, h, w, &mut rng);
            let mut aug = augment_sample(sample, &targets, &t);
            aug.sample.id = format!("{}_aug{copy}", sample.id);
            out.push(aug);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic_sample;
    use crate::raster::{LabelMap, Mask};

    fn rot90_oracle<T: Copy>(m: &Raster<T>) -> Raster<T> {
        let n = m.height();
        Raster::from_fn(n, n, m.channels(), |i, j, c| m.get(j, n - 1 - i, c))
    }

    fn flip_h_oracle<T: Copy>(m: &Raster<T>) -> Raster<T> {
        let w = m.width();
        Raster::from_fn(m.height(), w, m.channels(), |y, x, c| m.get(y, w - 1 - x, c))
    }

    fn with_targets(s: &ImageSample) -> TargetPair {
        derive_targets(s, 2)
    }

    #[test]
    fn identity_returns_input() {
        let s = synthetic_sample("a", 64, 64, 1);
        let t = with_targets(&s);
        let a = augment_sample(&s, &t, &Transform::identity());
        assert_eq!(a.sample, s);
        assert_eq!(a.targets, t);
    }

    #[test]
    fn horizontal_flip_moves_left_gland_right() {
        let labels = LabelMap::from_fn(32, 40, 1, |y, x, _| u32::from((8..20).contains(&y) && (3..12).contains(&x)));
        let s = ImageSample {
            id: "f".into(),
            image: RgbRaster::filled(32, 40, 3, 9),
            instance_mask: labels,
        };
        let tp = with_targets(&s);
        let t = Transform {
            flip_h: true,
            ..Transform::identity()
        };
        let a = augment_sample(&s, &tp, &t);
        for m in [&a.targets.gland, &a.targets.contour] {
            assert!(m.count_ones() > 0);
            for y in 0..32 {
                for x in 0..20 {
                    assert_eq!(m.at(y, x), 0);
                }
            }
        }
        assert_eq!(a.targets.gland, flip_h_oracle(&tp.gland));
        assert_eq!(a.targets.contour, flip_h_oracle(&tp.contour));
        assert_eq!(a.sample.image, flip_h_oracle(&s.image));
    }

    #[test]
    fn quarter_turn_matches_array_rotation() {
        let s = synthetic_sample("r", 64, 64, 4);
        let tp = with_targets(&s);
        let t = Transform {
            angle_deg: 90.0,
            ..Transform::identity()
        };
        let a = augment_sample(&s, &tp, &t);
        assert_eq!(a.sample.instance_mask, rot90_oracle(&s.instance_mask));
        assert_eq!(a.targets.gland, rot90_oracle(&tp.gland));
        assert_eq!(a.targets.contour, rot90_oracle(&tp.contour));
        let back = Transform {
            angle_deg: -90.0,
            ..Transform::identity()
        };
        assert_eq!(warp_nearest(&a.sample.instance_mask, &back), s.instance_mask);
    }

    #[test]
    fn masks_stay_binary_under_random_transforms() {
        let s = synthetic_sample("m", 80, 72, 2);
        let tp = with_targets(&s);
        let cfg = AugmentConfig::default();
        let mut rng = stream_rng(&[1]);
        for _ in 0..20 {
            let t = Transform::draw(&cfg, 80, 72, &mut rng);
            let a = augment_sample(&s, &tp, &t);
            assert!(a.targets.gland.as_slice().iter().all(|&v| v <= 1));
            assert!(a.targets.contour.as_slice().iter().all(|&v| v <= 1));
            assert_eq!(a.sample.image.dims(), (80, 72));
        }
    }

    #[test]
    fn masks_follow_the_same_map_as_a_coordinate_grid() {
        let s = synthetic_sample("g", 64, 80, 3);
        let tp = with_targets(&s);
        let (h, w) = (64, 80);
        let coords = LabelMap::from_fn(h, w, 1, |y, x, _| (y * w + x) as u32);
        let cfg = AugmentConfig::default();
        let mut rng = stream_rng(&[2]);
        for _ in 0..10 {
            let t = Transform::draw(&cfg, h, w, &mut rng);
            let moved = warp_nearest(&coords, &t);
            let a = augment_sample(&s, &tp, &t);
            let looked_up = Mask::from_fn(h, w, 1, |y, x, _| {
                let i = moved.at(y, x) as usize;
                tp.contour.at(i / w, i % w)
            });
            assert_eq!(looked_up, a.targets.contour);
        }
    }

    #[test]
    fn pure_shift_conserves_gland_area_up_to_border() {
        let s = synthetic_sample("s", 96, 96, 8);
        let tp = with_targets(&s);
        for (dy, dx) in [(5.0, 0.0), (0.0, -7.0), (3.0, 4.0)] {
            let t = Transform {
                shift_y: dy,
                shift_x: dx,
                ..Transform::identity()
            };
            let a = augment_sample(&s, &tp, &t);
            let before = tp.gland.count_ones() as f64;
            let after = a.targets.gland.count_ones() as f64;
            let border = 96.0 * (f64::abs(dy) + f64::abs(dx));
            assert!((after - before).abs() <= border, "{before} -> {after}");
        }
    }

    #[test]
    fn augmented_set_size_order_and_determinism() {
        let split = crate::dataset::generate_synthetic_split(3, 0, 64, 64, 5);
        let cfg = AugmentConfig {
            seed: 11,
            ..Default::default()
        };
        let a = build_augmented_set(&split, 2, &cfg).unwrap();
        assert_eq!(a.len(), 30);
        assert_eq!(a[0].sample, split.train[0]);
        assert_eq!(a[10].sample, split.train[1]);
        let b = build_augmented_set(&split, 2, &cfg).unwrap();
        assert_eq!(a, b);
        let one = build_augmented_set(&split, 2, &AugmentConfig { factor: 1, ..cfg.clone() }).unwrap();
        assert_eq!(one.len(), 3);
        assert!(one.iter().zip(&split.train).all(|(x, s)| &x.sample == s));
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig { factor: 0, ..Default::default() }.validate().is_err());
        assert!(AugmentConfig { zoom_min: 1.05, ..Default::default() }.validate().is_err());
        assert!(AugmentConfig { flip_v: 1.5, ..Default::default() }.validate().is_err());
        assert!(AugmentConfig::default().validate().is_ok());
    }
}
