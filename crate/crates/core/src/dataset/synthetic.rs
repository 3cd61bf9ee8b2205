//! Desk-scale synthetic histology: ellipse glands with a dark nuclei rim and
//! a pale lumen on a textured pink stroma.

use rand::Rng;

use super::{DatasetSplit, ImageSample};
use crate::raster::{LabelMap, RgbRaster};
use crate::rng::stream_rng;

const MAX_GLANDS: usize = 6;
const TARGET_COVER: f64 = 0.25;
const MIN_COVER: f64 = 0.05;
const TRIES_PER_GLAND: usize = 100;
const MAX_TRIES: usize = 1500;

const STROMA: [f64; 3] = [226.0, 168.0, 196.0];
const NUCLEI: [f64; 3] = [104.0, 56.0, 148.0];
const CYTOPLASM: [f64; 3] = [200.0, 130.0, 190.0];
const LUMEN: [f64; 3] = [247.0, 236.0, 244.0];

/// `n` samples of size `h`×`w`: the first `n - n/3` go to train (`train_<k>`),
/// the remaining `n/3` to test (`testA_<k>`).
pub fn generate_synthetic(n: usize, h: usize, w: usize, seed: u64) -> DatasetSplit {
    let n_test = n / 3;
    generate_synthetic_split(n - n_test, n_test, h, w, seed)
}

pub fn generate_synthetic_split(n_train: usize, n_test: usize, h: usize, w: usize, seed: u64) -> DatasetSplit {
    assert!(n_train + n_test >= 1, "at least one sample required");
    assert!(h >= 64 && w >= 64, "synthetic images must be at least 64x64");
    let train = (0..n_train)
        .map(|k| synthetic_sample(&format!("train_{}", k + 1), h, w, sample_seed(seed, k)))
        .collect();
    let test = (0..n_test)
        .map(|k| synthetic_sample(&format!("testA_{}", k + 1), h, w, sample_seed(seed, n_train + k)))
        .collect();
    DatasetSplit { train, test }
}

fn sample_seed(seed: u64, index: usize) -> u64 {
    use rand::RngCore;
    stream_rng(&[seed, index as u64]).next_u64()
}

#[derive(Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalized radius: ≤ 1 inside.
    fn rho(&self, y: f64, x: f64, grow: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        ((u / (self.a + grow)).powi(2) + (v / (self.b + grow)).powi(2)).sqrt()
    }

    fn bbox(&self, grow: f64, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let r = self.a + grow + 1.0;
        let y0 = (self.cy - r).floor().max(0.0) as usize;
        let x0 = (self.cx - r).floor().max(0.0) as usize;
        let y1 = ((self.cy + r).ceil() as usize).min(h - 1);
        let x1 = ((self.cx + r).ceil() as usize).min(w - 1);
        (y0, x0, y1, x1)
    }
}

/// One deterministic sample.
pub fn synthetic_sample(id: &str, h: usize, w: usize, seed: u64) -> ImageSample {
    let mut rng = stream_rng(&[seed, 0x61A7D]);
    let side = h.min(w) as f64;
    let gap = (side * 0.03).max(3.0);
    let wanted = rng.random_range(1..=MAX_GLANDS);
    let radius = (TARGET_COVER / (wanted as f64 * std::f64::consts::PI)).sqrt() * side;

    let mut labels = LabelMap::filled(h, w, 1, 0);
    let mut glands: Vec<Ellipse> = Vec::new();
    let mut covered = 0usize;
    let mut tries = 0;
    let min_cover = MIN_COVER * (h * w) as f64;
    while glands.len() < MAX_GLANDS && tries < MAX_TRIES {
        let enough_cover = covered as f64 >= min_cover;
        if enough_cover && (glands.len() >= wanted || tries >= wanted * TRIES_PER_GLAND) {
            break;
        }
        tries += 1;
        let a = radius * rng.random_range(0.8..1.2);
        let b = a * rng.random_range(0.65..1.0);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let margin = a + 2.0;
        if 2.0 * margin >= h as f64 || 2.0 * margin >= w as f64 {
            continue;
        }
        let e = Ellipse {
            cy: rng.random_range(margin..h as f64 - margin),
            cx: rng.random_range(margin..w as f64 - margin),
            a,
            b,
            cos: theta.cos(),
            sin: theta.sin(),
        };
        if collides(&labels, &e, gap) {
            continue;
        }
        let label = glands.len() as u32 + 1;
        let (y0, x0, y1, x1) = e.bbox(0.0, h, w);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if e.rho(y as f64, x as f64, 0.0) <= 1.0 {
                    labels.set(y, x, 0, label);
                    covered += 1;
                }
            }
        }
        glands.push(e);
    }

    let image = render(&labels, &glands, &mut rng);
    ImageSample {
        id: id.to_string(),
        image,
        instance_mask: labels,
    }
}

fn collides(labels: &LabelMap, e: &Ellipse, gap: f64) -> bool {
    let (y0, x0, y1, x1) = e.bbox(gap, labels.height(), labels.width());
    (y0..=y1).any(|y| (x0..=x1).any(|x| labels.at(y, x) != 0 && e.rho(y as f64, x as f64, gap) <= 1.0))
}

fn render(labels: &LabelMap, glands: &[Ellipse], rng: &mut impl Rng) -> RgbRaster {
    let (h, w) = labels.dims();
    // Low-frequency stain variation.
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.01..0.06),
                rng.random_range(0.01..0.06),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(4.0..10.0),
            )
        })
        .collect();
    // Stray stromal nuclei.
    let dots: Vec<(f64, f64, f64)> = (0..(h * w) / 400)
        .map(|_| {
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(1.0..2.2),
            )
        })
        .collect();

    let mut img = RgbRaster::filled(h, w, 3, 0);
    for y in 0..h {
        for x in 0..w {
            let label = labels.at(y, x);
            let base = if label == 0 {
                let near_dot = dots
                    .iter()
                    .any(|&(dy, dx, r)| (dy - y as f64).powi(2) + (dx - x as f64).powi(2) <= r * r);
                if near_dot {
                    NUCLEI
                } else {
                    STROMA
                }
            } else {
                let e = &glands[label as usize - 1];
                let rho = e.rho(y as f64, x as f64, 0.0);
                let rim = 1.0 - (0.22 * e.b).max(2.5) / e.b;
                let cyto = 1.0 - (0.45 * e.b).max(4.0) / e.b;
                if rho > rim {
                    NUCLEI
                } else if rho > cyto {
                    CYTOPLASM
                } else {
                    LUMEN
                }
            };
            let shade: f64 = waves
                .iter()
                .map(|&(fy, fx, ph, amp)| amp * (fy * y as f64 + fx * x as f64 + ph).sin())
                .sum();
            for c in 0..3 {
                let noise = rng.random_range(-14.0..14.0);
                img.set(y, x, c, (base[c] + shade + noise).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    img
}
