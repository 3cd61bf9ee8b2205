use super::{ImageSample, TargetPair};
use crate::raster::{LabelMap, Mask};

pub const DEFAULT_BAND_WIDTH: usize = 2;

/// Gland and contour targets for one sample.
///
/// A gland pixel is contour when some pixel within Chebyshev distance
/// `band_width` carries a different label (another gland or background).
/// The band therefore lies on the inner side of every gland boundary, and
/// both sides of an edge shared by two touching glands. Pixels outside the
/// frame are not considered neighbours.
pub fn derive_targets(sample: &ImageSample, band_width: usize) -> TargetPair {
    assert!(band_width >= 1, "band_width must be positive");
    let labels = &sample.instance_mask;
    TargetPair {
        gland: labels.map(|l| u8::from(l > 0)),
        contour: inner_boundary_band(labels, band_width),
        band_width,
    }
}

fn inner_boundary_band(labels: &LabelMap, r: usize) -> Mask {
    let (h, w) = labels.dims();
    // A pixel differs from some neighbour in its window iff the window is not
    // uniform. Row pass then column pass of running min/max over the window.
    let (row_min, row_max) = window_min_max_rows(labels.as_slice(), h, w, r);
    let mut out = Mask::filled(h, w, 1, 0);
    for x in 0..w {
        for y in 0..h {
            let own = labels.at(y, x);
            if own == 0 {
                continue;
            }
            let y0 = y.saturating_sub(r);
            let y1 = (y + r).min(h - 1);
            let mut lo = u32::MAX;
            let mut hi = 0;
            for yy in y0..=y1 {
                lo = lo.min(row_min[yy * w + x]);
                hi = hi.max(row_max[yy * w + x]);
            }
            if lo != own || hi != own {
                out.set(y, x, 0, 1);
            }
        }
    }
    out
}

fn window_min_max_rows(data: &[u32], h: usize, w: usize, r: usize) -> (Vec<u32>, Vec<u32>) {
    let mut mins = vec![0; h * w];
    let mut maxs = vec![0; h * w];
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        for x in 0..w {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r).min(w - 1);
            let win = &row[x0..=x1];
            mins[y * w + x] = *win.iter().min().unwrap();
            maxs[y * w + x] = *win.iter().max().unwrap();
        }
    }
    (mins, maxs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{Raster, RgbRaster};

    fn sample_from(labels: LabelMap) -> ImageSample {
        let (h, w) = labels.dims();
        ImageSample {
            id: "t".into(),
            image: RgbRaster::filled(h, w, 3, 0),
            instance_mask: labels,
        }
    }

    /// Direct scan of the neighbourhood of every pixel.
    fn oracle(labels: &LabelMap, r: usize) -> Mask {
        let (h, w) = labels.dims();
        let r = r as isize;
        Mask::from_fn(h, w, 1, |y, x, _| {
            let own = labels.at(y, x);
            if own == 0 {
                return 0;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    if labels.at(yy as usize, xx as usize) != own {
                        return 1;
                    }
                }
            }
            0
        })
    }

    #[test]
    fn all_background_has_no_targets() {
        let t = derive_targets(&sample_from(Raster::filled(8, 8, 1, 0)), 2);
        assert_eq!(t.gland.count_ones(), 0);
        assert_eq!(t.contour.count_ones(), 0);
    }

    #[test]
    fn square_gives_perimeter_ring() {
        let labels = LabelMap::from_fn(8, 8, 1, |y, x, _| u32::from((2..6).contains(&y) && (2..6).contains(&x)));
        let t = derive_targets(&sample_from(labels.clone()), 1);
        assert_eq!(t.contour, oracle(&labels, 1));
        assert_eq!(t.contour.count_ones(), 12);
        // ring only: the 2x2 core stays off
        for y in 3..5 {
            for x in 3..5 {
                assert_eq!(t.contour.at(y, x), 0);
            }
        }
    }

    #[test]
    fn touching_instances_mark_both_sides() {
        // label 1 on columns 1..4, label 2 on columns 4..7 of rows 1..7
        let labels = LabelMap::from_fn(8, 8, 1, |y, x, _| match (y, x) {
            (1..=6, 1..=3) => 1,
            (1..=6, 4..=6) => 2,
            _ => 0,
        });
        let t = derive_targets(&sample_from(labels.clone()), 1);
        assert_eq!(t.contour, oracle(&labels, 1));
        for y in 1..7 {
            assert_eq!(t.contour.at(y, 3), 1);
            assert_eq!(t.contour.at(y, 4), 1);
        }
    }

    #[test]
    fn matches_oracle_on_random_maps() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let h = rng.random_range(1..20);
            let w = rng.random_range(1..20);
            let labels = LabelMap::from_fn(h, w, 1, |_, _, _| rng.random_range(0..4));
            for r in 1..4 {
                let t = derive_targets(&sample_from(labels.clone()), r);
                assert_eq!(t.contour, oracle(&labels, r));
                assert_eq!(t.gland, labels.map(|l| u8::from(l > 0)));
            }
        }
    }

    #[test]
    fn band_one_pixels_have_a_differing_neighbour() {
        let s = super::super::synthetic_sample("x", 96, 96, 11);
        let t = derive_targets(&s, 1);
        let m = &s.instance_mask;
        for y in 0..96 {
            for x in 0..96 {
                if t.contour.at(y, x) == 1 {
                    let mut found = false;
                    for yy in y.saturating_sub(1)..=(y + 1).min(95) {
                        for xx in x.saturating_sub(1)..=(x + 1).min(95) {
                            found |= m.at(yy, xx) != m.at(y, x);
                        }
                    }
                    assert!(found, "contour pixel ({y},{x}) has uniform neighbourhood");
                }
            }
        }
    }

    #[test]
    fn gland_binarization_is_idempotent() {
        let s = super::super::synthetic_sample("x", 64, 64, 5);
        let t = derive_targets(&s, 2);
        let again = t.gland.map(|v| u8::from(v > 0));
        assert_eq!(again, t.gland);
    }
}
