use crate::error::{Error, Result};
use crate::raster::Raster;

/// Dense NCHW activation tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::Shape(format!("{} values for a {n}x{c}x{h}x{w} tensor", data.len())));
        }
        Ok(Self { n, c, h, w, data })
    }

    /// Stack H×W×C rasters into an N×C×H×W tensor.
    pub fn from_rasters(items: &[Raster<f64>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
        let (h, w, c) = (first.height(), first.width(), first.channels());
        let mut t = Self::zeros(items.len(), c, h, w);
        let hw = h * w;
        for (i, r) in items.iter().enumerate() {
            if r.height() != h || r.width() != w || r.channels() != c {
                return Err(Error::Shape(format!("batch item {i} differs in shape from item 0")));
            }
            let dst = t.sample_mut(i);
            for (p, px) in r.as_slice().chunks_exact(c).enumerate() {
                for (ch, &v) in px.iter().enumerate() {
                    dst[ch * hw + p] = v;
                }
            }
        }
        Ok(t)
    }

    /// Channel `c` of sample `i` as an H×W raster.
    pub fn plane_raster(&self, i: usize, c: usize) -> Raster<f64> {
        Raster::from_vec(self.h, self.w, 1, self.plane(i, c).to_vec()).expect("plane size")
    }

    #[inline]
    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    pub fn sample(&self, i: usize) -> &[f64] {
        let l = self.sample_len();
        &self.data[i * l..(i + 1) * l]
    }

    #[inline]
    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let l = self.sample_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    #[inline]
    pub fn plane(&self, i: usize, c: usize) -> &[f64] {
        let hw = self.hw();
        let start = (i * self.c + c) * hw;
        &self.data[start..start + hw]
    }

    #[inline]
    pub fn plane_mut(&mut self, i: usize, c: usize) -> &mut [f64] {
        let hw = self.hw();
        let start = (i * self.c + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
