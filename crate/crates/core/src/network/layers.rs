//! Forward and backward kernels for the layer types the network uses.

use super::params::{BatchNorm, Conv2d};
use super::tensor::Tensor;

/// Row-major `c = alpha·op(a)·op(b) + beta·c` with `op(a)` m×k and `op(b)` k×n.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the strided extents asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Same-padding offsets for a k×k kernel: the odd pixel goes bottom/right.
#[inline]
pub(crate) fn pad_before(k: usize) -> isize {
    ((k - 1) / 2) as isize
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let hw = h * w;
    let pb = pad_before(k);
    for ci in 0..c {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let oy = ky as isize - pb;
            for kx in 0..k {
                let ox = kx as isize - pb;
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let x0 = (-ox).max(0) as usize;
                let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let d = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        d.fill(0.0);
                        continue;
                    }
                    let s = &src[sy as usize * w..(sy as usize + 1) * w];
                    d[..x0].fill(0.0);
                    d[x1..].fill(0.0);
                    d[x0..x1].copy_from_slice(&s[(x0 as isize + ox) as usize..(x1 as isize + ox) as usize]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the image.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, dx: &mut [f64]) {
    let hw = h * w;
    let pb = pad_before(k);
    for ci in 0..c {
        let dst = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let oy = ky as isize - pb;
            for kx in 0..k {
                let ox = kx as isize - pb;
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let x0 = (-ox).max(0) as usize;
                let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = &src[y * w + x0..y * w + x1];
                    let d = &mut dst[sy as usize * w + (x0 as isize + ox) as usize..];
                    for (dv, sv) in d.iter_mut().zip(s) {
                        *dv += sv;
                    }
                }
            }
        }
    }
}

/// Stride-1 same-padded convolution.
pub fn conv2d_forward(x: &Tensor, conv: &Conv2d) -> Tensor {
    assert_eq!(x.c, conv.in_ch, "conv input channels");
    let (k, hw) = (conv.kernel, x.hw());
    let rows = conv.in_ch * k * k;
    let mut y = Tensor::zeros(x.n, conv.out_ch, x.h, x.w);
    let mut cols = if k == 1 { Vec::new() } else { vec![0.0; rows * hw] };
    for i in 0..x.n {
        let xi = x.sample(i);
        let b: &[f64] = if k == 1 {
            xi
        } else {
            im2col(xi, x.c, x.h, x.w, k, &mut cols);
            &cols
        };
        let yi = y.sample_mut(i);
        if let Some(bias) = &conv.bias {
            for (o, &bv) in bias.iter().enumerate() {
                yi[o * hw..(o + 1) * hw].fill(bv);
            }
            gemm(conv.out_ch, rows, hw, &conv.weight, false, b, false, 1.0, yi);
        } else {
            gemm(conv.out_ch, rows, hw, &conv.weight, false, b, false, 0.0, yi);
        }
    }
    y
}

/// Accumulates weight/bias gradients into `grad`; returns dL/dx when `need_dx`.
pub fn conv2d_backward(x: &Tensor, conv: &Conv2d, dy: &Tensor, grad: &mut Conv2d, need_dx: bool) -> Option<Tensor> {
    let (k, hw) = (conv.kernel, x.hw());
    let rows = conv.in_ch * k * k;
    let mut dx = need_dx.then(|| Tensor::zeros(x.n, x.c, x.h, x.w));
    let mut cols = if k == 1 { Vec::new() } else { vec![0.0; rows * hw] };
    let mut dcols = if need_dx && k != 1 { vec![0.0; rows * hw] } else { Vec::new() };
    for i in 0..x.n {
        let dyi = dy.sample(i);
        if let Some(gb) = grad.bias.as_mut() {
            for (o, g) in gb.iter_mut().enumerate() {
                *g += dyi[o * hw..(o + 1) * hw].iter().sum::<f64>();
            }
        }
        let xi = x.sample(i);
        let b: &[f64] = if k == 1 {
            xi
        } else {
            im2col(xi, x.c, x.h, x.w, k, &mut cols);
            &cols
        };
        // dW[out, rows] += dY[out, hw] · colsᵀ
        gemm(conv.out_ch, hw, rows, dyi, false, b, true, 1.0, &mut grad.weight);
        if let Some(dx) = dx.as_mut() {
            let dxi = dx.sample_mut(i);
            if k == 1 {
                gemm(rows, conv.out_ch, hw, &conv.weight, true, dyi, false, 0.0, dxi);
            } else {
                gemm(rows, conv.out_ch, hw, &conv.weight, true, dyi, false, 0.0, &mut dcols);
                col2im(&dcols, x.c, x.h, x.w, k, dxi);
            }
        }
    }
    dx
}

/// Saved state of a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch statistics over (N, H, W) per channel; biased variance.
pub fn batchnorm_forward_train(x: &Tensor, bn: &BatchNorm, eps: f64) -> (Tensor, BnCache) {
    let count = (x.n * x.hw()) as f64;
    let mut mean = vec![0.0; x.c];
    let mut var = vec![0.0; x.c];
    for c in 0..x.c {
        let s: f64 = (0..x.n).map(|i| x.plane(i, c).iter().sum::<f64>()).sum();
        let m = s / count;
        let v: f64 = (0..x.n)
            .map(|i| x.plane(i, c).iter().map(|&z| (z - m) * (z - m)).sum::<f64>())
            .sum::<f64>()
            / count;
        mean[c] = m;
        var[c] = v;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = x.clone();
    let mut y = Tensor::zeros(x.n, x.c, x.h, x.w);
    for i in 0..x.n {
        for c in 0..x.c {
            let (m, s, g, b) = (mean[c], inv_std[c], bn.gamma[c], bn.beta[c]);
            let xh = xhat.plane_mut(i, c);
            for v in xh.iter_mut() {
                *v = (*v - m) * s;
            }
            for (o, &v) in y.plane_mut(i, c).iter_mut().zip(xhat.plane(i, c)) {
                *o = g * v + b;
            }
        }
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            mean,
            var,
        },
    )
}

/// Normalization with the running statistics.
pub fn batchnorm_forward_infer(x: &Tensor, bn: &BatchNorm, eps: f64) -> Tensor {
    let mut y = x.clone();
    for c in 0..x.c {
        let s = 1.0 / (bn.running_var[c] + eps).sqrt();
        let scale = bn.gamma[c] * s;
        let shift = bn.beta[c] - bn.running_mean[c] * scale;
        for i in 0..x.n {
            for v in y.plane_mut(i, c) {
                *v = *v * scale + shift;
            }
        }
    }
    y
}

pub fn batchnorm_backward(cache: &BnCache, bn: &BatchNorm, dy: &Tensor, grad: &mut BatchNorm) -> Tensor {
    let xhat = &cache.xhat;
    let count = (xhat.n * xhat.hw()) as f64;
    let mut dx = Tensor::zeros(xhat.n, xhat.c, xhat.h, xhat.w);
    for c in 0..xhat.c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for i in 0..xhat.n {
            for (&g, &xh) in dy.plane(i, c).iter().zip(xhat.plane(i, c)) {
                sum_dy += g;
                sum_dy_xhat += g * xh;
            }
        }
        grad.beta[c] += sum_dy;
        grad.gamma[c] += sum_dy_xhat;
        let k = bn.gamma[c] * cache.inv_std[c] / count;
        for i in 0..xhat.n {
            let dyp = dy.plane(i, c);
            let xhp = xhat.plane(i, c);
            for ((o, &g), &xh) in dx.plane_mut(i, c).iter_mut().zip(dyp).zip(xhp) {
                *o = k * (count * g - sum_dy - xh * sum_dy_xhat);
            }
        }
    }
    dx
}

pub fn relu_inplace(x: &mut Tensor) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gradient through ReLU given its output.
pub fn relu_backward(out: &Tensor, dy: &mut Tensor) {
    for (g, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2×2 max pooling, stride 2. Returns the argmax (0..4) of every window.
pub fn maxpool2_forward(x: &Tensor) -> (Tensor, Vec<u8>) {
    assert!(x.h % 2 == 0 && x.w % 2 == 0, "max pooling needs even spatial dims");
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0u8; y.data.len()];
    let mut idx = 0;
    for i in 0..x.n {
        for c in 0..x.c {
            let p = x.plane(i, c);
            let out = y.plane_mut(i, c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = 2 * oy * x.w + 2 * ox;
                    let cand = [p[base], p[base + 1], p[base + x.w], p[base + x.w + 1]];
                    let mut best = 0;
                    for j in 1..4 {
                        if cand[j] > cand[best] {
                            best = j;
                        }
                    }
                    out[oy * ow + ox] = cand[best];
                    arg[idx + oy * ow + ox] = best as u8;
                }
            }
            idx += oh * ow;
        }
    }
    (y, arg)
}

pub fn maxpool2_backward(dy: &Tensor, arg: &[u8]) -> Tensor {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    let mut idx = 0;
    for i in 0..dy.n {
        for c in 0..dy.c {
            let g = dy.plane(i, c);
            let d = dx.plane_mut(i, c);
            for oy in 0..dy.h {
                for ox in 0..dy.w {
                    let j = oy * dy.w + ox;
                    let a = arg[idx + j] as usize;
                    d[(2 * oy + a / 2) * w + 2 * ox + a % 2] += g[j];
                }
            }
            idx += dy.hw();
        }
    }
    dx
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2_forward(x: &Tensor) -> Tensor {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut y = Tensor::zeros(x.n, x.c, h, w);
    for i in 0..x.n {
        for c in 0..x.c {
            let p = x.plane(i, c);
            let out = y.plane_mut(i, c);
            for yy in 0..h {
                let row = &p[(yy / 2) * x.w..(yy / 2 + 1) * x.w];
                for (xx, o) in out[yy * w..(yy + 1) * w].iter_mut().enumerate() {
                    *o = row[xx / 2];
                }
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for i in 0..dy.n {
        for c in 0..dy.c {
            let g = dy.plane(i, c);
            let d = dx.plane_mut(i, c);
            for yy in 0..dy.h {
                for xx in 0..dy.w {
                    d[(yy / 2) * w + xx / 2] += g[yy * dy.w + xx];
                }
            }
        }
    }
    dx
}

/// Channel concatenation `[a, b]`.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat spatial shape");
    let mut y = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    for i in 0..a.n {
        let (la, lb) = (a.sample_len(), b.sample_len());
        let out = y.sample_mut(i);
        out[..la].copy_from_slice(a.sample(i));
        out[la..la + lb].copy_from_slice(b.sample(i));
    }
    y
}

/// Inverse of [`concat_channels`] for gradients.
pub fn split_channels(y: &Tensor, first: usize) -> (Tensor, Tensor) {
    let mut a = Tensor::zeros(y.n, first, y.h, y.w);
    let mut b = Tensor::zeros(y.n, y.c - first, y.h, y.w);
    for i in 0..y.n {
        let s = y.sample(i);
        let la = a.sample_len();
        a.sample_mut(i).copy_from_slice(&s[..la]);
        b.sample_mut(i).copy_from_slice(&s[la..]);
    }
    (a, b)
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn random_tensor(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = stream_rng(&[seed]);
        let data = (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(n, c, h, w, data).unwrap()
    }

    /// Direct nested-loop convolution with the same padding convention.
    fn conv_oracle(x: &Tensor, conv: &Conv2d) -> Tensor {
        let k = conv.kernel;
        let pb = pad_before(k);
        let mut y = Tensor::zeros(x.n, conv.out_ch, x.h, x.w);
        for i in 0..x.n {
            for o in 0..conv.out_ch {
                for yy in 0..x.h {
                    for xx in 0..x.w {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b[o]);
                        for ci in 0..x.c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = yy as isize + ky as isize - pb;
                                    let sx = xx as isize + kx as isize - pb;
                                    if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                        continue;
                                    }
                                    acc += conv.weight[((o * x.c + ci) * k + ky) * k + kx]
                                        * x.plane(i, ci)[sy as usize * x.w + sx as usize];
                                }
                            }
                        }
                        y.plane_mut(i, o)[yy * x.w + xx] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (k, bias) in [(1, true), (2, false), (3, false), (3, true)] {
            let x = random_tensor(2, 3, 7, 5, 1);
            let mut rng = stream_rng(&[k as u64]);
            let conv = Conv2d {
                out_ch: 4,
                in_ch: 3,
                kernel: k,
                weight: (0..4 * 3 * k * k).map(|_| rng.random_range(-1.0..1.0)).collect(),
                bias: bias.then(|| vec![0.1, -0.2, 0.3, 0.0]),
            };
            let got = conv2d_forward(&x, &conv);
            let want = conv_oracle(&x, &conv);
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12, "k={k}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), dy> = <x, conv_backward_x(dy)> and = <w, conv_backward_w(dy)> for bias-free conv
        for k in [1, 2, 3] {
            let x = random_tensor(2, 3, 6, 5, 10 + k as u64);
            let dy = random_tensor(2, 2, 6, 5, 20 + k as u64);
            let mut rng = stream_rng(&[k as u64, 9]);
            let conv = Conv2d {
                out_ch: 2,
                in_ch: 3,
                kernel: k,
                weight: (0..2 * 3 * k * k).map(|_| rng.random_range(-1.0..1.0)).collect(),
                bias: None,
            };
            let y = conv2d_forward(&x, &conv);
            let lhs: f64 = y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
            let mut g = conv.zeros_like();
            let dx = conv2d_backward(&x, &conv, &dy, &mut g, true).unwrap();
            let rhs_x: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
            let rhs_w: f64 = conv.weight.iter().zip(&g.weight).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs_x).abs() < 1e-10, "k={k}: {lhs} vs {rhs_x}");
            assert!((lhs - rhs_w).abs() < 1e-10, "k={k}: {lhs} vs {rhs_w}");
        }
    }

    #[test]
    fn infer_bn_with_unit_stats_is_identity() {
        let x = random_tensor(2, 3, 4, 4, 3);
        let bn = BatchNorm::new(3);
        let y = batchnorm_forward_infer(&x, &bn, 0.0);
        assert_eq!(y, x);
    }

    #[test]
    fn train_bn_output_moments_follow_scale_and_offset() {
        let x = random_tensor(4, 3, 8, 8, 4);
        let mut bn = BatchNorm::new(3);
        bn.gamma = vec![1.5, 0.5, 2.0];
        bn.beta = vec![0.3, -1.0, 0.0];
        let (y, _) = batchnorm_forward_train(&x, &bn, 1e-3);
        let count = (4 * 64) as f64;
        for c in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|i| y.plane(i, c).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / count;
            let v = vals.iter().map(|z| (z - m).powi(2)).sum::<f64>() / count;
            assert!((m - bn.beta[c]).abs() < 1e-3, "mean {m}");
            assert!((v - bn.gamma[c].powi(2)).abs() < 1e-3 * bn.gamma[c].powi(2) * 10.0, "var {v}");
        }
    }

    #[test]
    fn pooling_and_upsampling_shapes() {
        let x = random_tensor(1, 2, 8, 6, 5);
        let (p, arg) = maxpool2_forward(&x);
        assert_eq!(p.shape(), [1, 2, 4, 3]);
        let back = maxpool2_backward(&p, &arg);
        // every pooled max lands on its own source
        for (i, &v) in back.data.iter().enumerate() {
            assert!(v == 0.0 || v == x.data[i]);
        }
        let c = Tensor::from_vec(1, 1, 2, 2, vec![3.0; 4]).unwrap();
        let u = upsample2_forward(&c);
        assert_eq!(u.shape(), [1, 1, 4, 4]);
        assert!(u.data.iter().all(|&v| v == 3.0));
        assert_eq!(upsample2_backward(&u).data, vec![12.0; 4]);
    }

    #[test]
    fn concat_and_split_invert() {
        let a = random_tensor(2, 3, 4, 4, 6);
        let b = random_tensor(2, 5, 4, 4, 7);
        let y = concat_channels(&a, &b);
        assert_eq!(y.c, 8);
        let (a2, b2) = split_channels(&y, 3);
        assert_eq!((a2, b2), (a, b));
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(800.0) == 1.0 && sigmoid(-800.0) >= 0.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
