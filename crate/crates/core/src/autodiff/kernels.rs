//! Raw numeric kernels behind the graph operations. Images are `N x C x H x W`.

use crate::tensor::{gemm, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_dim(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if padded < kernel || self.stride == 0 {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

struct Dims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

fn im2col<T: Real>(x: &[T], d: &Dims, g: ConvGeom, cols: &mut [T]) {
    let p = d.oh * d.ow;
    for c in 0..d.c {
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (c * d.k + ki) * d.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..d.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * d.ow..(oi + 1) * d.ow];
                    if ii < 0 || ii as usize >= d.h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * d.h + ii as usize) * d.w..(c * d.h + ii as usize + 1) * d.w];
                    for (oj, slot) in line.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *slot = if jj < 0 || jj as usize >= d.w { T::zero() } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], d: &Dims, g: ConvGeom, x: &mut [T]) {
    let p = d.oh * d.ow;
    for c in 0..d.c {
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (c * d.k + ki) * d.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..d.oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= d.h {
                        continue;
                    }
                    let base = (c * d.h + ii as usize) * d.w;
                    for oj in 0..d.ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < d.w {
                            x[base + jj as usize] += src[oi * d.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

fn dims(x_shape: &[usize], w_shape: &[usize], g: ConvGeom) -> Dims {
    assert_eq!(x_shape.len(), 4, "conv input must be NCHW, got {:?}", x_shape);
    assert_eq!(w_shape.len(), 4, "conv weight must be OCkk, got {:?}", w_shape);
    assert_eq!(x_shape[1], w_shape[1], "conv channel mismatch");
    assert_eq!(w_shape[2], w_shape[3], "square kernels only");
    let k = w_shape[2];
    let oh = g.out_dim(x_shape[2], k).expect("kernel larger than input");
    let ow = g.out_dim(x_shape[3], k).expect("kernel larger than input");
    Dims { n: x_shape[0], c: x_shape[1], h: x_shape[2], w: x_shape[3], o: w_shape[0], k, oh, ow }
}

pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, g: ConvGeom) -> Tensor<T> {
    let d = dims(x.shape(), w.shape(), g);
    let p = d.oh * d.ow;
    let ckk = d.c * d.k * d.k;
    let mut out = Tensor::zeros(&[d.n, d.o, d.oh, d.ow]);
    let mut cols = vec![T::zero(); ckk * p];
    let xin = d.c * d.h * d.w;
    for n in 0..d.n {
        im2col(&x.data()[n * xin..(n + 1) * xin], &d, g, &mut cols);
        let dst = &mut out.data_mut()[n * d.o * p..(n + 1) * d.o * p];
        gemm(d.o, ckk, p, w.data(), false, &cols, false, dst, false);
    }
    out
}

/// Gradient of `<gy, conv2d(x, w)>` with respect to `x`.
pub fn conv_input_grad<T: Real>(gy: &Tensor<T>, w: &Tensor<T>, g: ConvGeom, in_hw: (usize, usize)) -> Tensor<T> {
    let n = gy.shape()[0];
    let x_shape = [n, w.shape()[1], in_hw.0, in_hw.1];
    let d = dims(&x_shape, w.shape(), g);
    assert_eq!(gy.shape(), &[d.n, d.o, d.oh, d.ow], "conv_input_grad: gy shape");
    let p = d.oh * d.ow;
    let ckk = d.c * d.k * d.k;
    let xin = d.c * d.h * d.w;
    let mut out = Tensor::zeros(&x_shape);
    let mut cols = vec![T::zero(); ckk * p];
    for s in 0..d.n {
        let gs = &gy.data()[s * d.o * p..(s + 1) * d.o * p];
        gemm(ckk, d.o, p, w.data(), true, gs, false, &mut cols, false);
        col2im(&cols, &d, g, &mut out.data_mut()[s * xin..(s + 1) * xin]);
    }
    out
}

/// Gradient of `<gy, conv2d(x, w)>` with respect to `w`.
pub fn conv_weight_grad<T: Real>(x: &Tensor<T>, gy: &Tensor<T>, g: ConvGeom, k: usize) -> Tensor<T> {
    let w_shape = [gy.shape()[1], x.shape()[1], k, k];
    let d = dims(x.shape(), &w_shape, g);
    assert_eq!(gy.shape(), &[d.n, d.o, d.oh, d.ow], "conv_weight_grad: gy shape");
    let p = d.oh * d.ow;
    let ckk = d.c * d.k * d.k;
    let xin = d.c * d.h * d.w;
    let mut out = Tensor::zeros(&w_shape);
    let mut cols = vec![T::zero(); ckk * p];
    for s in 0..d.n {
        im2col(&x.data()[s * xin..(s + 1) * xin], &d, g, &mut cols);
        let gs = &gy.data()[s * d.o * p..(s + 1) * d.o * p];
        gemm(d.o, p, ckk, gs, false, &cols, true, out.data_mut(), true);
    }
    out
}

pub fn log_softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (rows, cols) = (x.shape()[0], x.shape()[1]);
    let mut out = x.clone();
    for r in 0..rows {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Weighted anisotropic total variation of an `N x C x H x W` batch and its
/// subgradient (`sign` of each finite difference, scattered back).
pub fn total_variation<T: Real>(x: &Tensor<T>, wx: T, wy: T) -> (T, Tensor<T>) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "total variation expects NCHW");
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let mut tv = T::zero();
    let mut sub = Tensor::zeros(s);
    let sign = |v: T| {
        if v > T::zero() {
            T::one()
        } else if v < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    };
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..h {
            for j in 0..w {
                let at = base + i * w + j;
                let v = x.data()[at];
                if j + 1 < w {
                    let d = x.data()[at + 1] - v;
                    tv += wx * d.abs();
                    let sg = wx * sign(d);
                    sub.data_mut()[at + 1] += sg;
                    sub.data_mut()[at] -= sg;
                }
                if i + 1 < h {
                    let d = x.data()[at + w] - v;
                    tv += wy * d.abs();
                    let sg = wy * sign(d);
                    sub.data_mut()[at + w] += sg;
                    sub.data_mut()[at] -= sg;
                }
            }
        }
    }
    (tv, sub)
}
