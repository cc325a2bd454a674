//! Raw compute kernels on row-major `[batch, channels, height, width]` buffers.
//!
//! Everything here is slice-in, slice-out; the autograd layer in
//! [`crate::graph`] owns shapes and bookkeeping.

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self { stride, padding, dilation }
    }

    /// Output extent along one axis, `None` when the kernel does not fit.
    pub fn out_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvDims {
    pub fn rows(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Unfold `x` into a `[C*kh*kw, B*oh*ow]` matrix with zero padding.
pub fn im2col<T: Scalar>(x: &[T], d: &ConvDims, g: ConvGeometry, cols: &mut [T]) {
    let n = d.cols();
    let ohw = d.out_h * d.out_w;
    debug_assert_eq!(cols.len(), d.rows() * n);
    for c in 0..d.in_channels {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let dst_row = &mut cols[row * n..(row + 1) * n];
                for b in 0..d.batch {
                    let plane = &x[(b * d.in_channels + c) * d.height * d.width..][..d.height * d.width];
                    let dst = &mut dst_row[b * ohw..(b + 1) * ohw];
                    for oy in 0..d.out_h {
                        let iy = (oy * g.stride + ki * g.dilation) as isize - g.padding as isize;
                        let dst_line = &mut dst[oy * d.out_w..(oy + 1) * d.out_w];
                        if iy < 0 || iy >= d.height as isize {
                            dst_line.fill(T::zero());
                            continue;
                        }
                        let src_line = &plane[iy as usize * d.width..][..d.width];
                        let off = (kj * g.dilation) as isize - g.padding as isize;
                        if g.stride == 1 {
                            for (ox, v) in dst_line.iter_mut().enumerate() {
                                let ix = ox as isize + off;
                                *v = if ix >= 0 && ix < d.width as isize { src_line[ix as usize] } else { T::zero() };
                            }
                        } else {
                            for (ox, v) in dst_line.iter_mut().enumerate() {
                                let ix = (ox * g.stride) as isize + off;
                                *v = if ix >= 0 && ix < d.width as isize { src_line[ix as usize] } else { T::zero() };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate a column matrix back into image space.
pub fn col2im<T: Scalar>(cols: &[T], d: &ConvDims, g: ConvGeometry, dx: &mut [T]) {
    let n = d.cols();
    let ohw = d.out_h * d.out_w;
    for c in 0..d.in_channels {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let src_row = &cols[row * n..(row + 1) * n];
                for b in 0..d.batch {
                    let plane = &mut dx[(b * d.in_channels + c) * d.height * d.width..][..d.height * d.width];
                    let src = &src_row[b * ohw..(b + 1) * ohw];
                    for oy in 0..d.out_h {
                        let iy = (oy * g.stride + ki * g.dilation) as isize - g.padding as isize;
                        if iy < 0 || iy >= d.height as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * d.width..][..d.width];
                        let off = (kj * g.dilation) as isize - g.padding as isize;
                        for ox in 0..d.out_w {
                            let ix = (ox * g.stride) as isize + off;
                            if ix >= 0 && ix < d.width as isize {
                                line[ix as usize] += src[oy * d.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[C, B*HW]` matrix to `[B, C, HW]` layout.
pub fn cmajor_to_bmajor<T: Scalar>(src: &[T], batch: usize, channels: usize, hw: usize, dst: &mut [T]) {
    for c in 0..channels {
        for b in 0..batch {
            dst[(b * channels + c) * hw..][..hw].copy_from_slice(&src[c * batch * hw + b * hw..][..hw]);
        }
    }
}

/// `[B, C, HW]` to `[C, B*HW]` layout.
pub fn bmajor_to_cmajor<T: Scalar>(src: &[T], batch: usize, channels: usize, hw: usize, dst: &mut [T]) {
    for c in 0..channels {
        for b in 0..batch {
            dst[c * batch * hw + b * hw..][..hw].copy_from_slice(&src[(b * channels + c) * hw..][..hw]);
        }
    }
}

/// Reflect an index into `[0, n)` without repeating the edge sample
/// (`-1 -> 1`, `n -> n - 2`). Single-sample axes clamp.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Apply the same odd-sized `k x k` kernel to every channel plane with
/// reflective padding; output size equals input size.
pub fn filter_reflect<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, kernel: &[T], k: usize, out: &mut [T]) {
    let r = (k / 2) as isize;
    let rows: Vec<Vec<usize>> = (0..h).map(|y| (0..k).map(|i| reflect_index(y as isize + i as isize - r, h)).collect()).collect();
    let cols: Vec<Vec<usize>> = (0..w).map(|x| (0..k).map(|j| reflect_index(x as isize + j as isize - r, w)).collect()).collect();
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * h * w..][..h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = T::zero();
                for (i, &sy) in rows[y].iter().enumerate() {
                    for (j, &sx) in cols[xx].iter().enumerate() {
                        acc += kernel[i * k + j] * src[sy * w + sx];
                    }
                }
                dst[y * w + xx] = acc;
            }
        }
    }
}

/// Adjoint of [`filter_reflect`] with respect to its input.
pub fn filter_reflect_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize, kernel: &[T], k: usize, dx: &mut [T]) {
    let r = (k / 2) as isize;
    let rows: Vec<Vec<usize>> = (0..h).map(|y| (0..k).map(|i| reflect_index(y as isize + i as isize - r, h)).collect()).collect();
    let cols: Vec<Vec<usize>> = (0..w).map(|x| (0..k).map(|j| reflect_index(x as isize + j as isize - r, w)).collect()).collect();
    for p in 0..planes {
        let g = &dy[p * h * w..][..h * w];
        let dst = &mut dx[p * h * w..][..h * w];
        for y in 0..h {
            for xx in 0..w {
                let gv = g[y * w + xx];
                for (i, &sy) in rows[y].iter().enumerate() {
                    for (j, &sx) in cols[xx].iter().enumerate() {
                        dst[sy * w + sx] += kernel[i * k + j] * gv;
                    }
                }
            }
        }
    }
}

/// Interpolation taps for one axis of an align-corners-false bilinear resize.
#[derive(Clone, Copy, Debug)]
pub struct Taps {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

pub fn bilinear_taps(input: usize, output: usize) -> Vec<Taps> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = src - i0 as f64;
            Taps { i0, i1, w0: 1.0 - frac, w1: frac }
        })
        .collect()
}

pub fn resize_bilinear<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize, out: &mut [T]) {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for (y, a) in ty.iter().enumerate() {
            let (ay0, ay1) = (T::of(a.w0), T::of(a.w1));
            for (xx, b) in tx.iter().enumerate() {
                let (bx0, bx1) = (T::of(b.w0), T::of(b.w1));
                let top = src[a.i0 * w + b.i0] * bx0 + src[a.i0 * w + b.i1] * bx1;
                let bot = src[a.i1 * w + b.i0] * bx0 + src[a.i1 * w + b.i1] * bx1;
                dst[y * ow + xx] = top * ay0 + bot * ay1;
            }
        }
    }
}

pub fn resize_bilinear_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize, dx: &mut [T]) {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    for p in 0..planes {
        let g = &dy[p * oh * ow..][..oh * ow];
        let dst = &mut dx[p * h * w..][..h * w];
        for (y, a) in ty.iter().enumerate() {
            let (ay0, ay1) = (T::of(a.w0), T::of(a.w1));
            for (xx, b) in tx.iter().enumerate() {
                let (bx0, bx1) = (T::of(b.w0), T::of(b.w1));
                let gv = g[y * ow + xx];
                dst[a.i0 * w + b.i0] += gv * ay0 * bx0;
                dst[a.i0 * w + b.i1] += gv * ay0 * bx1;
                dst[a.i1 * w + b.i0] += gv * ay1 * bx0;
                dst[a.i1 * w + b.i1] += gv * ay1 * bx1;
            }
        }
    }
}

/// Max pooling; returns the flat in-plane argmax of every output cell.
pub fn max_pool<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    g: ConvGeometry,
    oh: usize,
    ow: usize,
    out: &mut [T],
) -> Vec<u32> {
    let mut arg = vec![0u32; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = 0usize;
                for ki in 0..k {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = iy as usize * w + ix as usize;
                        if src[i] > best {
                            best = src[i];
                            best_i = i;
                        }
                    }
                }
                out[(p * oh + oy) * ow + ox] = best;
                arg[(p * oh + oy) * ow + ox] = best_i as u32;
            }
        }
    }
    arg
}
