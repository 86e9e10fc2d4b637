//! Raw numeric kernels on slices. Every output element is reduced in a
//! fixed sequential order, so parallel execution stays bit-deterministic.

use rayon::prelude::*;

use super::Real;

const PAR_THRESHOLD: usize = 1 << 15;

/// `out[m×n] = a[m×k] · b`, where `b` is `k×n`, or `n×k` when `trans_b`.
pub(crate) fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], trans_b: bool) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    if m == 0 || n == 0 {
        return out;
    }
    // a row-major k×n right operand lets the inner loop vectorize
    let bt;
    let b = if trans_b && m > 1 {
        bt = transpose(n, k, b);
        &bt[..]
    } else {
        b
    };
    let trans_b = trans_b && m <= 1;
    let row = |(i, orow): (usize, &mut [T])| {
        let arow = &a[i * k..(i + 1) * k];
        if trans_b {
            for (j, o) in orow.iter_mut().enumerate() {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = T::zero();
                for (&x, &y) in arow.iter().zip(brow) {
                    acc += x * y;
                }
                *o = acc;
            }
        } else {
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// Transposes a row-major `rows×cols` matrix.
pub(crate) fn transpose<T: Real>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn permute<T: Real>(shape: &[usize], data: &[T], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

/// For each element of `out_shape`, the linear index into an operand of
/// shape `shape` under numpy-style broadcasting.
pub(crate) fn broadcast_index_map(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let n: usize = out_shape.iter().product();
    let offset = out_shape.len() - shape.len();
    let own = strides(shape);
    let mut eff = vec![0usize; out_shape.len()];
    for (i, &d) in shape.iter().enumerate() {
        if d != 1 {
            eff[offset + i] = own[i];
        }
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut pos = 0usize;
    for _ in 0..n {
        map.push(pos);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            pos += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            pos -= eff[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    map
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Geometry of a sliding-window operation over one `channels×h×w` image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn conv(channels: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        let eh = h + 2 * pad;
        let ew = w + 2 * pad;
        if stride == 0 || eh < kh || ew < kw {
            return None;
        }
        Some(Self {
            channels,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            out_h: (eh - kh) / stride + 1,
            out_w: (ew - kw) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    #[inline]
    fn source(&self, oy: usize, ki: usize) -> Option<usize> {
        let y = (oy * self.stride + ki) as isize - self.pad as isize;
        (y >= 0 && (y as usize) < self.h).then_some(y as usize)
    }

    #[inline]
    fn source_x(&self, ox: usize, kj: usize) -> Option<usize> {
        let x = (ox * self.stride + kj) as isize - self.pad as isize;
        (x >= 0 && (x as usize) < self.w).then_some(x as usize)
    }
}

/// Unfolds an image into a `(C·kh·kw) × (out_h·out_w)` column matrix.
pub(crate) fn im2col<T: Real>(img: &[T], g: &Window) -> Vec<T> {
    let cols = g.cols();
    let mut out = vec![T::zero(); g.rows() * cols];
    for c in 0..g.channels {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut out[r * cols..(r + 1) * cols];
                for oy in 0..g.out_h {
                    let Some(y) = g.source(oy, ki) else { continue };
                    for ox in 0..g.out_w {
                        if let Some(x) = g.source_x(ox, kj) {
                            dst[oy * g.out_w + ox] = plane[y * g.w + x];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: folds columns back, summing overlaps.
pub(crate) fn col2im<T: Real>(cols_data: &[T], g: &Window, img: &mut [T]) {
    let cols = g.cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let src = &cols_data[r * cols..(r + 1) * cols];
                for oy in 0..g.out_h {
                    let Some(y) = g.source(oy, ki) else { continue };
                    for ox in 0..g.out_w {
                        if let Some(x) = g.source_x(ox, kj) {
                            plane[y * g.w + x] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Source taps for half-pixel bilinear resampling along one axis:
/// `(lower index, upper index, upper weight)` per output coordinate.
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = if lo + 1 < input { lo + 1 } else { lo };
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bin boundaries `[start, end)` for adaptive pooling along one axis.
pub(crate) fn adaptive_bins(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|i| {
            let start = (i * input) / output;
            let end = ((i + 1) * input).div_ceil(output);
            (start, end)
        })
        .collect()
}

/// Reflection of a padded coordinate back into `[0, n)`; edge not repeated.
#[inline]
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}
