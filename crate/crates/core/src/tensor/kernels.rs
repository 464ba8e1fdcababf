//! Raw slice kernels behind the tape operations.
//!
//! Matrix products split work by output row, so results are identical
//! whether or not the rows are computed on separate threads.

use crate::exec::{self, Execution};

/// Products smaller than this many multiply-adds always run inline.
const PARALLEL_MIN_WORK: usize = 1 << 15;

fn row_mode(m: usize, k: usize, n: usize) -> Execution {
    if m > 1 && m * k * n >= PARALLEL_MIN_WORK {
        exec::kernel_execution()
    } else {
        Execution::Sequential
    }
}

/// `out (+)= a · b` with `a: m×k`, `b: k×n`.
pub(crate) fn matmul_nn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 {
        return;
    }
    exec::for_each_chunk_mut(out, n, row_mode(m, k, n), |i, row| {
        if !accumulate {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
}

/// `out (+)= a · bᵀ` with `a: m×k`, `b: n×k`.
pub(crate) fn matmul_nt(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 {
        return;
    }
    exec::for_each_chunk_mut(out, n, row_mode(m, k, n), |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f32 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            if accumulate {
                *o += dot;
            } else {
                *o = dot;
            }
        }
    });
}

/// `out (+)= aᵀ · b` with `a: k×m`, `b: k×n`.
pub(crate) fn matmul_tn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 {
        return;
    }
    exec::for_each_chunk_mut(out, n, row_mode(m, k, n), |i, row| {
        if !accumulate {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
        for p in 0..k {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
}

/// Geometry of a 2-D sliding window over a `channels × height × width` plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kw) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Input coordinate touched by output position `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfolds one image into a `(C·kh·kw) × (Ho·Wo)` column matrix.
pub(crate) fn im2col(input: &[f32], win: &Window) -> Vec<f32> {
    let (oh, ow) = (win.out_height(), win.out_width());
    let cols_n = oh * ow;
    let mut cols = vec![0.0f32; win.col_rows() * cols_n];
    for c in 0..win.channels {
        let plane = &input[c * win.height * win.width..(c + 1) * win.height * win.width];
        for ki in 0..win.kh {
            for kj in 0..win.kw {
                let row = (c * win.kh + ki) * win.kw + kj;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for oy in 0..oh {
                    let Some(iy) = win.source(oy, ki, win.height) else {
                        continue;
                    };
                    for ox in 0..ow {
                        if let Some(ix) = win.source(ox, kj, win.width) {
                            dst[oy * ow + ox] = plane[iy * win.width + ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto the image, summing overlaps.
pub(crate) fn col2im(cols: &[f32], win: &Window, out: &mut [f32]) {
    let (oh, ow) = (win.out_height(), win.out_width());
    let cols_n = oh * ow;
    for c in 0..win.channels {
        let plane = &mut out[c * win.height * win.width..(c + 1) * win.height * win.width];
        for ki in 0..win.kh {
            for kj in 0..win.kw {
                let row = (c * win.kh + ki) * win.kw + kj;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for oy in 0..oh {
                    let Some(iy) = win.source(oy, ki, win.height) else {
                        continue;
                    };
                    for ox in 0..ow {
                        if let Some(ix) = win.source(ox, kj, win.width) {
                            plane[iy * win.width + ix] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Reorders `data` of `shape` so that output axis `i` is input axis `axes[i]`.
pub(crate) fn permute(data: &[f32], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut index = vec![0usize; rank];
    for _ in 0..data.len() {
        let offset: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[offset]);
        for d in (0..rank).rev() {
            index[d] += 1;
            if index[d] < out_shape[d] {
                break;
            }
            index[d] = 0;
        }
    }
    (out_shape, out)
}
