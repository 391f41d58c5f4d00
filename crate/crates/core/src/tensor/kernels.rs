//! Slice-level compute kernels behind the tape primitives.
//!
//! Convolutions lower to im2col + GEMM. Rows of every GEMM output are split into
//! fixed-size blocks that are independent of the thread count, so the parallel
//! and sequential paths agree bit for bit.

use super::Scalar;
use crate::par;

/// Output rows per GEMM work item.
const GEMM_ROW_BLOCK: usize = 16;
/// Below this many multiply-adds a GEMM runs as a single block.
const GEMM_SPLIT_MIN: usize = 1 << 16;

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> Mat<'a, T> {
    pub fn row_major(data: &'a [T], cols: usize) -> Self {
        Self {
            data,
            rs: cols,
            cs: 1,
        }
    }

    /// Transpose of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        Self {
            data,
            rs: 1,
            cs: cols,
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = (rows - 1) * self.rs + (cols - 1) * self.cs;
        assert!(last < self.data.len(), "matrix view out of bounds");
    }
}

/// `c (m×n, row-major) = a (m×k) · b (k×n) + beta · c` with `beta` ∈ {0, 1}.
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: Mat<'_, T>,
    b: Mat<'_, T>,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(c.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    let beta = if accumulate { T::one() } else { T::zero() };
    let rows_per_block = if m * n * k < GEMM_SPLIT_MIN {
        m
    } else {
        GEMM_ROW_BLOCK
    };
    par::for_each_chunk_mut(c, rows_per_block * n, |bi, block| {
        let i0 = bi * rows_per_block;
        let rows = block.len() / n;
        let a_off = i0 * a.rs;
        // SAFETY: `a.check`/`b.check` bound every index of the full product;
        // this block touches rows i0..i0+rows of `a` and its own slice of `c`.
        unsafe {
            T::gemm_raw(
                rows,
                k,
                n,
                T::one(),
                a.data.as_ptr().add(a_off),
                a.rs as isize,
                a.cs as isize,
                b.data.as_ptr(),
                b.rs as isize,
                b.cs as isize,
                beta,
                block.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// Unfolds `[C, H, W]` into `[C·k·k, H·W]` for a stride-1, zero-padded `k×k` kernel.
pub(crate) fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut cols = vec![T::zero(); c * k * k * hw];
    par::for_each_chunk_mut(&mut cols, hw, |row, out| {
        let ch = row / (k * k);
        let ki = (row / k) % k;
        let kj = row % k;
        let plane = &x[ch * hw..(ch + 1) * hw];
        for y in 0..h {
            let sy = y as isize + ki as isize - pad;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            let src = &plane[sy as usize * w..(sy as usize + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for (xo, d) in dst.iter_mut().enumerate() {
                let sx = xo as isize + kj as isize - pad;
                if sx >= 0 && sx < w as isize {
                    *d = src[sx as usize];
                }
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`]: folds `[C·k·k, H·W]` back into `[C, H, W]` by summation.
pub(crate) fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut x = vec![T::zero(); c * hw];
    par::for_each_chunk_mut(&mut x, hw, |ch, plane| {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ki as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for xo in 0..w {
                        let sx = xo as isize + kj as isize - pad;
                        if sx >= 0 && sx < w as isize {
                            dst_row[sx as usize] = dst_row[sx as usize] + src[y * w + xo];
                        }
                    }
                }
            }
        }
    });
    x
}

pub(crate) struct ConvDims {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Returns the output `[Cout, H, W]` and, for `k > 1`, the unfolded input.
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
) -> (Vec<T>, Option<Vec<T>>) {
    let cols = (d.k > 1).then(|| im2col(x, d.cin, d.h, d.w, d.k));
    let lowered = cols.as_deref().unwrap_or(x);
    let hw = d.hw();
    let mut out = vec![T::zero(); d.cout * hw];
    gemm(
        d.cout,
        d.patch(),
        hw,
        Mat::row_major(weight, d.patch()),
        Mat::row_major(lowered, hw),
        &mut out,
        false,
    );
    if let Some(b) = bias {
        for (plane, &bv) in out.chunks_mut(hw).zip(b) {
            plane.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
    (out, cols)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    gout: &[T],
    x: &[T],
    cols: Option<&[T]>,
    weight: &[T],
    d: &ConvDims,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let hw = d.hw();
    let patch = d.patch();
    let lowered = cols.unwrap_or(x);
    let dw = need_dw.then(|| {
        let mut dw = vec![T::zero(); d.cout * patch];
        gemm(
            d.cout,
            hw,
            patch,
            Mat::row_major(gout, hw),
            Mat::transposed(lowered, hw),
            &mut dw,
            false,
        );
        dw
    });
    let dx = need_dx.then(|| {
        let mut dcols = vec![T::zero(); patch * hw];
        gemm(
            patch,
            d.cout,
            hw,
            Mat::transposed(weight, patch),
            Mat::row_major(gout, hw),
            &mut dcols,
            false,
        );
        if d.k == 1 {
            dcols
        } else {
            col2im(&dcols, d.cin, d.h, d.w, d.k)
        }
    });
    let db = need_db.then(|| {
        gout.chunks(hw)
            .map(|plane| plane.iter().copied().sum())
            .collect()
    });
    ConvGrads { dx, dw, db }
}

/// 2×2 max pooling with stride 2. Returns the pooled planes and, per output,
/// the flat input index of the selected element (first maximum wins).
pub(crate) fn max_pool2<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + 2 * y * w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xo + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour ×2 upsampling of `[C, H, W]`.
pub(crate) fn upsample2<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * oh * ow];
    par::for_each_chunk_mut(&mut out, oh * ow, |ch, plane| {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for xo in 0..ow {
                plane[y * ow + xo] = src[(y / 2) * w + xo / 2];
            }
        }
    });
    out
}

/// Adjoint of [`upsample2`]: sums each 2×2 block of the gradient.
pub(crate) fn upsample2_backward<T: Scalar>(g: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let ow = 2 * w;
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let gp = &g[ch * 4 * h * w..(ch + 1) * 4 * h * w];
        for y in 0..h {
            for xo in 0..w {
                let top = 2 * y * ow + 2 * xo;
                let bot = top + ow;
                out[ch * h * w + y * w + xo] = gp[top] + gp[top + 1] + gp[bot] + gp[bot + 1];
            }
        }
    }
    out
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
