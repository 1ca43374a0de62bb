//! Stride-1 3×3×3 correlation kernels over a zero-padded flat grid.
//!
//! With one voxel of padding on every face, each kernel tap is a constant
//! shift of the flat padded index, so the convolution, its input adjoint and
//! its weight gradient reduce to shifted multiply-accumulates over rows.
//! `f32` gets an AVX2/FMA path; every path accumulates each output in the
//! same order with fused multiply-adds, so results are identical bit for bit.

use std::any::TypeId;
use std::ops::Range;

use crate::tensor::Real;

/// Padded-grid geometry: every index in `reach..len - reach` has all 27
/// neighbours `q + offs[t]` inside the grid.
pub(crate) struct Grid {
    pub len: usize,
    pub reach: usize,
    pub offs: [isize; 27],
}

impl Grid {
    fn span(&self) -> Range<usize> {
        self.reach..self.len - self.reach
    }
}

fn as_f32<T: 'static>(x: &[T]) -> Option<&[f32]> {
    // SAFETY: the type ids match, so `T` is `f32`.
    (TypeId::of::<T>() == TypeId::of::<f32>()).then(|| unsafe { std::slice::from_raw_parts(x.as_ptr().cast(), x.len()) })
}

fn as_f32_mut<T: 'static>(x: &mut [T]) -> Option<&mut [f32]> {
    // SAFETY: the type ids match, so `T` is `f32`.
    (TypeId::of::<T>() == TypeId::of::<f32>())
        .then(|| unsafe { std::slice::from_raw_parts_mut(x.as_mut_ptr().cast(), x.len()) })
}

#[cfg(target_arch = "x86_64")]
fn simd_available() -> bool {
    std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
}

/// `dst[r][q] = Σ_s Σ_t w[r][s][t] · src[s][q + off_t]` over the grid span,
/// with `w` laid out `(rows, src_channels, 27)`. Other entries of `dst` are
/// left untouched.
pub(crate) fn correlate<T: Real>(src: &[T], src_channels: usize, w: &[T], rows: usize, grid: &Grid, dst: &mut [T]) {
    assert!(src.len() >= src_channels * grid.len, "correlate: source too short");
    assert!(w.len() >= rows * src_channels * 27, "correlate: weights too short");
    assert!(dst.len() >= rows * grid.len, "correlate: output too short");
    let mut span = grid.span();
    #[cfg(target_arch = "x86_64")]
    {
        if simd_available() {
            if let (Some(s), Some(wf)) = (as_f32(src), as_f32(w)) {
                let d = as_f32_mut(dst).expect("same element type");
                // SAFETY: features detected; bounds asserted above.
                span.start = unsafe { avx::correlate_f32(s, src_channels, wf, rows, grid, d) };
            }
            // SAFETY: features detected.
            unsafe { correlate_generic_fma(src, src_channels, w, 0..rows, span, grid, dst) };
            return;
        }
    }
    correlate_generic(src, src_channels, w, 0..rows, span, grid, dst);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn correlate_generic_fma<T: Real>(
    src: &[T],
    src_channels: usize,
    w: &[T],
    rows: Range<usize>,
    span: Range<usize>,
    grid: &Grid,
    dst: &mut [T],
) {
    correlate_generic(src, src_channels, w, rows, span, grid, dst);
}

#[inline(always)]
fn correlate_generic<T: Real>(
    src: &[T],
    src_channels: usize,
    w: &[T],
    rows: Range<usize>,
    span: Range<usize>,
    grid: &Grid,
    dst: &mut [T],
) {
    if span.is_empty() {
        return;
    }
    let len = grid.len;
    for r in rows {
        let out = &mut dst[r * len + span.start..r * len + span.end];
        out.fill(T::zero());
        for s in 0..src_channels {
            let ws = &w[(r * src_channels + s) * 27..][..27];
            let base = s * len + span.start;
            // Output blocks stay in registers across all 27 taps. The
            // per-element order (channels, then taps) matches the AVX path.
            let i = accumulate_blocks::<T, 32>(src, ws, &grid.offs, base, 0, out);
            let i = accumulate_blocks::<T, 8>(src, ws, &grid.offs, base, i, out);
            accumulate_blocks::<T, 1>(src, ws, &grid.offs, base, i, out);
        }
    }
}

/// Accumulates whole `B`-wide blocks of `out[from..]`, returning where the
/// blocks ended.
#[inline(always)]
fn accumulate_blocks<T: Real, const B: usize>(
    src: &[T],
    ws: &[T],
    offs: &[isize; 27],
    base: usize,
    from: usize,
    out: &mut [T],
) -> usize {
    let mut i = from;
    for block in out[from..].chunks_exact_mut(B) {
        let mut acc: [T; B] = block.try_into().expect("block");
        for (&wv, &off) in ws.iter().zip(offs) {
            let start = (base as isize + off) as usize + i;
            let x: &[T; B] = src[start..start + B].try_into().expect("block");
            for k in 0..B {
                acc[k] = wv.mul_add(x[k], acc[k]);
            }
        }
        block.copy_from_slice(&acc);
        i += B;
    }
    i
}

/// Lanes of each partial sum in [`weight_grad`].
const DOT_LANES: usize = 8;

/// `gw[r][s][t] += Σ_q gy[r][q] · x[s][q + off_t]` over the grid span.
///
/// Each sum keeps 8 interleaved partial sums over whole lane blocks, folds
/// them left to right and then adds the leftover indices in order.
pub(crate) fn weight_grad<T: Real>(gy: &[T], rows: usize, x: &[T], src_channels: usize, grid: &Grid, gw: &mut [T]) {
    assert!(gy.len() >= rows * grid.len, "weight_grad: gradient too short");
    assert!(x.len() >= src_channels * grid.len, "weight_grad: input too short");
    assert!(gw.len() >= rows * src_channels * 27, "weight_grad: output too short");
    #[cfg(target_arch = "x86_64")]
    {
        if simd_available() {
            if let (Some(g), Some(xf)) = (as_f32(gy), as_f32(x)) {
                let out = as_f32_mut(gw).expect("same element type");
                // SAFETY: features detected; bounds asserted above.
                unsafe { avx::weight_grad_f32(g, rows, xf, src_channels, grid, out) };
                return;
            }
            // SAFETY: features detected.
            unsafe { weight_grad_generic_fma(gy, rows, x, src_channels, grid, gw) };
            return;
        }
    }
    weight_grad_generic(gy, rows, x, src_channels, grid, gw);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn weight_grad_generic_fma<T: Real>(gy: &[T], rows: usize, x: &[T], src_channels: usize, grid: &Grid, gw: &mut [T]) {
    weight_grad_generic(gy, rows, x, src_channels, grid, gw);
}

#[inline(always)]
fn weight_grad_generic<T: Real>(gy: &[T], rows: usize, x: &[T], src_channels: usize, grid: &Grid, gw: &mut [T]) {
    let len = grid.len;
    let span = grid.span();
    let n = span.len() / DOT_LANES * DOT_LANES;
    for r in 0..rows {
        let g = &gy[r * len + span.start..r * len + span.end];
        for s in 0..src_channels {
            for (t, &off) in grid.offs.iter().enumerate() {
                let start = ((s * len + span.start) as isize + off) as usize;
                let xs = &x[start..start + span.len()];
                let mut acc = [T::zero(); DOT_LANES];
                for (gb, xb) in g[..n].chunks_exact(DOT_LANES).zip(xs[..n].chunks_exact(DOT_LANES)) {
                    for l in 0..DOT_LANES {
                        acc[l] = gb[l].mul_add(xb[l], acc[l]);
                    }
                }
                let mut sum = acc.iter().fold(T::zero(), |a, &v| a + v);
                for (&gv, &xv) in g[n..].iter().zip(&xs[n..]) {
                    sum = gv.mul_add(xv, sum);
                }
                let slot = &mut gw[(r * src_channels + s) * 27 + t];
                *slot = *slot + sum;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx {
    use std::arch::x86_64::*;

    use super::{Grid, DOT_LANES};

    /// Output columns per register block (three 8-lane vectors).
    const COLS: usize = 24;

    /// Vector part of `correlate` for `f32`; returns the first column it
    /// did not compute.
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn correlate_f32(src: &[f32], sc: usize, w: &[f32], rows: usize, grid: &Grid, dst: &mut [f32]) -> usize {
        let span = grid.span();
        let blocks = span.len() / COLS;
        let end = span.start + blocks * COLS;
        let mut r = 0;
        while r + 4 <= rows {
            correlate_rows::<4>(src, sc, w, r, grid, span.start, end, dst);
            r += 4;
        }
        while r < rows {
            correlate_rows::<1>(src, sc, w, r, grid, span.start, end, dst);
            r += 1;
        }
        end
    }

    #[inline]
    #[target_feature(enable = "avx2,fma")]
    #[allow(clippy::too_many_arguments)]
    unsafe fn correlate_rows<const R: usize>(
        src: &[f32],
        sc: usize,
        w: &[f32],
        r0: usize,
        grid: &Grid,
        start: usize,
        end: usize,
        dst: &mut [f32],
    ) {
        let len = grid.len;
        // (source channel, tap, row) so one block's weights are contiguous
        let mut wblk = vec![0.0f32; sc * 27 * R];
        for (i, v) in wblk.iter_mut().enumerate() {
            *v = w[(r0 + i % R) * sc * 27 + i / R];
        }
        let sp = src.as_ptr();
        let dp = dst.as_mut_ptr();
        let mut q = start;
        while q < end {
            let mut acc = [[_mm256_setzero_ps(); 3]; R];
            for s in 0..sc {
                let row = (s * len + q) as isize;
                for (t, &off) in grid.offs.iter().enumerate() {
                    // SAFETY: q ± reach and q + COLS - 1 + reach stay inside
                    // channel s of the padded source.
                    let p = sp.offset(row + off);
                    let x0 = _mm256_loadu_ps(p);
                    let x1 = _mm256_loadu_ps(p.add(8));
                    let x2 = _mm256_loadu_ps(p.add(16));
                    let wt = wblk.as_ptr().add((s * 27 + t) * R);
                    for (j, a) in acc.iter_mut().enumerate() {
                        let wv = _mm256_broadcast_ss(&*wt.add(j));
                        a[0] = _mm256_fmadd_ps(wv, x0, a[0]);
                        a[1] = _mm256_fmadd_ps(wv, x1, a[1]);
                        a[2] = _mm256_fmadd_ps(wv, x2, a[2]);
                    }
                }
            }
            for (j, a) in acc.iter().enumerate() {
                let o = dp.add((r0 + j) * len + q);
                _mm256_storeu_ps(o, a[0]);
                _mm256_storeu_ps(o.add(8), a[1]);
                _mm256_storeu_ps(o.add(16), a[2]);
            }
            q += COLS;
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn weight_grad_f32(gy: &[f32], rows: usize, x: &[f32], sc: usize, grid: &Grid, gw: &mut [f32]) {
        let mut r = 0;
        while r + 4 <= rows {
            weight_grad_rows::<4>(gy, x, sc, r, grid, gw);
            r += 4;
        }
        while r < rows {
            weight_grad_rows::<1>(gy, x, sc, r, grid, gw);
            r += 1;
        }
    }

    /// Rows `r0..r0 + R` against the three x-adjacent taps of one
    /// (channel, z, y) tap group, so each gradient vector feeds three sums.
    #[inline]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn weight_grad_rows<const R: usize>(gy: &[f32], x: &[f32], sc: usize, r0: usize, grid: &Grid, gw: &mut [f32]) {
        let len = grid.len;
        let span = grid.span();
        let n = span.len() / DOT_LANES * DOT_LANES;
        let gp = gy.as_ptr();
        let xp = x.as_ptr();
        for s in 0..sc {
            for group in 0..9 {
                let o0 = grid.offs[3 * group];
                let xrow = (s * len + span.start) as isize + o0;
                let mut acc = [[_mm256_setzero_ps(); 3]; R];
                let mut i = 0;
                while i < n {
                    // SAFETY: every index lies in the span shifted by at
                    // most `reach`, inside channel s / row r0 + j.
                    let p = xp.offset(xrow + i as isize);
                    let x0 = _mm256_loadu_ps(p);
                    let x1 = _mm256_loadu_ps(p.add(1));
                    let x2 = _mm256_loadu_ps(p.add(2));
                    for (j, a) in acc.iter_mut().enumerate() {
                        let g = _mm256_loadu_ps(gp.add((r0 + j) * len + span.start + i));
                        a[0] = _mm256_fmadd_ps(g, x0, a[0]);
                        a[1] = _mm256_fmadd_ps(g, x1, a[1]);
                        a[2] = _mm256_fmadd_ps(g, x2, a[2]);
                    }
                    i += DOT_LANES;
                }
                for (j, a) in acc.iter().enumerate() {
                    let g = &gy[(r0 + j) * len + span.start..(r0 + j) * len + span.end];
                    for (k, &v) in a.iter().enumerate() {
                        let mut lanes = [0.0f32; DOT_LANES];
                        _mm256_storeu_ps(lanes.as_mut_ptr(), v);
                        let mut sum = lanes.iter().fold(0.0f32, |m, &l| m + l);
                        let xs = (xrow + k as isize) as usize;
                        for (&gv, &xv) in g[n..].iter().zip(&x[xs + n..xs + span.len()]) {
                            sum = gv.mul_add(xv, sum);
                        }
                        let slot = &mut gw[((r0 + j) * sc + s) * 27 + 3 * group + k];
                        *slot += sum;
                    }
                }
            }
        }
    }
}
