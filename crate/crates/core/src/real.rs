//! Scalar abstraction over `f32` (training, inference) and `f64` (gradient
//! checking), plus the handful of dense kernels every op is built from.

use core::fmt::Debug;
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Read-only strided matrix view into a flat buffer.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, R> {
    pub data: &'a [R],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

/// Mutable strided matrix view into a flat buffer.
#[derive(Debug)]
pub struct MatMut<'a, R> {
    pub data: &'a mut [R],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, R> MatRef<'a, R> {
    /// Dense row-major `rows x cols` matrix starting at `offset`.
    pub fn row_major(data: &'a [R], offset: usize, rows: usize, cols: usize) -> Self {
        Self { data, offset, rows, cols, row_stride: cols, col_stride: 1 }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

impl<'a, R> MatMut<'a, R> {
    pub fn row_major(data: &'a mut [R], offset: usize, rows: usize, cols: usize) -> Self {
        Self { data, offset, rows, cols, row_stride: cols, col_stride: 1 }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// Floating-point element type of every tensor.
pub trait Real:
    Float
    + FromPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    /// Little-endian width in bytes.
    const BYTES: usize;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Raw GEMM call; `gemm` below is the checked entry point.
    ///
    /// # Safety
    /// All pointers with their strides must stay in bounds of their buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    /// `out[i] += w * inp[i]`
    fn axpy(out: &mut [Self], inp: &[Self], w: Self) {
        for (o, &i) in out.iter_mut().zip(inp) {
            *o += w * i;
        }
    }

    fn dot(a: &[Self], b: &[Self]) -> Self {
        let mut acc = Self::zero();
        for (&x, &y) in a.iter().zip(b) {
            acc += x * y;
        }
        acc
    }

    /// `out[i] += sum_c w[c] * src[i + c]`; `src` holds `out.len() + w.len() - 1` values.
    fn corr_row(out: &mut [Self], src: &[Self], w: &[Self]) {
        let n = out.len();
        for (c, &wc) in w.iter().enumerate() {
            Self::axpy(out, &src[c..c + n], wc);
        }
    }

    /// `acc[c] += sum_i g[i] * src[i + c]`; `src` holds `g.len() + acc.len() - 1` values.
    fn corr_dot(g: &[Self], src: &[Self], acc: &mut [Self]) {
        let n = g.len();
        for (c, a) in acc.iter_mut().enumerate() {
            *a += Self::dot(g, &src[c..c + n]);
        }
    }
}

/// `c = alpha * a * b + beta * c` with bounds checked views.
pub fn gemm<R: Real>(alpha: R, a: MatRef<'_, R>, b: MatRef<'_, R>, beta: R, c: MatMut<'_, R>) {
    assert_eq!(a.cols, b.rows, "gemm inner extent");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    assert!(a.last_index() < a.data.len() || a.cols == 0);
    assert!(b.last_index() < b.data.len() || b.rows == 0);
    assert!(c.last_index() < c.data.len());
    // SAFETY: every addressed element lies between `offset` and
    // `last_index`, both checked against the buffer lengths above.
    unsafe {
        R::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset.min(a.data.len())),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset.min(b.data.len())),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.row_stride as isize,
            c.col_stride as isize,
        );
    }
}

impl Real for f64 {
    const BYTES: usize = 8;

    fn of(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f32 {
    const BYTES: usize = 4;

    fn of(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn axpy(out: &mut [Self], inp: &[Self], w: Self) {
        #[cfg(target_arch = "x86_64")]
        {
            if simd::has_fma() {
                // SAFETY: the CPU supports the enabled target features.
                unsafe { simd::axpy_fma(out, inp, w) };
                return;
            }
        }
        for (o, &i) in out.iter_mut().zip(inp) {
            *o += w * i;
        }
    }

    fn dot(a: &[Self], b: &[Self]) -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            if simd::has_fma() {
                // SAFETY: as above.
                return unsafe { simd::dot_fma(a, b) };
            }
        }
        let mut acc = 0.0f32;
        for (&x, &y) in a.iter().zip(b) {
            acc += x * y;
        }
        acc
    }

    fn corr_row(out: &mut [Self], src: &[Self], w: &[Self]) {
        let n = out.len();
        assert!(src.len() + 1 >= n + w.len());
        #[cfg(target_arch = "x86_64")]
        {
            if simd::has_fma() {
                // SAFETY: feature checked; `src` covers every shifted window.
                match w.len() {
                    3 => return unsafe { simd::corr_row::<3>(out, src, w) },
                    7 => return unsafe { simd::corr_row::<7>(out, src, w) },
                    _ => {}
                }
            }
        }
        for (c, &wc) in w.iter().enumerate() {
            Self::axpy(out, &src[c..c + n], wc);
        }
    }

    fn corr_dot(g: &[Self], src: &[Self], acc: &mut [Self]) {
        let n = g.len();
        assert!(src.len() + 1 >= n + acc.len());
        #[cfg(target_arch = "x86_64")]
        {
            if simd::has_fma() {
                // SAFETY: as above.
                match acc.len() {
                    3 => return unsafe { simd::corr_dot::<3>(g, src, acc) },
                    7 => return unsafe { simd::corr_dot::<7>(g, src, acc) },
                    _ => {}
                }
            }
        }
        for (c, a) in acc.iter_mut().enumerate() {
            *a += Self::dot(g, &src[c..c + n]);
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use std::arch::x86_64::*;
    use std::sync::OnceLock;

    pub(super) fn has_fma() -> bool {
        static FMA: OnceLock<bool> = OnceLock::new();
        *FMA.get_or_init(|| is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma"))
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn axpy_fma(out: &mut [f32], inp: &[f32], w: f32) {
        for (o, &i) in out.iter_mut().zip(inp) {
            *o = w.mul_add(i, *o);
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn dot_fma(a: &[f32], b: &[f32]) -> f32 {
        let n = a.len().min(b.len());
        let (a, b) = (&a[..n], &b[..n]);
        let mut acc = [0.0f32; 8];
        let mut ca = a.chunks_exact(8);
        let mut cb = b.chunks_exact(8);
        for (x, y) in (&mut ca).zip(&mut cb) {
            for l in 0..8 {
                acc[l] = x[l].mul_add(y[l], acc[l]);
            }
        }
        let mut tail = 0.0f32;
        for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
            tail = x.mul_add(y, tail);
        }
        ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
    }

    /// Caller guarantees `src.len() >= out.len() + K - 1` and `w.len() == K`.
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn corr_row<const K: usize>(out: &mut [f32], src: &[f32], w: &[f32]) {
        let n = out.len();
        let (o, s) = (out.as_mut_ptr(), src.as_ptr());
        let wv: [__m256; K] = std::array::from_fn(|c| _mm256_set1_ps(w[c]));
        let mut i = 0;
        while i + 32 <= n {
            let mut a = [
                _mm256_loadu_ps(o.add(i)),
                _mm256_loadu_ps(o.add(i + 8)),
                _mm256_loadu_ps(o.add(i + 16)),
                _mm256_loadu_ps(o.add(i + 24)),
            ];
            for c in 0..K {
                for (l, acc) in a.iter_mut().enumerate() {
                    *acc = _mm256_fmadd_ps(wv[c], _mm256_loadu_ps(s.add(i + 8 * l + c)), *acc);
                }
            }
            for (l, acc) in a.iter().enumerate() {
                _mm256_storeu_ps(o.add(i + 8 * l), *acc);
            }
            i += 32;
        }
        while i + 8 <= n {
            let mut acc = _mm256_loadu_ps(o.add(i));
            for c in 0..K {
                acc = _mm256_fmadd_ps(wv[c], _mm256_loadu_ps(s.add(i + c)), acc);
            }
            _mm256_storeu_ps(o.add(i), acc);
            i += 8;
        }
        for j in i..n {
            let mut acc = out[j];
            for c in 0..K {
                acc = w[c].mul_add(src[j + c], acc);
            }
            out[j] = acc;
        }
    }

    /// Caller guarantees `src.len() >= g.len() + K - 1` and `acc.len() == K`.
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn corr_dot<const K: usize>(g: &[f32], src: &[f32], acc: &mut [f32]) {
        let n = g.len();
        let (gp, s) = (g.as_ptr(), src.as_ptr());
        let mut a0 = [_mm256_setzero_ps(); K];
        let mut a1 = [_mm256_setzero_ps(); K];
        let mut i = 0;
        while i + 16 <= n {
            let g0 = _mm256_loadu_ps(gp.add(i));
            let g1 = _mm256_loadu_ps(gp.add(i + 8));
            for c in 0..K {
                a0[c] = _mm256_fmadd_ps(g0, _mm256_loadu_ps(s.add(i + c)), a0[c]);
                a1[c] = _mm256_fmadd_ps(g1, _mm256_loadu_ps(s.add(i + 8 + c)), a1[c]);
            }
            i += 16;
        }
        for c in 0..K {
            let mut lanes = [0.0f32; 8];
            _mm256_storeu_ps(lanes.as_mut_ptr(), _mm256_add_ps(a0[c], a1[c]));
            let mut t = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
            for j in i..n {
                t = g[j].mul_add(src[j + c], t);
            }
            acc[c] += t;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_hand_case() {
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [1.0f64, 1.0];
        let mut c = [0.0f64; 2];
        gemm(
            1.0,
            MatRef::row_major(&a, 0, 2, 2),
            MatRef::row_major(&b, 0, 2, 1),
            0.0,
            MatMut::row_major(&mut c, 0, 2, 1),
        );
        assert_eq!(c, [3.0, 7.0]);
    }

    #[test]
    fn f32_kernels_match_naive() {
        let a: Vec<f32> = (0..37).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..37).map(|i| (i as f32 * 0.11).cos()).collect();
        let naive: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((f32::dot(&a, &b) - naive).abs() < 1e-5);
        let mut out = b.clone();
        f32::axpy(&mut out, &a, 2.0);
        for i in 0..37 {
            assert!((out[i] - (b[i] + 2.0 * a[i])).abs() < 1e-6);
        }
    }
}
