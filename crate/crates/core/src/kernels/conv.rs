//! 3D cross-correlation on `[C, H, W, D]` feature maps.
//!
//! The input is zero-padded once; every kernel tap then becomes a constant
//! offset into the flattened padded buffer, so the stride-1 response is a sum
//! of shifted matrix products with no patch buffer. Output rows are computed
//! on the padded grid and the valid (optionally strided) positions are
//! gathered afterwards.

use crate::error::{Error, Result};
use crate::real::{gemm, MatMut, MatRef, Real};

/// Channel counts at or above which per-tap GEMMs beat fused row kernels.
const GEMM_MIN_CHANNELS: usize = 16;
const BLOCK: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: [usize; 3],
    pub padding: usize,
}

impl ConvSpec {
    /// Extent-preserving `k x k x k` convolution.
    pub fn same(kernel: usize) -> Self {
        Self { kernel, stride: [1; 3], padding: kernel / 2 }
    }

    pub fn pointwise() -> Self {
        Self::same(1)
    }
}

#[derive(Clone, Debug)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: [usize; 3],
    pub padding: usize,
    pub in_ext: [usize; 3],
    pub padded: [usize; 3],
    pub full: [usize; 3],
    pub out_ext: [usize; 3],
    pub plane: usize,
    pub nq: usize,
    offsets: Vec<usize>,
}

impl ConvGeometry {
    pub fn new(spec: ConvSpec, x_shape: &[usize], w_shape: &[usize]) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 5 {
            return Err(Error::shape("conv3d", x_shape, w_shape));
        }
        let k = spec.kernel;
        if k.is_multiple_of(2) || w_shape[2..] != [k, k, k] {
            return Err(Error::invalid("conv3d", format!("kernel must be odd and cubic, got {w_shape:?}")));
        }
        if w_shape[1] != x_shape[0] {
            return Err(Error::shape("conv3d", x_shape, w_shape));
        }
        if spec.stride.contains(&0) {
            return Err(Error::invalid("conv3d", "stride must be positive"));
        }
        let in_ext = [x_shape[1], x_shape[2], x_shape[3]];
        let mut padded = [0; 3];
        let mut full = [0; 3];
        let mut out_ext = [0; 3];
        for a in 0..3 {
            padded[a] = in_ext[a] + 2 * spec.padding;
            if padded[a] < k {
                return Err(Error::invalid(
                    "conv3d",
                    format!("non-positive output extent for input {x_shape:?} and kernel {k}"),
                ));
            }
            full[a] = padded[a] - k + 1;
            out_ext[a] = (padded[a] - k) / spec.stride[a] + 1;
        }
        let plane = padded.iter().product();
        let nq = ((full[0] - 1) * padded[1] + (full[1] - 1)) * padded[2] + full[2];
        let mut offsets = Vec::with_capacity(k * k * k);
        for a in 0..k {
            for b in 0..k {
                for c in 0..k {
                    offsets.push((a * padded[1] + b) * padded[2] + c);
                }
            }
        }
        Ok(Self {
            c_in: x_shape[0],
            c_out: w_shape[0],
            kernel: k,
            stride: spec.stride,
            padding: spec.padding,
            in_ext,
            padded,
            full,
            out_ext,
            plane,
            nq,
            offsets,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.c_out, self.out_ext[0], self.out_ext[1], self.out_ext[2]]
    }

    fn use_gemm(&self) -> bool {
        self.c_in.min(self.c_out) >= GEMM_MIN_CHANNELS
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    fn pad<R: Real>(&self, x: &[R]) -> Vec<R> {
        let [h, w, d] = self.in_ext;
        let [_, wp, dp] = self.padded;
        let p = self.padding;
        let mut out = vec![R::zero(); self.c_in * self.plane];
        for c in 0..self.c_in {
            for i in 0..h {
                for j in 0..w {
                    let src = ((c * h + i) * w + j) * d;
                    let dst = c * self.plane + ((i + p) * wp + j + p) * dp + p;
                    out[dst..dst + d].copy_from_slice(&x[src..src + d]);
                }
            }
        }
        out
    }

    fn unpad<R: Real>(&self, xp: &[R]) -> Vec<R> {
        let [h, w, d] = self.in_ext;
        let [_, wp, dp] = self.padded;
        let p = self.padding;
        let mut out = vec![R::zero(); self.c_in * h * w * d];
        for c in 0..self.c_in {
            for i in 0..h {
                for j in 0..w {
                    let dst = ((c * h + i) * w + j) * d;
                    let src = c * self.plane + ((i + p) * wp + j + p) * dp + p;
                    out[dst..dst + d].copy_from_slice(&xp[src..src + d]);
                }
            }
        }
        out
    }

    /// Flattened padded-grid position of each output voxel.
    fn out_positions(&self) -> Vec<usize> {
        let [_, wp, dp] = self.padded;
        let [s0, s1, s2] = self.stride;
        let [oh, ow, od] = self.out_ext;
        let mut pos = Vec::with_capacity(oh * ow * od);
        for i in 0..oh {
            for j in 0..ow {
                for k in 0..od {
                    pos.push((i * s0 * wp + j * s1) * dp + k * s2);
                }
            }
        }
        pos
    }
}

pub fn conv3d_forward<R: Real>(geo: &ConvGeometry, x: &[R], w: &[R]) -> Vec<R> {
    let xp = geo.pad(x);
    let nq = geo.nq;
    let k = geo.kernel;
    let k3 = geo.taps();
    let mut outq = vec![R::zero(); geo.c_out * nq];
    if geo.use_gemm() {
        for (t, &off) in geo.offsets.iter().enumerate() {
            let a = MatRef {
                data: w,
                offset: t,
                rows: geo.c_out,
                cols: geo.c_in,
                row_stride: geo.c_in * k3,
                col_stride: k3,
            };
            let b = MatRef { data: &xp, offset: off, rows: geo.c_in, cols: nq, row_stride: geo.plane, col_stride: 1 };
            gemm(R::one(), a, b, R::one(), MatMut::row_major(&mut outq, 0, geo.c_out, nq));
        }
    } else {
        let mut q0 = 0;
        while q0 < nq {
            let q1 = (q0 + BLOCK).min(nq);
            for co in 0..geo.c_out {
                let out = &mut outq[co * nq + q0..co * nq + q1];
                for ci in 0..geo.c_in {
                    let wr = &w[(co * geo.c_in + ci) * k3..(co * geo.c_in + ci + 1) * k3];
                    for (row, wk) in wr.chunks_exact(k).enumerate() {
                        let base = ci * geo.plane + geo.offsets[row * k] + q0;
                        R::corr_row(out, &xp[base..base + q1 - q0 + k - 1], wk);
                    }
                }
            }
            q0 = q1;
        }
    }
    let pos = geo.out_positions();
    let mut out = Vec::with_capacity(geo.c_out * pos.len());
    for co in 0..geo.c_out {
        let row = &outq[co * nq..(co + 1) * nq];
        out.extend(pos.iter().map(|&q| row[q]));
    }
    out
}

/// Returns `(dx, dw)`; `dx` is empty when `need_dx` is false.
pub fn conv3d_backward<R: Real>(
    geo: &ConvGeometry,
    x: &[R],
    w: &[R],
    grad_out: &[R],
    need_dx: bool,
) -> (Vec<R>, Vec<R>) {
    let nq = geo.nq;
    let k = geo.kernel;
    let k3 = geo.taps();
    let pos = geo.out_positions();
    let mut gq = vec![R::zero(); geo.c_out * nq];
    for co in 0..geo.c_out {
        let src = &grad_out[co * pos.len()..(co + 1) * pos.len()];
        let row = &mut gq[co * nq..(co + 1) * nq];
        for (&q, &g) in pos.iter().zip(src) {
            row[q] = g;
        }
    }
    let xp = geo.pad(x);

    let mut dw = vec![R::zero(); w.len()];
    if geo.use_gemm() {
        for (t, &off) in geo.offsets.iter().enumerate() {
            let a = MatRef::row_major(&gq, 0, geo.c_out, nq);
            let b = MatRef { data: &xp, offset: off, rows: nq, cols: geo.c_in, row_stride: 1, col_stride: geo.plane };
            let c = MatMut {
                data: &mut dw,
                offset: t,
                rows: geo.c_out,
                cols: geo.c_in,
                row_stride: geo.c_in * k3,
                col_stride: k3,
            };
            gemm(R::one(), a, b, R::one(), c);
        }
    } else {
        let mut q0 = 0;
        while q0 < nq {
            let q1 = (q0 + BLOCK).min(nq);
            for co in 0..geo.c_out {
                let g = &gq[co * nq + q0..co * nq + q1];
                for ci in 0..geo.c_in {
                    let dwr = &mut dw[(co * geo.c_in + ci) * k3..(co * geo.c_in + ci + 1) * k3];
                    for (row, acc) in dwr.chunks_exact_mut(k).enumerate() {
                        let base = ci * geo.plane + geo.offsets[row * k] + q0;
                        R::corr_dot(g, &xp[base..base + q1 - q0 + k - 1], acc);
                    }
                }
            }
            q0 = q1;
        }
    }

    if !need_dx {
        return (Vec::new(), dw);
    }
    let mut dxp = vec![R::zero(); geo.c_in * geo.plane];
    if geo.use_gemm() {
        for (t, &off) in geo.offsets.iter().enumerate() {
            let a = MatRef {
                data: w,
                offset: t,
                rows: geo.c_in,
                cols: geo.c_out,
                row_stride: k3,
                col_stride: geo.c_in * k3,
            };
            let b = MatRef::row_major(&gq, 0, geo.c_out, nq);
            let c = MatMut { data: &mut dxp, offset: off, rows: geo.c_in, cols: nq, row_stride: geo.plane, col_stride: 1 };
            gemm(R::one(), a, b, R::one(), c);
        }
    } else {
        // scatter as a correlation of the zero-extended gradient with flipped rows
        let flipped: Vec<R> = w.chunks_exact(k).flat_map(|r| r.iter().rev().copied()).collect();
        let mut gp = vec![R::zero(); BLOCK.min(nq) + 2 * (k - 1)];
        let mut q0 = 0;
        while q0 < nq {
            let q1 = (q0 + BLOCK).min(nq);
            let n = q1 - q0;
            for co in 0..geo.c_out {
                gp[k - 1..k - 1 + n].copy_from_slice(&gq[co * nq + q0..co * nq + q1]);
                gp[k - 1 + n..].iter_mut().for_each(|v| *v = R::zero());
                let src = &gp[..n + 2 * (k - 1)];
                for ci in 0..geo.c_in {
                    let wr = &flipped[(co * geo.c_in + ci) * k3..(co * geo.c_in + ci + 1) * k3];
                    for (row, wk) in wr.chunks_exact(k).enumerate() {
                        let base = ci * geo.plane + geo.offsets[row * k] + q0;
                        R::corr_row(&mut dxp[base..base + n + k - 1], src, wk);
                    }
                }
            }
            q0 = q1;
        }
    }
    (geo.unpad(&dxp), dw)
}
