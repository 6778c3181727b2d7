//! Separable trilinear sampling of `[C, H, W, D]` volumes.

use crate::real::Real;

/// How output voxel `j` of `n_out` maps to a continuous input voxel index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AxisMap {
    /// `u = j * n_in / n_out`; integer-factor decimation of an upsampled
    /// field picks original samples back exactly.
    Origin,
    /// Voxel centres aligned: `u = (j + 0.5) * n_in / n_out - 0.5`.
    Centers,
    /// `u = scale * j + offset`; samples whose voxel lies outside
    /// `[-0.5, n_in - 0.5]` read zero.
    Affine { scale: f64, offset: f64 },
}

/// Two-tap linear interpolation weights along one axis.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_lo: Vec<f64>,
    pub w_hi: Vec<f64>,
}

impl AxisTaps {
    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }
}

pub fn axis_taps(n_in: usize, n_out: usize, map: AxisMap) -> AxisTaps {
    let mut taps = AxisTaps {
        lo: Vec::with_capacity(n_out),
        hi: Vec::with_capacity(n_out),
        w_lo: Vec::with_capacity(n_out),
        w_hi: Vec::with_capacity(n_out),
    };
    let ratio = n_in as f64 / n_out as f64;
    let last = (n_in - 1) as f64;
    for j in 0..n_out {
        let jf = j as f64;
        let (u, inside) = match map {
            AxisMap::Origin => (jf * ratio, true),
            AxisMap::Centers => ((jf + 0.5) * ratio - 0.5, true),
            AxisMap::Affine { scale, offset } => {
                let u = scale * jf + offset;
                (u, (-0.5..=last + 0.5).contains(&u))
            }
        };
        if !inside {
            taps.lo.push(0);
            taps.hi.push(0);
            taps.w_lo.push(0.0);
            taps.w_hi.push(0.0);
            continue;
        }
        let u = u.clamp(0.0, last);
        let lo = u.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        let frac = u - lo as f64;
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.w_lo.push(1.0 - frac);
        taps.w_hi.push(frac);
    }
    taps
}

fn corners<R: Real>(taps: &AxisTaps, j: usize) -> [(usize, R); 2] {
    [(taps.lo[j], R::of(taps.w_lo[j])), (taps.hi[j], R::of(taps.w_hi[j]))]
}

pub fn resample_forward<R: Real>(x: &[R], channels: usize, in_ext: [usize; 3], taps: &[AxisTaps; 3]) -> Vec<R> {
    let [h, w, d] = in_ext;
    let (oh, ow, od) = (taps[0].len(), taps[1].len(), taps[2].len());
    let mut out = vec![R::zero(); channels * oh * ow * od];
    for c in 0..channels {
        let src = &x[c * h * w * d..(c + 1) * h * w * d];
        let mut idx = c * oh * ow * od;
        for i in 0..oh {
            let ci = corners::<R>(&taps[0], i);
            for j in 0..ow {
                let cj = corners::<R>(&taps[1], j);
                for k in 0..od {
                    let ck = corners::<R>(&taps[2], k);
                    let mut acc = R::zero();
                    for &(a, wa) in &ci {
                        for &(b, wb) in &cj {
                            let wab = wa * wb;
                            let row = (a * w + b) * d;
                            for &(e, we) in &ck {
                                acc += wab * we * src[row + e];
                            }
                        }
                    }
                    out[idx] = acc;
                    idx += 1;
                }
            }
        }
    }
    out
}

pub fn resample_backward<R: Real>(g: &[R], channels: usize, in_ext: [usize; 3], taps: &[AxisTaps; 3]) -> Vec<R> {
    let [h, w, d] = in_ext;
    let (oh, ow, od) = (taps[0].len(), taps[1].len(), taps[2].len());
    let mut dx = vec![R::zero(); channels * h * w * d];
    for c in 0..channels {
        let dst = &mut dx[c * h * w * d..(c + 1) * h * w * d];
        let mut idx = c * oh * ow * od;
        for i in 0..oh {
            let ci = corners::<R>(&taps[0], i);
            for j in 0..ow {
                let cj = corners::<R>(&taps[1], j);
                for k in 0..od {
                    let ck = corners::<R>(&taps[2], k);
                    let gv = g[idx];
                    idx += 1;
                    for &(a, wa) in &ci {
                        for &(b, wb) in &cj {
                            let wab = wa * wb * gv;
                            let row = (a * w + b) * d;
                            for &(e, we) in &ck {
                                dst[row + e] += wab * we;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}
