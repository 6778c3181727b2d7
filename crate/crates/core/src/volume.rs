//! Intensity volumes and binary masks, stored z-fastest (`(i * W + j) * D + k`).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_len(extents: [usize; 3], len: usize) -> Result<()> {
    let n: usize = extents.iter().product();
    if n != len {
        return Err(Error::invalid("volume", format!("{len} values for extents {extents:?}")));
    }
    Ok(())
}

#[inline]
pub fn flat_index(extents: [usize; 3], i: usize, j: usize, k: usize) -> usize {
    (i * extents[1] + j) * extents[2] + k
}

/// Copies the box at `origin` (possibly outside) of size `shape`, filling
/// outside samples with `fill`.
fn crop_box<T: Copy>(data: &[T], extents: [usize; 3], origin: [isize; 3], shape: [usize; 3], fill: T) -> Vec<T> {
    let mut out = vec![fill; shape.iter().product()];
    let inside = |o: isize, n: usize| -> Option<usize> {
        if o >= 0 && (o as usize) < n {
            Some(o as usize)
        } else {
            None
        }
    };
    for a in 0..shape[0] {
        let Some(i) = inside(origin[0] + a as isize, extents[0]) else { continue };
        for b in 0..shape[1] {
            let Some(j) = inside(origin[1] + b as isize, extents[1]) else { continue };
            for c in 0..shape[2] {
                let Some(k) = inside(origin[2] + c as isize, extents[2]) else { continue };
                out[(a * shape[1] + b) * shape[2] + c] = data[flat_index(extents, i, j, k)];
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    extents: [usize; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(extents: [usize; 3], data: Vec<f32>) -> Result<Self> {
        check_len(extents, data.len())?;
        Ok(Self { extents, data })
    }

    pub fn zeros(extents: [usize; 3]) -> Self {
        Self { extents, data: vec![0.0; extents.iter().product()] }
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[flat_index(self.extents, i, j, k)]
    }

    pub fn crop(&self, origin: [isize; 3], shape: [usize; 3]) -> Volume {
        Volume { extents: shape, data: crop_box(&self.data, self.extents, origin, shape, 0.0) }
    }

    /// Zero mean, unit variance; constant volumes map to zeros.
    pub fn zscore(&self) -> Volume {
        let n = self.data.len().max(1) as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
        let data = self.data.iter().map(|&v| ((v as f64 - mean) * inv) as f32).collect();
        Volume { extents: self.extents, data }
    }

    /// `[1, H, W, D]` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let [h, w, d] = self.extents;
        Tensor::new(&[1, h, w, d], self.data.clone()).expect("consistent volume")
    }

    /// Binary mask of voxels strictly above `threshold`.
    pub fn threshold(&self, threshold: f32) -> BinaryMask3D {
        BinaryMask3D { extents: self.extents, data: self.data.iter().map(|&v| v > threshold).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask3D {
    extents: [usize; 3],
    data: Vec<bool>,
}

impl BinaryMask3D {
    pub fn new(extents: [usize; 3], data: Vec<bool>) -> Result<Self> {
        check_len(extents, data.len())?;
        Ok(Self { extents, data })
    }

    pub fn zeros(extents: [usize; 3]) -> Self {
        Self { extents, data: vec![false; extents.iter().product()] }
    }

    pub fn from_fn(extents: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(extents.iter().product());
        for i in 0..extents[0] {
            for j in 0..extents[1] {
                for k in 0..extents[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { extents, data }
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[flat_index(self.extents, i, j, k)]
    }

    /// Out-of-range coordinates read as background.
    pub fn get_signed(&self, i: isize, j: isize, k: isize) -> bool {
        let [h, w, d] = self.extents;
        if i < 0 || j < 0 || k < 0 || i as usize >= h || j as usize >= w || k as usize >= d {
            return false;
        }
        self.get(i as usize, j as usize, k as usize)
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: bool) {
        let idx = flat_index(self.extents, i, j, k);
        self.data[idx] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Coordinates of foreground voxels in storage order.
    pub fn foreground(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [_, w, d] = self.extents;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(move |(idx, _)| [idx / (w * d), (idx / d) % w, idx % d])
    }

    pub fn crop(&self, origin: [isize; 3], shape: [usize; 3]) -> BinaryMask3D {
        BinaryMask3D { extents: shape, data: crop_box(&self.data, self.extents, origin, shape, false) }
    }

    pub fn to_volume(&self) -> Volume {
        Volume { extents: self.extents, data: self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect() }
    }

    pub fn check_same_extents(&self, other: &BinaryMask3D) -> Result<()> {
        if self.extents != other.extents {
            return Err(Error::ExtentMismatch { left: self.extents, right: other.extents });
        }
        Ok(())
    }
}
