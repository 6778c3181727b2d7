//! Normalized patch and token coordinates, the shared positional embedding,
//! coordinate-aligned cropping of the global feature, and sliding-window
//! tiling.
//!
//! Coordinates live in `(-1, 1)` per axis: voxel `v` of an axis of extent `E`
//! has its centre at `2 (v + 0.5) / E - 1`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{axis_taps, AxisMap};
use crate::nn::{Init, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub type Point = [f64; 3];

/// Normalized centre of the box `[origin, origin + patch)` in an image of
/// extent `full`.
pub fn patch_center(origin: [isize; 3], patch: [usize; 3], full: [usize; 3]) -> Point {
    std::array::from_fn(|a| 2.0 * (origin[a] as f64 + patch[a] as f64 / 2.0) / full[a] as f64 - 1.0)
}

fn check_center(op: &'static str, c: Point) -> Result<()> {
    if c.iter().any(|v| !(v.abs() < 1.0)) {
        return Err(Error::invalid(op, format!("center {c:?} outside (-1, 1)^3")));
    }
    Ok(())
}

/// A tile or training crop of a full image.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub center: Point,
    /// Corner in full-image voxels; negative when the tile is padded.
    pub origin: [isize; 3],
    pub shape: [usize; 3],
}

impl PatchRecord {
    pub fn new(origin: [isize; 3], shape: [usize; 3], full: [usize; 3]) -> Self {
        Self { center: patch_center(origin, shape, full), origin, shape }
    }

    /// Normalized half-width of the patch footprint.
    pub fn half_extent(&self, full: [usize; 3]) -> Point {
        std::array::from_fn(|a| self.shape[a] as f64 / full[a] as f64)
    }
}

/// Token-centre coordinates `[L, 3]`, z-fastest over the token grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenCoordGrid {
    pub coords: Vec<Point>,
    pub token_size: usize,
    pub grid_shape: [usize; 3],
}

impl TokenCoordGrid {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn to_tensor<R: Real>(&self) -> Tensor<R> {
        let data = self.coords.iter().flat_map(|c| c.iter().map(|&v| R::of(v))).collect();
        Tensor::new(&[self.coords.len(), 3], data).expect("rows of three")
    }
}

/// `x_i = x_o - half + (i + 0.5) step` on every axis.
fn affine_grid(center: Point, half: Point, step: Point, grid_shape: [usize; 3], token_size: usize) -> TokenCoordGrid {
    let axis = |a: usize, i: usize| center[a] - half[a] + (i as f64 + 0.5) * step[a];
    let mut coords = Vec::with_capacity(grid_shape.iter().product());
    for i in 0..grid_shape[0] {
        for j in 0..grid_shape[1] {
            for k in 0..grid_shape[2] {
                coords.push([axis(0, i), axis(1, j), axis(2, k)]);
            }
        }
    }
    TokenCoordGrid { coords, token_size, grid_shape }
}

fn token_grid_shape(op: &'static str, local: [usize; 3], p: usize) -> Result<[usize; 3]> {
    if p == 0 || local.iter().any(|&e| e == 0 || e % p != 0) {
        return Err(Error::invalid(op, format!("token size {p} does not divide {local:?}")));
    }
    Ok(local.map(|e| e / p))
}

/// Local token coordinates exactly as `x = x_o - h/H + (i + 0.5) p 2/H`,
/// with the local map and the global map sharing one voxel spacing.
pub fn token_coords_local(center: Point, global_shape: [usize; 3], local_shape: [usize; 3], p: usize) -> Result<TokenCoordGrid> {
    let grid = token_grid_shape("token_coords_local", local_shape, p)?;
    if (0..3).any(|a| local_shape[a] > global_shape[a]) {
        return Err(Error::invalid("token_coords_local", format!("local {local_shape:?} exceeds global {global_shape:?}")));
    }
    let half = std::array::from_fn(|a| local_shape[a] as f64 / global_shape[a] as f64);
    let step = std::array::from_fn(|a| 2.0 * p as f64 / global_shape[a] as f64);
    Ok(affine_grid(center, half, step, grid, p))
}

/// Local token coordinates for a feature map of extent `local_shape` that
/// covers a `patch` crop of an `image`-sized volume.
///
/// The footprint is measured in image voxels, so the result does not depend
/// on the resolution of the global feature map.
pub fn token_coords_footprint(
    center: Point,
    patch: [usize; 3],
    image: [usize; 3],
    local_shape: [usize; 3],
    p: usize,
) -> Result<TokenCoordGrid> {
    let grid = token_grid_shape("token_coords_footprint", local_shape, p)?;
    let half: Point = std::array::from_fn(|a| patch[a] as f64 / image[a] as f64);
    let step = std::array::from_fn(|a| 2.0 * half[a] * p as f64 / local_shape[a] as f64);
    Ok(affine_grid(center, half, step, grid, p))
}

/// Global token coordinates: centre at the origin, footprint the whole map.
pub fn token_coords_global(global_shape: [usize; 3], p: usize) -> Result<TokenCoordGrid> {
    token_coords_local([0.0; 3], global_shape, global_shape, p)
}

/// Linear map from coordinates to `T`-wide embeddings.
#[derive(Clone, Copy, Debug)]
pub struct PosEmbedding {
    pub w: ParamId,
    pub b: ParamId,
    pub dim: usize,
}

impl PosEmbedding {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let w = store.init(format!("{name}.weight"), &[3, dim], Init::FanInUniform { fan_in: 3 }, rng)?;
        let b = store.init(format!("{name}.bias"), &[dim], Init::Zeros, rng)?;
        Ok(Self { w, b, dim })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, coords: &TokenCoordGrid) -> Result<Var> {
        let c = g.input(coords.to_tensor());
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.pos_embed(c, w, b)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CropMode {
    /// Resample the patch footprint onto the target grid.
    #[default]
    Footprint,
    /// Take `target` voxels of the global map around the centre as they are.
    Literal,
}

/// Per-axis sampling maps that cut the footprint `center +- half` out of a
/// map of extent `global` onto `target` voxels.
pub fn crop_maps(center: Point, half: Point, global: [usize; 3], target: [usize; 3], mode: CropMode) -> [AxisMap; 3] {
    std::array::from_fn(|a| {
        let (n, gext, x_o) = (target[a] as f64, global[a] as f64, center[a]);
        match mode {
            CropMode::Footprint => {
                let scale = half[a] * gext / n;
                let offset = (x_o - half[a] + 1.0) * gext / 2.0 + scale / 2.0 - 0.5;
                AxisMap::Affine { scale, offset }
            }
            CropMode::Literal => {
                let mid = (x_o + 1.0) * gext / 2.0 - 0.5;
                AxisMap::Affine { scale: 1.0, offset: mid - n / 2.0 + 0.5 }
            }
        }
    })
}

/// Crop of `f_g: [C, H, W, D]` around `center` resampled to `target`;
/// samples outside the map are zero.
pub fn crop_global_at<R: Real>(
    g: &mut Graph<'_, R>,
    f_g: Var,
    center: Point,
    half: Point,
    target: [usize; 3],
    mode: CropMode,
) -> Result<Var> {
    check_center("crop_global_at", center)?;
    let s = g.shape(f_g).to_vec();
    if s.len() != 4 {
        return Err(Error::invalid("crop_global_at", format!("expects [C, H, W, D], got {s:?}")));
    }
    let global = [s[1], s[2], s[3]];
    let maps = crop_maps(center, half, global, target, mode);
    let taps = std::array::from_fn(|a| axis_taps(global[a], target[a], maps[a]));
    g.resample(f_g, taps)
}

fn axis_origins(full: usize, patch: usize, overlap: f64) -> Vec<isize> {
    if patch >= full {
        return vec![-(((patch - full) / 2) as isize)];
    }
    let step = ((patch as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let n = (full - patch).div_ceil(step) + 1;
    (0..n).map(|i| (i * step).min(full - patch) as isize).collect()
}

/// Overlapping tiles covering `full`, in z-fastest order.
pub fn tile_for_inference(full: [usize; 3], patch: [usize; 3], overlap: f64) -> Result<Vec<PatchRecord>> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::invalid("tile_for_inference", format!("overlap {overlap} outside [0, 1)")));
    }
    let o: [Vec<isize>; 3] = std::array::from_fn(|a| axis_origins(full[a], patch[a], overlap));
    let mut tiles = Vec::with_capacity(o.iter().map(Vec::len).product());
    for &x in &o[0] {
        for &y in &o[1] {
            for &z in &o[2] {
                tiles.push(PatchRecord::new([x, y, z], patch, full));
            }
        }
    }
    Ok(tiles)
}

/// Uniform averaging of overlapping tile predictions.
#[derive(Clone, Debug)]
pub struct Stitcher {
    extents: [usize; 3],
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl Stitcher {
    pub fn new(extents: [usize; 3]) -> Self {
        let n = extents.iter().product();
        Self { extents, sum: vec![0.0; n], count: vec![0; n] }
    }

    /// Adds one tile's values (z-fastest over `tile.shape`); padded parts
    /// are dropped.
    pub fn add(&mut self, tile: &PatchRecord, values: &[f32]) {
        let [h, w, d] = self.extents;
        let [ph, pw, pd] = tile.shape;
        for a in 0..ph {
            let i = tile.origin[0] + a as isize;
            if i < 0 || i as usize >= h {
                continue;
            }
            for b in 0..pw {
                let j = tile.origin[1] + b as isize;
                if j < 0 || j as usize >= w {
                    continue;
                }
                for c in 0..pd {
                    let k = tile.origin[2] + c as isize;
                    if k < 0 || k as usize >= d {
                        continue;
                    }
                    let dst = (i as usize * w + j as usize) * d + k as usize;
                    self.sum[dst] += values[(a * pw + b) * pd + c] as f64;
                    self.count[dst] += 1;
                }
            }
        }
    }

    /// Number of tiles that touched each voxel.
    pub fn coverage(&self) -> &[u32] {
        &self.count
    }

    /// Per-voxel average; uncovered voxels read zero.
    pub fn finish(self) -> Vec<f32> {
        self.sum
            .iter()
            .zip(&self.count)
            .map(|(&s, &c)| if c == 0 { 0.0 } else { (s / c as f64) as f32 })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eq6_worked_values() {
        let grid = token_coords_local([0.0; 3], [64, 64, 64], [16, 16, 16], 2).unwrap();
        assert_eq!(grid.coords[0][0], -0.21875);
        assert_eq!(grid.coords[7 * 64][0], 0.21875);
    }

    #[test]
    fn global_span() {
        let grid = token_coords_global([64, 64, 64], 8).unwrap();
        assert_eq!(grid.coords[0], [-0.875; 3]);
        assert_eq!(grid.coords[grid.len() - 1], [0.875; 3]);
        assert_eq!(grid.coords[1][2] - grid.coords[0][2], 0.25);
    }

    #[test]
    fn tile_counts() {
        assert_eq!(tile_for_inference([32; 3], [32; 3], 0.5).unwrap().len(), 1);
        assert_eq!(tile_for_inference([128; 3], [96; 3], 0.5).unwrap().len(), 8);
        assert!(tile_for_inference([8; 3], [4; 3], 1.0).is_err());
    }
}
