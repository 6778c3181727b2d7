//! Synthetic vascular phantoms: recursive tube trees in noisy, biased
//! backgrounds.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::coords::Point;
use crate::error::{Error, Result};
use crate::volume::{flat_index, BinaryMask3D, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    pub extents: [usize; 3],
    pub depth: usize,
    pub root_radius: f64,
    pub radius_decay: f64,
    pub length_decay: f64,
    /// Root length as a fraction of the last extent.
    pub root_length: f64,
    /// Branch angle range in radians.
    pub branch_angle: (f64, f64),
    pub contrast: f64,
    pub noise: f64,
    pub bias: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            extents: [64; 3],
            depth: 4,
            root_radius: 3.0,
            radius_decay: 0.75,
            length_decay: 0.75,
            root_length: 0.45,
            branch_angle: (0.35, 0.8),
            contrast: 1.0,
            noise: 0.1,
            bias: 0.2,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.extents.contains(&0) {
            return Err(Error::invalid("phantom", "zero extent"));
        }
        if self.root_radius < 0.5 {
            return Err(Error::invalid("phantom", format!("root radius {} below 0.5", self.root_radius)));
        }
        if !(self.radius_decay > 0.0 && self.length_decay > 0.0) {
            return Err(Error::invalid("phantom", "decays must be positive"));
        }
        if self.branch_angle.0 > self.branch_angle.1 {
            return Err(Error::invalid("phantom", "empty branch angle range"));
        }
        Ok(())
    }
}

/// One tube piece in voxel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub a: Point,
    pub b: Point,
    pub radius: f64,
}

impl Segment {
    pub fn distance(&self, p: Point) -> f64 {
        let ab = sub(self.b, self.a);
        let ap = sub(p, self.a);
        let len2 = dot(ab, ab);
        let t = if len2 > 0.0 { (dot(ap, ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let q = [self.a[0] + t * ab[0], self.a[1] + t * ab[1], self.a[2] + t * ab[2]];
        dot(sub(p, q), sub(p, q)).sqrt()
    }
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalized(a: Point) -> Point {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

fn cross(a: Point, b: Point) -> Point {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// A unit vector perpendicular to `d` at a random angle.
fn perpendicular(d: Point, rng: &mut impl Rng) -> Point {
    let helper = if d[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let e1 = normalized(cross(d, helper));
    let e2 = cross(d, e1);
    let phi = rng.gen_range(0.0..std::f64::consts::TAU);
    normalized([
        phi.cos() * e1[0] + phi.sin() * e2[0],
        phi.cos() * e1[1] + phi.sin() * e2[1],
        phi.cos() * e1[2] + phi.sin() * e2[2],
    ])
}

fn rotate_towards(d: Point, u: Point, angle: f64) -> Point {
    normalized([
        angle.cos() * d[0] + angle.sin() * u[0],
        angle.cos() * d[1] + angle.sin() * u[1],
        angle.cos() * d[2] + angle.sin() * u[2],
    ])
}

/// The branching tree of a spec.
pub fn phantom_tree(spec: &PhantomSpec) -> Result<Vec<Segment>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let e = spec.extents.map(|v| v as f64);
    let jitter = |rng: &mut ChaCha8Rng, n: f64| n / 2.0 + rng.gen_range(-0.1..=0.1) * n;
    let start = [jitter(&mut rng, e[0]), jitter(&mut rng, e[1]), (spec.root_radius + 1.0).min(e[2] / 2.0)];
    let tilt = rng.gen_range(0.0..0.25);
    let dir = rotate_towards([0.0, 0.0, 1.0], perpendicular([0.0, 0.0, 1.0], &mut rng), tilt);
    let mut segments = Vec::new();
    let mut stack = vec![(start, dir, spec.root_length * e[2], spec.root_radius, 0usize)];
    while let Some((a, d, len, radius, level)) = stack.pop() {
        let b = [a[0] + len * d[0], a[1] + len * d[1], a[2] + len * d[2]];
        segments.push(Segment { a, b, radius });
        if level == spec.depth {
            continue;
        }
        let u = perpendicular(d, &mut rng);
        let child_radius = (radius * spec.radius_decay).max(0.5);
        let child_len = len * spec.length_decay;
        let (lo, hi) = spec.branch_angle;
        let t1 = rng.gen_range(lo..=hi);
        let t2 = rng.gen_range(lo..=hi);
        let neg = [-u[0], -u[1], -u[2]];
        stack.push((b, rotate_towards(d, neg, t2), child_len, child_radius, level + 1));
        stack.push((b, rotate_towards(d, u, t1), child_len, child_radius, level + 1));
    }
    Ok(segments)
}

/// Voxels whose centre lies strictly within a segment's radius.
pub fn rasterize(segments: &[Segment], extents: [usize; 3]) -> BinaryMask3D {
    let mut mask = BinaryMask3D::zeros(extents);
    for s in segments {
        let lo: [usize; 3] = std::array::from_fn(|a| (s.a[a].min(s.b[a]) - s.radius).floor().max(0.0) as usize);
        let hi: [usize; 3] =
            std::array::from_fn(|a| ((s.a[a].max(s.b[a]) + s.radius).ceil().max(0.0) as usize).min(extents[a].saturating_sub(1)));
        if (0..3).any(|a| lo[a] > hi[a] || lo[a] >= extents[a]) {
            continue;
        }
        for i in lo[0]..=hi[0] {
            for j in lo[1]..=hi[1] {
                for k in lo[2]..=hi[2] {
                    if s.distance([i as f64, j as f64, k as f64]) < s.radius {
                        mask.set(i, j, k, true);
                    }
                }
            }
        }
    }
    mask
}

fn blur(data: &[f32], ext: [usize; 3]) -> Vec<f32> {
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let mut next = vec![0.0f32; cur.len()];
        for i in 0..ext[0] {
            for j in 0..ext[1] {
                for k in 0..ext[2] {
                    let c = [i, j, k];
                    let mut acc = 0.5 * cur[flat_index(ext, i, j, k)];
                    for step in [-1isize, 1] {
                        let mut n = c;
                        let t = c[axis] as isize + step;
                        n[axis] = t.clamp(0, ext[axis] as isize - 1) as usize;
                        acc += 0.25 * cur[flat_index(ext, n[0], n[1], n[2])];
                    }
                    next[flat_index(ext, i, j, k)] = acc;
                }
            }
        }
        cur = next;
    }
    cur
}

/// Image and exact label mask of a spec; bitwise reproducible.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, BinaryMask3D)> {
    let segments = phantom_tree(spec)?;
    let ext = spec.extents;
    let mask = rasterize(&segments, ext);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let phase: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::invalid("phantom", e.to_string()))?;
    let base: Vec<f32> = mask.data().iter().map(|&m| if m { spec.contrast as f32 } else { 0.0 }).collect();
    let mut image = blur(&base, ext);
    for i in 0..ext[0] {
        for j in 0..ext[1] {
            for k in 0..ext[2] {
                let c = [i, j, k];
                let wave: f64 = (0..3)
                    .map(|a| (std::f64::consts::PI * c[a] as f64 / ext[a] as f64 + phase[a]).sin())
                    .sum::<f64>()
                    / 3.0;
                let idx = flat_index(ext, i, j, k);
                let v = image[idx] as f64 * (1.0 + spec.bias * wave) + noise.sample(&mut rng);
                image[idx] = v as f32;
            }
        }
    }
    Ok((Volume::new(ext, image)?, mask))
}

/// Solid ellipsoid with the given semi-axes, centred in the volume.
pub fn solid_ellipsoid(extents: [usize; 3], semi_axes: Point) -> BinaryMask3D {
    let c = extents.map(|e| (e as f64 - 1.0) / 2.0);
    BinaryMask3D::from_fn(extents, |i, j, k| {
        let p = [i as f64, j as f64, k as f64];
        (0..3).map(|a| ((p[a] - c[a]) / semi_axes[a]).powi(2)).sum::<f64>() <= 1.0
    })
}

/// Seed of case `index` in a cohort generated from `seed`.
pub fn case_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.next_u64()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid("split", format!("unknown split `{s}`")))
    }
}

/// 80% train, 20% test.
pub const DEFAULT_SPLIT: [f64; 3] = [0.8, 0.0, 0.2];
/// Proportions of the 400/56/114 reference cohort.
pub const REFERENCE_SPLIT: [f64; 3] = [400.0 / 570.0, 56.0 / 570.0, 114.0 / 570.0];

/// Case counts per split by largest remainder; ratios must sum to 1.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid("split_counts", format!("ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let exact = ratios.map(|r| ((r * n as f64) * 1e9).round() / 1e9);
    let mut counts = exact.map(|x| x.floor() as usize);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts)
}

/// Split of every case index: train cases first, then val, then test.
pub fn assign_splits(n: usize, ratios: [f64; 3]) -> Result<Vec<Split>> {
    let counts = split_counts(n, ratios)?;
    Ok(Split::ALL.iter().zip(counts).flat_map(|(&s, c)| std::iter::repeat_n(s, c)).collect())
}
