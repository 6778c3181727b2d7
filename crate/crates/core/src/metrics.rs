//! Overlap, centerline and surface metrics plus sparsity/dispersion indices.

use crate::error::{Error, Result};
use crate::volume::{flat_index, BinaryMask3D};

/// Default surface tolerance in voxels.
pub const NSD_TAU: f64 = 1.0;

const FACES: [[isize; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

fn overlap(a: &BinaryMask3D, b: &BinaryMask3D) -> usize {
    a.data().iter().zip(b.data()).filter(|(x, y)| **x && **y).count()
}

/// 2|P∩G| / (|P|+|G|); two empty masks score 1.
pub fn dice(pred: &BinaryMask3D, gt: &BinaryMask3D) -> Result<f64> {
    pred.check_same_extents(gt)?;
    let denom = pred.count() + gt.count();
    if denom == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * overlap(pred, gt) as f64 / denom as f64)
}

fn neighbourhood(m: &BinaryMask3D, [i, j, k]: [usize; 3]) -> [bool; 27] {
    let mut n = [false; 27];
    for (idx, v) in n.iter_mut().enumerate() {
        let (di, dj, dk) = ((idx / 9) as isize - 1, ((idx / 3) % 3) as isize - 1, (idx % 3) as isize - 1);
        *v = m.get_signed(i as isize + di, j as isize + dj, k as isize + dk);
    }
    n
}

fn offset(idx: usize) -> [isize; 3] {
    [(idx / 9) as isize - 1, ((idx / 3) % 3) as isize - 1, (idx % 3) as isize - 1]
}

fn cell(o: [isize; 3]) -> Option<usize> {
    o.iter().all(|v| (-1..=1).contains(v)).then(|| ((o[0] + 1) * 9 + (o[1] + 1) * 3 + o[2] + 1) as usize)
}

fn manhattan(o: [isize; 3]) -> isize {
    o.iter().map(|v| v.abs()).sum()
}

/// Whether removing the centre of a 3x3x3 neighbourhood preserves topology
/// (26-connected foreground, 6-connected background).
pub fn is_simple(n: &[bool; 27]) -> bool {
    // foreground: exactly one 26-component among the 26 neighbours
    let mut seen = [false; 27];
    let mut fg_components = 0;
    for start in (0..27).filter(|&c| c != 13 && n[c]) {
        if seen[start] {
            continue;
        }
        fg_components += 1;
        if fg_components > 1 {
            return false;
        }
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(c) = stack.pop() {
            let o = offset(c);
            for d in 0..27 {
                let Some(nc) = cell([o[0] + offset(d)[0], o[1] + offset(d)[1], o[2] + offset(d)[2]]) else { continue };
                if nc != 13 && n[nc] && !seen[nc] {
                    seen[nc] = true;
                    stack.push(nc);
                }
            }
        }
    }
    if fg_components != 1 {
        return false;
    }
    // background: exactly one 6-component of N18 touching a face neighbour
    let in18 = |c: usize| c != 13 && manhattan(offset(c)) <= 2;
    let mut seen = [false; 27];
    let mut bg_components = 0;
    for f in FACES {
        let start = cell(f).expect("face cell");
        if n[start] || seen[start] {
            continue;
        }
        bg_components += 1;
        if bg_components > 1 {
            return false;
        }
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(c) = stack.pop() {
            let o = offset(c);
            for d in FACES {
                let Some(nc) = cell([o[0] + d[0], o[1] + d[1], o[2] + d[2]]) else { continue };
                if in18(nc) && !n[nc] && !seen[nc] {
                    seen[nc] = true;
                    stack.push(nc);
                }
            }
        }
    }
    bg_components == 1
}

/// Topology-preserving directional thinning. Curve endpoints are kept so
/// that tubes reduce to their centerlines.
pub fn skeletonize(mask: &BinaryMask3D) -> BinaryMask3D {
    let mut s = mask.clone();
    loop {
        let mut changed = false;
        for dir in FACES {
            let candidates: Vec<[usize; 3]> = s
                .foreground()
                .filter(|&[i, j, k]| !s.get_signed(i as isize + dir[0], j as isize + dir[1], k as isize + dir[2]))
                .collect();
            for p in candidates {
                let n = neighbourhood(&s, p);
                let degree = n.iter().filter(|&&v| v).count() - 1;
                if degree > 1 && is_simple(&n) {
                    s.set(p[0], p[1], p[2], false);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    s
}

/// Number of 26-connected foreground components.
pub fn connected_components(mask: &BinaryMask3D) -> usize {
    let ext = mask.extents();
    let mut seen = vec![false; mask.len()];
    let mut count = 0;
    for p in mask.foreground() {
        let idx = flat_index(ext, p[0], p[1], p[2]);
        if seen[idx] {
            continue;
        }
        count += 1;
        seen[idx] = true;
        let mut stack = vec![p];
        while let Some([i, j, k]) = stack.pop() {
            for d in (0..27).filter(|&d| d != 13).map(offset) {
                let (a, b, c) = (i as isize + d[0], j as isize + d[1], k as isize + d[2]);
                if !mask.get_signed(a, b, c) {
                    continue;
                }
                let q = [a as usize, b as usize, c as usize];
                let qi = flat_index(ext, q[0], q[1], q[2]);
                if !seen[qi] {
                    seen[qi] = true;
                    stack.push(q);
                }
            }
        }
    }
    count
}

/// Topology precision and sensitivity with their harmonic mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClDice {
    pub tprec: f64,
    pub tsens: f64,
    pub value: f64,
}

/// clDice from precomputed skeletons.
pub fn cldice_with_skeletons(
    pred: &BinaryMask3D,
    gt: &BinaryMask3D,
    skel_pred: &BinaryMask3D,
    skel_gt: &BinaryMask3D,
) -> Result<ClDice> {
    pred.check_same_extents(gt)?;
    pred.check_same_extents(skel_pred)?;
    pred.check_same_extents(skel_gt)?;
    if pred.count() == 0 && gt.count() == 0 {
        return Ok(ClDice { tprec: 1.0, tsens: 1.0, value: 1.0 });
    }
    let (sp, sg) = (skel_pred.count(), skel_gt.count());
    if sp == 0 || sg == 0 {
        return Ok(ClDice { tprec: 0.0, tsens: 0.0, value: 0.0 });
    }
    let tprec = overlap(skel_pred, gt) as f64 / sp as f64;
    let tsens = overlap(skel_gt, pred) as f64 / sg as f64;
    let value = if tprec + tsens > 0.0 { 2.0 * tprec * tsens / (tprec + tsens) } else { 0.0 };
    Ok(ClDice { tprec, tsens, value })
}

pub fn cldice(pred: &BinaryMask3D, gt: &BinaryMask3D) -> Result<f64> {
    pred.check_same_extents(gt)?;
    Ok(cldice_with_skeletons(pred, gt, &skeletonize(pred), &skeletonize(gt))?.value)
}

/// Foreground voxels with a background (or out-of-volume) face neighbour.
pub fn boundary(mask: &BinaryMask3D) -> BinaryMask3D {
    let mut b = BinaryMask3D::zeros(mask.extents());
    for [i, j, k] in mask.foreground() {
        if FACES.iter().any(|d| !mask.get_signed(i as isize + d[0], j as isize + d[1], k as isize + d[2])) {
            b.set(i, j, k, true);
        }
    }
    b
}

/// 1D lower envelope of parabolas; `f` holds squared distances in place.
fn edt_1d(f: &mut [f64], scale: f64, v: &mut [usize], z: &mut [f64], out: &mut [f64]) {
    let n = f.len();
    let s2 = scale * scale;
    let mut k = 0usize;
    let Some(q0) = f.iter().position(|v| v.is_finite()) else { return };
    v[0] = q0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + s2 * (q * q) as f64) - (f[p] + s2 * (p * p) as f64)) / (2.0 * s2 * (q as f64 - p as f64));
            if s <= z[k] {
                // z[0] is -inf, so this never underflows
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = scale * (q as f64 - v[k] as f64);
        *o = d * d + f[v[k]];
    }
    f.copy_from_slice(&out[..n]);
}

/// Squared Euclidean distance from every voxel to the nearest set voxel of
/// `sites`; infinite when `sites` is empty. `spacing` scales each axis.
pub fn squared_distance_transform(sites: &BinaryMask3D, spacing: [f64; 3]) -> Vec<f64> {
    let ext = sites.extents();
    let mut d: Vec<f64> = sites.data().iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let longest = ext.iter().copied().max().unwrap_or(0);
    let (mut v, mut z, mut out) = (vec![0; longest], vec![0.0; longest + 1], vec![0.0; longest]);
    let mut line = vec![0.0; longest];
    for axis in 0..3 {
        let n = ext[axis];
        let (oa, ob) = ((axis + 1) % 3, (axis + 2) % 3);
        for a in 0..ext[oa] {
            for b in 0..ext[ob] {
                let at = |t: usize| {
                    let mut c = [0; 3];
                    c[axis] = t;
                    c[oa] = a;
                    c[ob] = b;
                    flat_index(ext, c[0], c[1], c[2])
                };
                for t in 0..n {
                    line[t] = d[at(t)];
                }
                edt_1d(&mut line[..n], spacing[axis], &mut v, &mut z, &mut out);
                for t in 0..n {
                    d[at(t)] = line[t];
                }
            }
        }
    }
    d
}

/// Normalized surface distance: the pooled share of both boundaries lying
/// within `tau` of the other boundary.
pub fn nsd_with_spacing(pred: &BinaryMask3D, gt: &BinaryMask3D, tau: f64, spacing: [f64; 3]) -> Result<f64> {
    pred.check_same_extents(gt)?;
    match (pred.count(), gt.count()) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let (bp, bg) = (boundary(pred), boundary(gt));
    let (dp, dg) = (squared_distance_transform(&bp, spacing), squared_distance_transform(&bg, spacing));
    let ext = pred.extents();
    let tau2 = tau * tau;
    let within = |b: &BinaryMask3D, dist: &[f64]| b.foreground().filter(|p| dist[flat_index(ext, p[0], p[1], p[2])] <= tau2).count();
    let hits = within(&bp, &dg) + within(&bg, &dp);
    Ok(hits as f64 / (bp.count() + bg.count()) as f64)
}

pub fn nsd(pred: &BinaryMask3D, gt: &BinaryMask3D, tau: f64) -> Result<f64> {
    nsd_with_spacing(pred, gt, tau, [1.0; 3])
}

/// Share of foreground voxels.
pub fn sparsity_index(mask: &BinaryMask3D) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    mask.count() as f64 / mask.len() as f64
}

/// Mean distance to the centroid, doubled and divided by the volume diagonal.
pub fn dispersion_index(mask: &BinaryMask3D) -> f64 {
    let n = mask.count();
    if n == 0 {
        return 0.0;
    }
    let mut c = [0.0; 3];
    for p in mask.foreground() {
        for a in 0..3 {
            c[a] += p[a] as f64;
        }
    }
    c.iter_mut().for_each(|v| *v /= n as f64);
    let total: f64 = mask
        .foreground()
        .map(|p| (0..3).map(|a| (p[a] as f64 - c[a]).powi(2)).sum::<f64>().sqrt())
        .sum();
    let diag = mask.extents().iter().map(|&e| (e * e) as f64).sum::<f64>().sqrt();
    2.0 * total / (n as f64 * diag)
}

/// Keeps voxels whose coordinate along `axis` exceeds `threshold`.
pub fn split_small_vessels(mask: &BinaryMask3D, axis: usize, threshold: usize) -> Result<BinaryMask3D> {
    if axis > 2 {
        return Err(Error::invalid("split_small_vessels", format!("axis {axis} out of range")));
    }
    let mut out = mask.clone();
    for p in mask.foreground() {
        if p[axis] <= threshold {
            out.set(p[0], p[1], p[2], false);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmallVesselReport {
    pub dice: f64,
    pub cldice: f64,
    pub nsd: f64,
}

/// Per-case scores. The indices describe the ground-truth mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub dice: f64,
    pub cldice: f64,
    pub nsd: f64,
    pub si: f64,
    pub di: f64,
    pub small_vessel: Option<SmallVesselReport>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub tau: f64,
    pub spacing: [f64; 3],
    /// `(axis, threshold)` for the small-vessel sub-report.
    pub small_vessel: Option<(usize, usize)>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { tau: NSD_TAU, spacing: [1.0; 3], small_vessel: None }
    }
}

pub fn evaluate(pred: &BinaryMask3D, gt: &BinaryMask3D, opts: &EvalOptions) -> Result<MetricsReport> {
    pred.check_same_extents(gt)?;
    let small_vessel = match opts.small_vessel {
        Some((axis, t)) => {
            let (p, g) = (split_small_vessels(pred, axis, t)?, split_small_vessels(gt, axis, t)?);
            Some(SmallVesselReport {
                dice: dice(&p, &g)?,
                cldice: cldice(&p, &g)?,
                nsd: nsd_with_spacing(&p, &g, opts.tau, opts.spacing)?,
            })
        }
        None => None,
    };
    Ok(MetricsReport {
        dice: dice(pred, gt)?,
        cldice: cldice(pred, gt)?,
        nsd: nsd_with_spacing(pred, gt, opts.tau, opts.spacing)?,
        si: sparsity_index(gt),
        di: dispersion_index(gt),
        small_vessel,
    })
}
