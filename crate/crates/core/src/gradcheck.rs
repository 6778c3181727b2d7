//! Central finite-difference verification of analytic gradients at `f64`.
//!
//! A checked function maps leaf inputs (and any parameters it reads from the
//! store) to a tensor. It is reduced to a scalar with a fixed random
//! projection, so every output element contributes to the comparison.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-6;
pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const COMPOSED_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// One difference quotient per scalar input.
    Elementwise,
    /// Derivatives along this many random unit directions through all inputs.
    Directions(usize),
}

/// `||a - n|| / max(||a||, ||n||)`, zero when both vanish.
pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// Compares analytic and numeric gradients of `f` with respect to `inputs`
/// and every parameter in `store`; returns the relative error.
pub fn check<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], mode: Mode, seed: u64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Callers often draw inputs from the same seed.
    rng.set_stream(0x9e37);
    let mut store = store.clone();
    let mut inputs = inputs.to_vec();

    // Analytic pass; also fixes the projection.
    let (projection, grads) = {
        let mut g = Graph::with_params(&store);
        let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &leaves)?;
        let shape = g.shape(out).to_vec();
        let r = random_tensor(&shape, &mut rng);
        let rv = g.input(r.clone());
        let prod = g.mul(out, rv)?;
        let loss = g.mean_all(prod)?;
        let grads = g.backward(loss)?;
        let mut flat = Vec::new();
        for &v in &leaves {
            let n = g.value(v).len();
            flat.extend_from_slice(grads.get(v).unwrap_or(&vec![0.0; n]));
        }
        for id in store.ids() {
            let n = store.get(id).value.len();
            flat.extend_from_slice(grads.param(id).unwrap_or(&vec![0.0; n]));
        }
        (r, flat)
    };

    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let leaves: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &leaves)?;
        let v = g.value(out).data();
        Ok(v.iter().zip(projection.data()).map(|(a, b)| a * b).sum::<f64>() / v.len() as f64)
    };

    let sizes: Vec<usize> = inputs
        .iter()
        .map(|t| t.len())
        .chain(store.iter().map(|p| p.value.len()))
        .collect();
    let total: usize = sizes.iter().sum();

    // Adds `h * dir` to every scalar.
    let shift = |store: &mut ParamStore<f64>, inputs: &mut [Tensor<f64>], dir: &[f64], h: f64| {
        let mut off = 0;
        for t in inputs.iter_mut() {
            for (x, d) in t.data_mut().iter_mut().zip(&dir[off..]) {
                *x += h * d;
            }
            off += t.len();
        }
        for p in store.iter_mut() {
            for (x, d) in p.value.data_mut().iter_mut().zip(&dir[off..]) {
                *x += h * d;
            }
            off += p.value.len();
        }
    };

    let directional = |store: &mut ParamStore<f64>, inputs: &mut [Tensor<f64>], dir: &[f64]| -> Result<f64> {
        shift(store, inputs, dir, STEP);
        let plus = eval(store, inputs)?;
        shift(store, inputs, dir, -2.0 * STEP);
        let minus = eval(store, inputs)?;
        shift(store, inputs, dir, STEP);
        Ok((plus - minus) / (2.0 * STEP))
    };

    let (analytic, numeric) = match mode {
        Mode::Elementwise => {
            let mut numeric = Vec::with_capacity(total);
            for i in 0..total {
                let mut dir = vec![0.0; total];
                dir[i] = 1.0;
                numeric.push(directional(&mut store, &mut inputs, &dir)?);
            }
            (grads, numeric)
        }
        Mode::Directions(k) => {
            let mut a = Vec::with_capacity(k);
            let mut n = Vec::with_capacity(k);
            for _ in 0..k {
                let mut dir: Vec<f64> = (0..total).map(|_| rng.sample(StandardNormal)).collect();
                let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
                dir.iter_mut().for_each(|d| *d /= norm);
                a.push(grads.iter().zip(&dir).map(|(x, y)| x * y).sum());
                n.push(directional(&mut store, &mut inputs, &dir)?);
            }
            (a, n)
        }
    };
    Ok(relative_error(&analytic, &numeric))
}
