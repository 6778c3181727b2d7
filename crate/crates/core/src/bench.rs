//! Wall-clock scaling of a ccMamba block against full self-attention.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ccmamba::{CcMambaBlock, CcMambaConfig};
use crate::error::Result;
use crate::gradcheck::random_tensor;
use crate::graph::Graph;
use crate::nn::ParamStore;
use crate::real::{gemm, MatMut, MatRef};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub len: usize,
    pub scan_ms: f64,
    pub attn_ms: f64,
    pub scan_bytes: usize,
    pub attn_bytes: usize,
}

/// Single-head softmax attention over `x: [L, T]` without a tape. Returns
/// the output and the bytes of every buffer it materializes.
pub fn reference_attention(x: &[f32], len: usize, dim: usize, wq: &[f32], wk: &[f32], wv: &[f32]) -> (Vec<f32>, usize) {
    let project = |w: &[f32]| {
        let mut out = vec![0.0f32; len * dim];
        gemm(1.0, MatRef::row_major(x, 0, len, dim), MatRef::row_major(w, 0, dim, dim), 0.0, MatMut::row_major(&mut out, 0, len, dim));
        out
    };
    let (q, k, v) = (project(wq), project(wk), project(wv));
    let mut scores = vec![0.0f32; len * len];
    let scale = 1.0 / (dim as f32).sqrt();
    gemm(scale, MatRef::row_major(&q, 0, len, dim), MatRef::row_major(&k, 0, len, dim).t(), 0.0, MatMut::row_major(&mut scores, 0, len, len));
    for row in scores.chunks_mut(len.max(1)) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for s in row.iter_mut() {
            *s = (*s - m).exp();
            sum += *s;
        }
        row.iter_mut().for_each(|s| *s /= sum);
    }
    let mut out = vec![0.0f32; len * dim];
    gemm(1.0, MatRef::row_major(&scores, 0, len, len), MatRef::row_major(&v, 0, len, dim), 0.0, MatMut::row_major(&mut out, 0, len, dim));
    let bytes = 4 * (scores.len() + q.len() + k.len() + v.len() + out.len());
    (out, bytes)
}

fn best(v: Vec<f64>) -> f64 {
    v.into_iter().fold(f64::INFINITY, f64::min)
}

/// Times one inference pass of each model per length (best of `repeats`
/// after a warm-up). All scan timings run before any attention timing so the
/// large attention buffers do not disturb the scan measurements.
pub fn bench_scan_vs_attention(lengths: &[usize], dim: usize, repeats: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = CcMambaConfig { compressed_dim: dim, ..CcMambaConfig::default() };
    let mut store = ParamStore::<f32>::new();
    let block = CcMambaBlock::new(&mut store, "bench", dim, cfg, &mut rng)?;
    let w: Vec<Vec<f32>> = (0..3).map(|_| random_tensor(&[dim, dim], &mut rng).cast::<f32>().into_data()).collect();
    let inputs: Vec<Vec<f32>> = lengths.iter().map(|&len| random_tensor(&[len, dim], &mut rng).cast::<f32>().into_data()).collect();
    let mut rows = Vec::with_capacity(lengths.len());
    for (&len, x) in lengths.iter().zip(&inputs) {
        let mut times = Vec::new();
        let mut bytes = 0;
        for r in 0..=repeats.max(1) {
            let start = Instant::now();
            let mut g = Graph::inference(&store);
            let xv = g.input(Tensor::new(&[len, dim], x.clone())?);
            block.forward_tokens(&mut g, xv)?;
            if r > 0 {
                times.push(start.elapsed().as_secs_f64() * 1e3);
            }
            bytes = g.value_bytes();
        }
        rows.push(BenchRow { len, scan_ms: best(times), attn_ms: 0.0, scan_bytes: bytes, attn_bytes: 0 });
    }
    for (row, x) in rows.iter_mut().zip(&inputs) {
        let mut times = Vec::new();
        for r in 0..=repeats.max(1) {
            let start = Instant::now();
            let (_, bytes) = reference_attention(x, row.len, dim, &w[0], &w[1], &w[2]);
            if r > 0 {
                times.push(start.elapsed().as_secs_f64() * 1e3);
            }
            row.attn_bytes = bytes;
        }
        row.attn_ms = best(times);
    }
    Ok(rows)
}
