//! Channel-compressed Mamba: volumes are cut into `p^3` tokens, each token is
//! projected down to a small width, run through a gated selective SSM and
//! projected back.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, Var};
use crate::nn::{Init, Linear, Norm, NormKind, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Geometry of a `[C, H, W, D]` map cut into cubic tokens of side `p`.
///
/// Tokens are ordered z-fastest over the token grid; inside a token the
/// feature index is `((c * p + i) * p + j) * p + k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub channels: usize,
    pub extents: [usize; 3],
    pub p: usize,
}

impl TokenGrid {
    pub fn new(channels: usize, extents: [usize; 3], p: usize) -> Result<Self> {
        if p == 0 || extents.iter().any(|&e| e == 0 || e % p != 0) {
            return Err(Error::invalid("tokenize", format!("token size {p} does not divide {extents:?}")));
        }
        Ok(Self { channels, extents, p })
    }

    pub fn grid_shape(&self) -> [usize; 3] {
        self.extents.map(|e| e / self.p)
    }

    /// `L`
    pub fn len(&self) -> usize {
        self.grid_shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `C p^3`
    pub fn dim(&self) -> usize {
        self.channels * self.p.pow(3)
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.channels, self.extents[0], self.extents[1], self.extents[2]]
    }

    /// For every `(token, feature)` slot, the flat index into the map.
    pub fn index(&self) -> Vec<usize> {
        let [gh, gw, gd] = self.grid_shape();
        let [h, w, d] = self.extents;
        let p = self.p;
        let mut idx = Vec::with_capacity(self.len() * self.dim());
        for a in 0..gh {
            for b in 0..gw {
                for e in 0..gd {
                    for c in 0..self.channels {
                        for i in 0..p {
                            for j in 0..p {
                                let row = ((c * h + a * p + i) * w + b * p + j) * d + e * p;
                                idx.extend(row..row + p);
                            }
                        }
                    }
                }
            }
        }
        idx
    }

    /// Inverse permutation of [`TokenGrid::index`].
    pub fn inverse_index(&self) -> Vec<usize> {
        let fwd = self.index();
        let mut inv = vec![0; fwd.len()];
        for (slot, &src) in fwd.iter().enumerate() {
            inv[src] = slot;
        }
        inv
    }
}

pub fn tokenize<R: Real>(g: &mut Graph<'_, R>, f: Var, p: usize) -> Result<(Var, TokenGrid)> {
    let s = g.shape(f).to_vec();
    if s.len() != 4 {
        return Err(Error::invalid("tokenize", format!("expects [C, H, W, D], got {s:?}")));
    }
    let grid = TokenGrid::new(s[0], [s[1], s[2], s[3]], p)?;
    let t = g.gather(f, grid.index(), &[grid.len(), grid.dim()])?;
    Ok((t, grid))
}

pub fn detokenize<R: Real>(g: &mut Graph<'_, R>, tokens: Var, grid: &TokenGrid) -> Result<Var> {
    if g.shape(tokens) != [grid.len(), grid.dim()] {
        return Err(Error::shape("detokenize", g.shape(tokens), &[grid.len(), grid.dim()]));
    }
    g.gather(tokens, grid.inverse_index(), &grid.shape())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CcMambaConfig {
    /// Token side `p`.
    pub token_size: usize,
    /// Compressed token width `T`.
    pub compressed_dim: usize,
    pub expand: usize,
    pub conv_width: usize,
    pub state_dim: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    /// Also scan the reversed sequence and add the results.
    pub bidirectional: bool,
}

impl Default for CcMambaConfig {
    fn default() -> Self {
        Self {
            token_size: 8,
            compressed_dim: 32,
            expand: 2,
            conv_width: 4,
            state_dim: 16,
            layers: 4,
            mlp_ratio: 4,
            bidirectional: false,
        }
    }
}

impl CcMambaConfig {
    pub fn inner_dim(&self) -> usize {
        self.expand * self.compressed_dim
    }

    pub fn dt_rank(&self) -> usize {
        self.compressed_dim.div_ceil(16)
    }
}

const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 1e-1;

/// Selective SSM parameters of one block.
#[derive(Clone, Copy, Debug)]
pub struct SsmParams {
    /// `[E, N]`; `A = -exp(a_log)`.
    pub a_log: ParamId,
    pub x_dt: Linear,
    pub x_b: Linear,
    pub x_c: Linear,
    pub dt: Linear,
    pub state_dim: usize,
}

impl SsmParams {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, cfg: &CcMambaConfig, rng: &mut impl Rng) -> Result<Self> {
        let (e, n, r) = (cfg.inner_dim(), cfg.state_dim, cfg.dt_rank());
        let a_log = Tensor::from_fn(&[e, n], |i| R::of(((i % n) as f64 + 1.0).ln()));
        let a_log = store.insert(format!("{name}.a_log"), a_log, Init::Custom("ln(1..N)"))?;
        let x_dt = Linear::new(store, &format!("{name}.x_dt"), e, r, false, rng)?;
        let x_b = Linear::new(store, &format!("{name}.x_b"), e, n, false, rng)?;
        let x_c = Linear::new(store, &format!("{name}.x_c"), e, n, false, rng)?;
        let dt_w = store.init(format!("{name}.dt.weight"), &[r, e], Init::FanInUniform { fan_in: r }, rng)?;
        // Step sizes start log-uniform in [DT_MIN, DT_MAX] through the softplus.
        let bias = Tensor::from_fn(&[e], |_| {
            let dt = (rng.gen_range(DT_MIN.ln()..DT_MAX.ln())).exp();
            R::of(dt + (-(-dt).exp_m1()).ln())
        });
        let dt_b = store.insert(format!("{name}.dt.bias"), bias, Init::Custom("inverse softplus of log-uniform step"))?;
        let dt = Linear { w: dt_w, b: Some(dt_b), d_in: r, d_out: e };
        Ok(Self { a_log, x_dt, x_b, x_c, dt, state_dim: n })
    }

    /// `u: [L, E]` to `y: [L, E]`.
    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, u: Var) -> Result<Var> {
        let dt = self.x_dt.forward(g, u)?;
        let dt = self.dt.forward(g, dt)?;
        let delta = g.act(dt, Activation::Softplus);
        let b = self.x_b.forward(g, u)?;
        let c = self.x_c.forward(g, u)?;
        let a = g.param(self.a_log);
        let a = g.act(a, Activation::Exp);
        let a = g.affine(a, -1.0, 0.0);
        g.selective_scan(u, delta, a, b, c)
    }
}

/// One channel-compressed Mamba block.
#[derive(Clone, Debug)]
pub struct CcMambaBlock {
    pub cfg: CcMambaConfig,
    pub token_dim: usize,
    pub compress: Linear,
    pub norm_in: Norm,
    pub gate: Linear,
    pub in_proj: Linear,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub ssm: SsmParams,
    pub norm_out: Norm,
    pub mlp_up: Linear,
    pub mlp_down: Linear,
    pub expand_out: Linear,
}

impl CcMambaBlock {
    /// Block for tokens of width `token_dim` (`C p^3`).
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        token_dim: usize,
        cfg: CcMambaConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (t, e) = (cfg.compressed_dim, cfg.inner_dim());
        if t == 0 {
            return Err(Error::invalid("ccmamba", "compressed dim must be positive"));
        }
        let k = cfg.conv_width;
        Ok(Self {
            cfg,
            token_dim,
            compress: Linear::new(store, &format!("{name}.compress"), token_dim, t, true, rng)?,
            norm_in: Norm::new(store, &format!("{name}.norm_in"), NormKind::Layer, t, rng)?,
            gate: Linear::new(store, &format!("{name}.gate"), t, e, true, rng)?,
            in_proj: Linear::new(store, &format!("{name}.in_proj"), t, e, true, rng)?,
            conv_w: store.init(format!("{name}.conv.weight"), &[e, k], Init::FanInUniform { fan_in: k }, rng)?,
            conv_b: store.init(format!("{name}.conv.bias"), &[e], Init::Zeros, rng)?,
            ssm: SsmParams::new(store, &format!("{name}.ssm"), &cfg, rng)?,
            norm_out: Norm::new(store, &format!("{name}.norm_out"), NormKind::Layer, e, rng)?,
            mlp_up: Linear::new(store, &format!("{name}.mlp.0"), e, cfg.mlp_ratio * e, true, rng)?,
            mlp_down: Linear::new(store, &format!("{name}.mlp.1"), cfg.mlp_ratio * e, e, true, rng)?,
            expand_out: Linear::new(store, &format!("{name}.expand"), e, token_dim, true, rng)?,
        })
    }

    /// Linear down to `T` followed by layer norm.
    pub fn compress_tokens<R: Real>(&self, g: &mut Graph<'_, R>, tokens: Var) -> Result<Var> {
        let x = self.compress.forward(g, tokens)?;
        self.norm_in.forward(g, x)
    }

    fn ssm_branch<R: Real>(&self, g: &mut Graph<'_, R>, x: Var) -> Result<Var> {
        let x = self.in_proj.forward(g, x)?;
        let w = g.param(self.conv_w);
        let x = g.causal_conv1d(x, w)?;
        let shape = g.shape(x).to_vec();
        let b = g.param(self.conv_b);
        let b = g.expand(b, shape[0], 1, &shape)?;
        let x = g.add(x, b)?;
        let x = g.act(x, Activation::Silu);
        self.ssm.forward(g, x)
    }

    /// `[L, C p^3]` tokens to `[L, C p^3]` tokens.
    pub fn forward_tokens<R: Real>(&self, g: &mut Graph<'_, R>, tokens: Var) -> Result<Var> {
        let s = g.shape(tokens).to_vec();
        if s.len() != 2 || s[1] != self.token_dim {
            return Err(Error::shape("ccmamba", &s, &[s.first().copied().unwrap_or(0), self.token_dim]));
        }
        let x = self.compress_tokens(g, tokens)?;
        let f1 = self.gate.forward(g, x)?;
        let f1 = g.act(f1, Activation::Silu);
        let mut f2 = self.ssm_branch(g, x)?;
        if self.cfg.bidirectional {
            let len = s[0];
            let t = self.cfg.compressed_dim;
            let rev: Vec<usize> = (0..len).rev().flat_map(|r| r * t..(r + 1) * t).collect();
            let xr = g.gather(x, rev, &[len, t])?;
            let yr = self.ssm_branch(g, xr)?;
            let e = self.cfg.inner_dim();
            let back: Vec<usize> = (0..len).rev().flat_map(|r| r * e..(r + 1) * e).collect();
            let yb = g.gather(yr, back, &[len, e])?;
            f2 = g.add(f2, yb)?;
        }
        let y = g.mul(f1, f2)?;
        let y = self.norm_out.forward(g, y)?;
        let y = self.mlp_up.forward(g, y)?;
        let y = g.act(y, Activation::Gelu);
        let y = self.mlp_down.forward(g, y)?;
        self.expand_out.forward(g, y)
    }

    /// `[C, H, W, D]` to `[C, H, W, D]`.
    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, f: Var) -> Result<Var> {
        let (tokens, grid) = tokenize(g, f, self.cfg.token_size)?;
        let y = self.forward_tokens(g, tokens)?;
        detokenize(g, y, &grid)
    }
}

/// Residual stack `F <- F + block(F)`.
#[derive(Clone, Debug)]
pub struct CcMambaStack {
    pub blocks: Vec<CcMambaBlock>,
}

impl CcMambaStack {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        channels: usize,
        cfg: CcMambaConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let token_dim = channels * cfg.token_size.pow(3);
        let blocks = (0..cfg.layers)
            .map(|i| CcMambaBlock::new(store, &format!("{name}.{i}"), token_dim, cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, mut f: Var) -> Result<Var> {
        for b in &self.blocks {
            let y = b.forward(g, f)?;
            f = g.add(f, y)?;
        }
        Ok(f)
    }
}
