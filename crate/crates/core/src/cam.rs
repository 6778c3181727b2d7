//! Coordinate-aware modulated fusion of a local decoder feature with the
//! global feature map.
//!
//! Two paths run side by side. Local-feature enhancement lets local tokens
//! attend to global tokens, both tagged with the same positional embedding of
//! their image coordinates. Global-local fusion blends the local feature with
//! the global feature cropped at the patch location, gated by channel,
//! spatial and pixel masks. A pointwise convolution merges both paths.

use rand::Rng;

use crate::ccmamba::{detokenize, tokenize};
use crate::coords::{
    crop_global_at, token_coords_footprint, token_coords_global, token_coords_local, CropMode, PatchRecord, PosEmbedding,
};
use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, Reduce, Var};
use crate::kernels::ConvSpec;
use crate::nn::{Conv3d, Linear, ParamStore};
use crate::real::Real;
use crate::tensor::numel;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CoordMode {
    /// Token footprints measured in image voxels.
    #[default]
    Footprint,
    /// Local extents and token sizes taken in global-feature voxels as is.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CamConfig {
    pub lfe: bool,
    pub glf: bool,
    /// Row-wise softmax over attention scores.
    pub softmax: bool,
    pub coord_mode: CoordMode,
    pub crop_mode: CropMode,
    pub attn_dim: usize,
    pub global_token_size: usize,
    pub mask_kernel: usize,
    pub reduction: usize,
}

impl Default for CamConfig {
    fn default() -> Self {
        Self {
            lfe: true,
            glf: true,
            softmax: true,
            coord_mode: CoordMode::Footprint,
            crop_mode: CropMode::Footprint,
            attn_dim: 32,
            global_token_size: 8,
            mask_kernel: 7,
            reduction: 4,
        }
    }
}

/// Where the current patch sits in the image, and the global feature map.
#[derive(Clone, Copy, Debug)]
pub struct GlobalContext<'a> {
    pub f_g: Var,
    pub patch: &'a PatchRecord,
    /// Full image extents.
    pub image: [usize; 3],
}

fn spatial(g: &Graph<'_, impl Real>, x: Var) -> [usize; 3] {
    let s = g.shape(x);
    [s[1], s[2], s[3]]
}

fn transpose<R: Real>(g: &mut Graph<'_, R>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (m, n) = (s[0], s[1]);
    let idx = (0..n).flat_map(|j| (0..m).map(move |i| i * n + j)).collect();
    g.gather(x, idx, &[n, m])
}

/// Cross-attention of local tokens onto global tokens.
#[derive(Clone, Debug)]
pub struct CoordLfe {
    pub local_in: Linear,
    pub global_in: Linear,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub local_token_size: usize,
}

impl CoordLfe {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        channels: usize,
        global_channels: usize,
        local_token_size: usize,
        cfg: &CamConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let t = cfg.attn_dim;
        let dl = channels * local_token_size.pow(3);
        let dg = global_channels * cfg.global_token_size.pow(3);
        Ok(Self {
            local_in: Linear::new(store, &format!("{name}.local_in"), dl, t, true, rng)?,
            global_in: Linear::new(store, &format!("{name}.global_in"), dg, t, true, rng)?,
            q: Linear::new(store, &format!("{name}.q"), t, t, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), t, t, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), t, t, true, rng)?,
            out: Linear::new(store, &format!("{name}.out"), t, dl, true, rng)?,
            local_token_size,
        })
    }

    /// Row-stochastic attention weights `[L_L, L_G]` (before `V`), and the
    /// attended local tokens `[L_L, T]`.
    pub fn attend<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        local: Var,
        global: Var,
        softmax: bool,
    ) -> Result<(Var, Var)> {
        let (tl, tg) = (g.shape(local)[1], g.shape(global)[1]);
        if tl != tg {
            return Err(Error::shape("coord_lfe", g.shape(local), g.shape(global)));
        }
        let q = self.q.forward(g, local)?;
        let k = self.k.forward(g, global)?;
        let v = self.v.forward(g, global)?;
        let kt = transpose(g, k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.affine(scores, 1.0 / (tl as f64).sqrt(), 0.0);
        let weights = if softmax { g.softmax(scores, 1)? } else { scores };
        let out = g.matmul(weights, v)?;
        Ok((weights, out))
    }

    pub fn forward<R: Real>(
        &self,
        g: &mut Graph<'_, R>,
        f_l: Var,
        ctx: &GlobalContext<'_>,
        pos: &PosEmbedding,
        cfg: &CamConfig,
    ) -> Result<Var> {
        let p = self.local_token_size;
        let local_shape = spatial(g, f_l);
        let global_shape = spatial(g, ctx.f_g);
        let (lt, grid) = tokenize(g, f_l, p)?;
        let (gt, _) = tokenize(g, ctx.f_g, cfg.global_token_size)?;
        let local_coords = match cfg.coord_mode {
            CoordMode::Footprint => {
                token_coords_footprint(ctx.patch.center, ctx.patch.shape, ctx.image, local_shape, p)?
            }
            CoordMode::Literal => token_coords_local(ctx.patch.center, global_shape, local_shape, p)?,
        };
        let global_coords = token_coords_global(global_shape, cfg.global_token_size)?;

        let l = self.local_in.forward(g, lt)?;
        let pe = pos.forward(g, &local_coords)?;
        let l = g.add(l, pe)?;
        let gg = self.global_in.forward(g, gt)?;
        let pe = pos.forward(g, &global_coords)?;
        let gg = g.add(gg, pe)?;

        let (_, att) = self.attend(g, l, gg, cfg.softmax)?;
        let y = self.out.forward(g, att)?;
        detokenize(g, y, &grid)
    }
}

/// Global-local fusion through channel, spatial and pixel masks.
#[derive(Clone, Debug)]
pub struct CoordGlf {
    /// Maps global channels onto local channels.
    pub adapter: Conv3d,
    pub channel_fc1: Linear,
    pub channel_fc2: Linear,
    pub spatial_conv: Conv3d,
    pub pixel_conv: Conv3d,
    pub fuse: Conv3d,
}

impl CoordGlf {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        channels: usize,
        global_channels: usize,
        cfg: &CamConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = (channels / cfg.reduction).max(1);
        let k = ConvSpec::same(cfg.mask_kernel);
        Ok(Self {
            adapter: Conv3d::new(store, &format!("{name}.adapter"), global_channels, channels, ConvSpec::pointwise(), rng)?,
            channel_fc1: Linear::new(store, &format!("{name}.channel.0"), channels, hidden, true, rng)?,
            channel_fc2: Linear::new(store, &format!("{name}.channel.1"), hidden, channels, true, rng)?,
            spatial_conv: Conv3d::new(store, &format!("{name}.spatial"), 2, 1, k, rng)?,
            pixel_conv: Conv3d::new(store, &format!("{name}.pixel"), 2 * channels, 1, k, rng)?,
            fuse: Conv3d::new(store, &format!("{name}.fuse"), channels, channels, ConvSpec::same(3), rng)?,
        })
    }

    /// `M_c = W2 ReLU(W1 pool(F))`, shape `[C]`.
    pub fn channel_attention<R: Real>(&self, g: &mut Graph<'_, R>, f: Var) -> Result<Var> {
        let s = g.shape(f).to_vec();
        let flat = g.reshape(f, &[s[0], numel(&s[1..])])?;
        let pooled = g.reduce(flat, 1, Reduce::Mean)?;
        let pooled = g.reshape(pooled, &[1, s[0]])?;
        let h = self.channel_fc1.forward(g, pooled)?;
        let h = g.act(h, Activation::Relu);
        let m = self.channel_fc2.forward(g, h)?;
        g.reshape(m, &[s[0]])
    }

    /// `M_s = sigmoid(conv([mean_c F, max_c F]))`, shape `[1, h, w, d]`.
    pub fn spatial_attention<R: Real>(&self, g: &mut Graph<'_, R>, f: Var) -> Result<Var> {
        let s = g.shape(f).to_vec();
        let flat = g.reshape(f, &[s[0], numel(&s[1..])])?;
        let mean = g.reduce(flat, 0, Reduce::Mean)?;
        let max = g.reduce(flat, 0, Reduce::Max)?;
        let stacked = g.concat(&[mean, max])?;
        let stacked = g.reshape(stacked, &[2, s[1], s[2], s[3]])?;
        let m = self.spatial_conv.forward(g, stacked)?;
        Ok(g.act(m, Activation::Sigmoid))
    }

    /// `M_p = sigmoid(conv([M_c + M_s, F]))`, shape `[1, h, w, d]`.
    pub fn pixel_attention<R: Real>(&self, g: &mut Graph<'_, R>, m_c: Var, m_s: Var, f: Var) -> Result<Var> {
        let s = g.shape(f).to_vec();
        let (c, n) = (s[0], numel(&s[1..]));
        let mc = g.expand(m_c, 1, n, &s)?;
        let ms = g.expand(m_s, c, 1, &s)?;
        let m = g.add(mc, ms)?;
        let x = g.concat(&[m, f])?;
        let p = self.pixel_conv.forward(g, x)?;
        Ok(g.act(p, Activation::Sigmoid))
    }

    /// `Conv(M_p fpG + (1 - M_p) fL) + fL` for an already cropped `fpG`.
    pub fn fuse<R: Real>(&self, g: &mut Graph<'_, R>, f_l: Var, f_pg: Var) -> Result<Var> {
        if g.shape(f_l) != g.shape(f_pg) {
            return Err(Error::shape("coord_glf", g.shape(f_l), g.shape(f_pg)));
        }
        let f = g.add(f_l, f_pg)?;
        let m_c = self.channel_attention(g, f)?;
        let m_s = self.spatial_attention(g, f)?;
        let m_p = self.pixel_attention(g, m_c, m_s, f)?;
        let blend = self.blend(g, m_p, f_l, f_pg)?;
        let y = self.fuse.forward(g, blend)?;
        g.add(y, f_l)
    }

    /// `M_p fpG + (1 - M_p) fL` with `M_p` broadcast over channels.
    pub fn blend<R: Real>(&self, g: &mut Graph<'_, R>, m_p: Var, f_l: Var, f_pg: Var) -> Result<Var> {
        let s = g.shape(f_l).to_vec();
        let mp = g.expand(m_p, s[0], 1, &s)?;
        let diff = g.sub(f_pg, f_l)?;
        let gated = g.mul(mp, diff)?;
        g.add(f_l, gated)
    }

    /// Global crop at the patch location mapped to local channels.
    pub fn crop<R: Real>(&self, g: &mut Graph<'_, R>, f_l: Var, ctx: &GlobalContext<'_>, cfg: &CamConfig) -> Result<Var> {
        let target = spatial(g, f_l);
        let half = ctx.patch.half_extent(ctx.image);
        let crop = crop_global_at(g, ctx.f_g, ctx.patch.center, half, target, cfg.crop_mode)?;
        self.adapter.forward(g, crop)
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, f_l: Var, ctx: &GlobalContext<'_>, cfg: &CamConfig) -> Result<Var> {
        let f_pg = self.crop(g, f_l, ctx, cfg)?;
        self.fuse(g, f_l, f_pg)
    }
}

/// One CaM block of a decoder stage.
#[derive(Clone, Debug)]
pub struct CamBlock {
    pub cfg: CamConfig,
    pub pos: PosEmbedding,
    pub lfe: Option<CoordLfe>,
    pub glf: Option<CoordGlf>,
    pub merge: Option<Conv3d>,
}

impl CamBlock {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        channels: usize,
        global_channels: usize,
        local_token_size: usize,
        cfg: CamConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let pos = PosEmbedding::new(store, &format!("{name}.pos"), cfg.attn_dim, rng)?;
        let lfe = if cfg.lfe {
            Some(CoordLfe::new(store, &format!("{name}.lfe"), channels, global_channels, local_token_size, &cfg, rng)?)
        } else {
            None
        };
        let glf = if cfg.glf {
            Some(CoordGlf::new(store, &format!("{name}.glf"), channels, global_channels, &cfg, rng)?)
        } else {
            None
        };
        let merge = if cfg.lfe || cfg.glf {
            Some(Conv3d::new(store, &format!("{name}.merge"), 2 * channels, channels, ConvSpec::pointwise(), rng)?)
        } else {
            None
        };
        Ok(Self { cfg, pos, lfe, glf, merge })
    }

    /// `Conv1([LFE(fL), GLF(fL)])`; a disabled path contributes `fL`, and
    /// with both disabled the block passes `fL` through.
    pub fn forward<R: Real>(&self, g: &mut Graph<'_, R>, f_l: Var, ctx: &GlobalContext<'_>) -> Result<Var> {
        let Some(merge) = &self.merge else { return Ok(f_l) };
        let a = match &self.lfe {
            Some(lfe) => lfe.forward(g, f_l, ctx, &self.pos, &self.cfg)?,
            None => f_l,
        };
        let b = match &self.glf {
            Some(glf) => glf.forward(g, f_l, ctx, &self.cfg)?,
            None => f_l,
        };
        let x = g.concat(&[a, b])?;
        merge.forward(g, x)
    }
}
