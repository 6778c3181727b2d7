//! The dual-branch network: a convolutional encoder/decoder on patches with
//! CaM fusion at every decoder stage, and a global branch (stem plus
//! ccMamba stack) on a resized copy of the whole image.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::cam::{CamBlock, CamConfig, CoordMode, GlobalContext};
use crate::ccmamba::{CcMambaConfig, CcMambaStack};
use crate::coords::{CropMode, PatchRecord};
use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, Var};
use crate::kernels::{axis_taps, AxisMap, ConvSpec};
use crate::nn::{Conv3d, ConvNormAct, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::volume::{BinaryMask3D, Volume};

pub const DICE_EPS: f64 = 1e-5;

/// Switches for the ablation lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub lfe: bool,
    pub glf: bool,
    pub global_loss: bool,
    /// Replace every training patch centre with a uniform random point.
    pub randomize_coords: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { lfe: true, glf: true, global_loss: true, randomize_coords: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CommaConfig {
    pub patch_shape: [usize; 3],
    pub global_resize: [usize; 3],
    pub base_channels: usize,
    pub stage_channels: [usize; 4],
    pub stem_channels: [usize; 2],
    /// Local token sizes from the deepest decoder stage to the shallowest.
    pub local_token_sizes: [usize; 4],
    pub global_token_size: usize,
    /// Compressed token width of ccMamba and the attention width of CaM.
    pub token_dim: usize,
    pub mamba_layers: usize,
    pub bidirectional: bool,
    pub lambda: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub grad_clip: f64,
    /// Share of patches forced to contain foreground.
    pub foreground_fraction: f64,
    pub overlap: f64,
    pub attention_softmax: bool,
    pub coord_mode: CoordMode,
    pub crop_mode: CropMode,
    pub ablation: Ablation,
    pub seed: u64,
    /// Validate every this many iterations; 0 disables.
    pub val_every: usize,
    pub checkpoint_every: usize,
    /// Stop once validation Dice reaches this value.
    pub target_dice: Option<f64>,
}

impl CommaConfig {
    /// Full-size configuration.
    pub fn paper() -> Self {
        Self {
            patch_shape: [96; 3],
            global_resize: [256, 256, 96],
            base_channels: 32,
            stage_channels: [64, 128, 256, 320],
            stem_channels: [16, 32],
            local_token_sizes: [1, 2, 3, 6],
            global_token_size: 8,
            token_dim: 32,
            mamba_layers: 4,
            bidirectional: false,
            lambda: 0.25,
            iterations: 25_000,
            batch_size: 2,
            lr: 0.01,
            momentum: 0.9,
            poly_power: 0.9,
            grad_clip: 12.0,
            foreground_fraction: 0.5,
            overlap: 0.5,
            attention_softmax: true,
            coord_mode: CoordMode::Footprint,
            crop_mode: CropMode::Footprint,
            ablation: Ablation::default(),
            seed: 0,
            val_every: 250,
            checkpoint_every: 1000,
            target_dice: None,
        }
    }

    /// Quarter-width model on 32^3 patches for CPU runs.
    pub fn desk() -> Self {
        Self {
            patch_shape: [32; 3],
            global_resize: [64, 64, 32],
            base_channels: 8,
            stage_channels: [16, 32, 64, 80],
            stem_channels: [4, 8],
            local_token_sizes: [1, 2, 4, 8],
            iterations: 2000,
            val_every: 100,
            checkpoint_every: 500,
            ..Self::paper()
        }
    }

    /// Smallest configuration exercising every component.
    pub fn toy() -> Self {
        Self {
            patch_shape: [16; 3],
            global_resize: [16, 16, 8],
            base_channels: 2,
            stage_channels: [2, 3, 3, 4],
            stem_channels: [2, 2],
            local_token_sizes: [1, 1, 2, 4],
            global_token_size: 4,
            token_dim: 8,
            mamba_layers: 1,
            iterations: 20,
            val_every: 0,
            checkpoint_every: 0,
            ..Self::desk()
        }
    }

    /// Extent of the global feature map after the stem.
    pub fn global_grid(&self) -> [usize; 3] {
        let [h, w, d] = self.global_resize;
        [h.div_ceil(2), w.div_ceil(2), d]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("config", msg));
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.patch_shape.iter().any(|&e| e == 0 || e % 16 != 0) {
            return bad(format!("patch extents {:?} must be multiples of 16", self.patch_shape));
        }
        for (d, &p) in self.local_token_sizes.iter().enumerate() {
            let ext = self.patch_shape.map(|e| e >> (3 - d));
            if p == 0 || ext.iter().any(|&e| e % p != 0) {
                return bad(format!("local token size {p} does not divide decoder extent {ext:?}"));
            }
        }
        let grid = self.global_grid();
        if !self.global_resize[0].is_multiple_of(2) || !self.global_resize[1].is_multiple_of(2) {
            return bad(format!("global resize {:?} must be even in x and y", self.global_resize));
        }
        if grid.iter().any(|&e| e % self.global_token_size != 0) {
            return bad(format!("global token size {} does not divide {grid:?}", self.global_token_size));
        }
        if self.batch_size == 0 || self.token_dim == 0 {
            return bad("batch size and token dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return bad(format!("overlap {} outside [0, 1)", self.overlap));
        }
        Ok(())
    }

    pub fn cam(&self) -> CamConfig {
        CamConfig {
            lfe: self.ablation.lfe,
            glf: self.ablation.glf,
            softmax: self.attention_softmax,
            coord_mode: self.coord_mode,
            crop_mode: self.crop_mode,
            attn_dim: self.token_dim,
            global_token_size: self.global_token_size,
            ..CamConfig::default()
        }
    }

    pub fn mamba(&self) -> CcMambaConfig {
        CcMambaConfig {
            token_size: self.global_token_size,
            compressed_dim: self.token_dim,
            layers: self.mamba_layers,
            bidirectional: self.bidirectional,
            ..CcMambaConfig::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub conv: ConvNormAct,
    pub cam: CamBlock,
}

/// Network structure; weights live in a [`ParamStore`].
#[derive(Debug)]
pub struct CommaNet {
    pub cfg: CommaConfig,
    pub stem_in: ConvNormAct,
    pub encoder: Vec<ConvNormAct>,
    pub decoder: Vec<DecoderStage>,
    pub head: Conv3d,
    pub global_stem: [ConvNormAct; 2],
    pub mamba: CcMambaStack,
    pub global_head: Conv3d,
    global_calls: AtomicUsize,
}

/// Output of the global branch.
#[derive(Clone, Copy, Debug)]
pub struct GlobalOutput {
    pub features: Var,
    pub logits: Var,
}

fn upsample2<R: Real>(g: &mut Graph<'_, R>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let taps = std::array::from_fn(|a| axis_taps(s[a + 1], 2 * s[a + 1], AxisMap::Centers));
    g.resample(x, taps)
}

impl CommaNet {
    pub fn new<R: Real>(cfg: &CommaConfig, store: &mut ParamStore<R>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let k3 = ConvSpec::same(3);
        let stem_in = ConvNormAct::new(store, "local.stem", 1, cfg.base_channels, k3, rng)?;
        let mut encoder = Vec::new();
        let mut prev = cfg.base_channels;
        for (s, &c) in cfg.stage_channels.iter().enumerate() {
            encoder.push(ConvNormAct::new(store, &format!("local.enc.{s}"), prev, c, k3, rng)?);
            prev = c;
        }
        let global_channels = cfg.stem_channels[1];
        let skips = [cfg.base_channels, cfg.stage_channels[0], cfg.stage_channels[1], cfg.stage_channels[2]];
        let cam_cfg = cfg.cam();
        let mut decoder = Vec::new();
        for d in 0..4 {
            let skip = skips[3 - d];
            let conv = ConvNormAct::new(store, &format!("local.dec.{d}"), prev + skip, skip, k3, rng)?;
            let cam = CamBlock::new(
                store,
                &format!("local.cam.{d}"),
                skip,
                global_channels,
                cfg.local_token_sizes[d],
                cam_cfg,
                rng,
            )?;
            decoder.push(DecoderStage { conv, cam });
            prev = skip;
        }
        let head = Conv3d::new(store, "local.head", cfg.base_channels, 1, ConvSpec::pointwise(), rng)?;
        let stride = ConvSpec { kernel: 3, stride: [2, 2, 1], padding: 1 };
        let global_stem = [
            ConvNormAct::new(store, "global.stem.0", 1, cfg.stem_channels[0], stride, rng)?,
            ConvNormAct::new(store, "global.stem.1", cfg.stem_channels[0], global_channels, k3, rng)?,
        ];
        let mamba = CcMambaStack::new(store, "global.mamba", global_channels, cfg.mamba(), rng)?;
        let global_head = Conv3d::new(store, "global.head", global_channels, 1, ConvSpec::pointwise(), rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            stem_in,
            encoder,
            decoder,
            head,
            global_stem,
            mamba,
            global_head,
            global_calls: AtomicUsize::new(0),
        })
    }

    /// Times the global branch has run.
    pub fn global_calls(&self) -> usize {
        self.global_calls.load(Ordering::Relaxed)
    }

    /// `resized: [1, H_G, W_G, D_G]`.
    pub fn global_branch<R: Real>(&self, g: &mut Graph<'_, R>, resized: Var) -> Result<GlobalOutput> {
        self.global_calls.fetch_add(1, Ordering::Relaxed);
        let x = self.global_stem[0].forward(g, resized)?;
        let x = self.global_stem[1].forward(g, x)?;
        let features = self.mamba.forward(g, x)?;
        let logits = self.global_head.forward(g, features)?;
        Ok(GlobalOutput { features, logits })
    }

    /// Skip features from full resolution down, then the bottleneck.
    pub fn encode<R: Real>(&self, g: &mut Graph<'_, R>, x: Var) -> Result<Vec<Var>> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1..].iter().any(|&e| e % 16 != 0) {
            return Err(Error::invalid("local_encoder", format!("extents {s:?} must be multiples of 16")));
        }
        let mut feats = vec![self.stem_in.forward(g, x)?];
        for stage in &self.encoder {
            let pooled = g.maxpool2(*feats.last().expect("stem output"))?;
            feats.push(stage.forward(g, pooled)?);
        }
        Ok(feats)
    }

    pub fn decode<R: Real>(&self, g: &mut Graph<'_, R>, feats: &[Var], ctx: &GlobalContext<'_>) -> Result<Var> {
        let mut x = feats[4];
        for (d, stage) in self.decoder.iter().enumerate() {
            let up = upsample2(g, x)?;
            let cat = g.concat(&[up, feats[3 - d]])?;
            let y = stage.conv.forward(g, cat)?;
            x = stage.cam.forward(g, y, ctx)?;
        }
        self.head.forward(g, x)
    }

    /// Patch logits `[1, h, w, d]` for `patch: [1, h, w, d]`.
    pub fn local_branch<R: Real>(&self, g: &mut Graph<'_, R>, patch: Var, ctx: &GlobalContext<'_>) -> Result<Var> {
        let feats = self.encode(g, patch)?;
        self.decode(g, &feats, ctx)
    }
}

/// Soft Dice on sigmoid probabilities plus binary cross-entropy on logits.
pub fn seg_loss<R: Real>(g: &mut Graph<'_, R>, logits: Var, target: Var) -> Result<Var> {
    if g.shape(logits) != g.shape(target) {
        return Err(Error::shape("seg_loss", g.shape(logits), g.shape(target)));
    }
    let p = g.act(logits, Activation::Sigmoid);
    let dice = g.dice_loss(p, target, DICE_EPS)?;
    let bce = g.bce_with_logits(logits, target)?;
    g.add(dice, bce)
}

/// `L_L + lambda L_G`
pub fn total_loss<R: Real>(g: &mut Graph<'_, R>, local: Var, global: Var, lambda: f64) -> Result<Var> {
    let scaled = g.affine(global, lambda, 0.0);
    g.add(local, scaled)
}

/// Trilinear resize of a volume to `target`, aligned on voxel centres.
pub fn resize_volume(v: &Volume, target: [usize; 3]) -> Tensor<f32> {
    let ext = v.extents();
    let taps = std::array::from_fn(|a| axis_taps(ext[a], target[a], AxisMap::Centers));
    let data = crate::kernels::resample::resample_forward(v.data(), 1, ext, &taps);
    Tensor::new(&[1, target[0], target[1], target[2]], data).expect("resampled extents")
}

/// Nearest-neighbour resize of a mask to `target` as a `[1, ...]` tensor.
pub fn downsample_mask<R: Real>(m: &BinaryMask3D, target: [usize; 3]) -> Tensor<R> {
    let ext = m.extents();
    let pick = |a: usize, j: usize| ((j as f64 + 0.5) * ext[a] as f64 / target[a] as f64) as usize;
    let mut data = Vec::with_capacity(target.iter().product());
    for i in 0..target[0] {
        for j in 0..target[1] {
            for k in 0..target[2] {
                data.push(if m.get(pick(0, i), pick(1, j), pick(2, k)) { R::one() } else { R::zero() });
            }
        }
    }
    Tensor::new(&[1, target[0], target[1], target[2]], data).expect("target extents")
}

/// One patch of a batch with its source case.
#[derive(Clone, Debug)]
pub struct BatchSample<R> {
    pub patch: PatchRecord,
    /// `[1, h, w, d]`
    pub image: Tensor<R>,
    pub target: Tensor<R>,
    /// Index into the batch's global inputs.
    pub case: usize,
    pub full_extent: [usize; 3],
}

/// Losses of one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Losses {
    pub total: f64,
    pub local: f64,
    pub global: f64,
}

/// Global input of one case: the resized image and its mask target.
#[derive(Clone, Debug)]
pub struct GlobalInput<R> {
    pub resized: Tensor<R>,
    pub target: Tensor<R>,
}

/// Builds the batch loss on `g`. Returns the loss node and its parts.
pub fn batch_loss<R: Real>(
    net: &CommaNet,
    g: &mut Graph<'_, R>,
    globals: &[GlobalInput<R>],
    samples: &[BatchSample<R>],
) -> Result<(Var, Var, Var)> {
    let cfg = &net.cfg;
    let mut outs: Vec<Option<(GlobalOutput, Var)>> = vec![None; globals.len()];
    let mut local_terms = Vec::new();
    let mut global_terms = Vec::new();
    if samples.is_empty() {
        return Err(Error::invalid("batch_loss", "empty batch"));
    }
    for s in samples {
        let case = s.case;
        if outs[case].is_none() {
            let x = g.input(globals[case].resized.clone());
            let out = net.global_branch(g, x)?;
            let t = g.input(globals[case].target.clone());
            let lg = seg_loss(g, out.logits, t)?;
            outs[case] = Some((out, lg));
        }
        let (out, lg) = outs[case].expect("computed above");
        let ctx = GlobalContext { f_g: out.features, patch: &s.patch, image: s.full_extent };
        let x = g.input(s.image.clone());
        let logits = net.local_branch(g, x, &ctx)?;
        let t = g.input(s.target.clone());
        local_terms.push(seg_loss(g, logits, t)?);
        global_terms.push(lg);
    }
    let mean = |g: &mut Graph<'_, R>, terms: &[Var]| -> Result<Var> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        Ok(g.affine(acc, 1.0 / terms.len() as f64, 0.0))
    };
    let local = mean(g, &local_terms)?;
    let global = mean(g, &global_terms)?;
    let lambda = if cfg.ablation.global_loss { cfg.lambda } else { 0.0 };
    let total = total_loss(g, local, global, lambda)?;
    Ok((total, local, global))
}
