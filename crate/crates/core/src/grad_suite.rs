//! The full finite-difference suite: every primitive and every block, over
//! many seeds, at `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cam::{CamBlock, CamConfig, CoordGlf, CoordLfe, GlobalContext};
use crate::ccmamba::{CcMambaBlock, CcMambaConfig};
use crate::coords::{PatchRecord, PosEmbedding};
use crate::error::Result;
use crate::gradcheck::{check, random_tensor, Mode, COMPOSED_TOL, PRIMITIVE_TOL};
use crate::graph::{Activation, Graph, Reduce, Var};
use crate::kernels::{axis_taps, AxisMap, ConvSpec};
use crate::model::{seg_loss, total_loss, CommaConfig, CommaNet};
use crate::nn::{ConvNormAct, Linear, Norm, NormKind, ParamStore};
use crate::tensor::Tensor;

/// Worst relative error of one check over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub tolerance: f64,
    pub worst: f64,
    pub seeds: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

type Build = fn(&mut ParamStore<f64>, &mut ChaCha8Rng) -> Result<Case>;
type Forward = Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    mode: Mode,
    f: Forward,
}

fn inputs(shapes: &[&[usize]], rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    shapes.iter().map(|s| random_tensor(s, rng)).collect()
}

fn elementwise(shapes: &[&[usize]], rng: &mut ChaCha8Rng, f: Forward) -> Result<Case> {
    Ok(Case { inputs: inputs(shapes, rng), mode: Mode::Elementwise, f })
}

fn run(name: &'static str, tolerance: f64, seeds: usize, build: Build) -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let case = build(&mut store, &mut rng)?;
        let err = check(&store, &case.inputs, case.mode, seed, &case.f)?;
        worst = worst.max(err);
    }
    Ok(CheckOutcome { name, tolerance, worst, seeds })
}

fn positive(t: &mut Tensor<f64>) {
    t.data_mut().iter_mut().for_each(|v| *v = 0.05 + v.abs() * 0.3);
}

const PRIMITIVES: &[(&str, Build)] = &[
    ("matmul", |_, r| elementwise(&[&[3, 4], &[4, 5]], r, Box::new(|g, v| g.matmul(v[0], v[1])))),
    ("add_mul", |_, r| {
        elementwise(&[&[2, 3], &[2, 3]], r, Box::new(|g, v| {
            let s = g.add(v[0], v[1])?;
            g.mul(s, v[1])
        }))
    }),
    ("conv3d", |_, r| {
        elementwise(&[&[2, 4, 4, 3], &[3, 2, 3, 3, 3]], r, Box::new(|g, v| g.conv3d(v[0], v[1], ConvSpec::same(3))))
    }),
    ("conv3d_strided", |_, r| {
        let spec = ConvSpec { kernel: 3, stride: [2, 2, 1], padding: 1 };
        elementwise(&[&[1, 4, 4, 3], &[2, 1, 3, 3, 3]], r, Box::new(move |g, v| g.conv3d(v[0], v[1], spec)))
    }),
    ("activations", |_, r| {
        elementwise(&[&[12]], r, Box::new(|g, v| {
            let mut parts = Vec::new();
            for a in [
                Activation::Relu,
                Activation::LeakyRelu(0.01),
                Activation::Silu,
                Activation::Gelu,
                Activation::Sigmoid,
                Activation::Softplus,
                Activation::Exp,
            ] {
                parts.push(g.act(v[0], a));
            }
            g.concat(&parts)
        }))
    }),
    ("softmax", |_, r| elementwise(&[&[3, 5]], r, Box::new(|g, v| g.softmax(v[0], 1)))),
    ("normalize_rows", |_, r| elementwise(&[&[4, 6]], r, Box::new(|g, v| g.normalize_rows(v[0], 6, 1e-5)))),
    ("maxpool2", |_, r| elementwise(&[&[2, 4, 4, 2]], r, Box::new(|g, v| g.maxpool2(v[0])))),
    ("resample", |_, r| {
        elementwise(&[&[2, 3, 4, 2]], r, Box::new(|g, v| {
            let taps = [
                axis_taps(3, 5, AxisMap::Centers),
                axis_taps(4, 2, AxisMap::Centers),
                axis_taps(2, 3, AxisMap::Affine { scale: 0.7, offset: -0.2 }),
            ];
            g.resample(v[0], taps)
        }))
    }),
    ("gather_reshape", |_, r| {
        elementwise(&[&[3, 4]], r, Box::new(|g, v| {
            let y = g.gather(v[0], vec![5, 0, usize::MAX, 11, 5, 2], &[2, 3])?;
            g.reshape(y, &[6])
        }))
    }),
    ("reduce", |_, r| {
        elementwise(&[&[3, 5]], r, Box::new(|g, v| {
            let a = g.reduce(v[0], 0, Reduce::Mean)?;
            let b = g.reduce(v[0], 1, Reduce::Max)?;
            g.concat(&[a, b])
        }))
    }),
    ("expand_affine", |_, r| {
        elementwise(&[&[3]], r, Box::new(|g, v| {
            let e = g.expand(v[0], 2, 4, &[2, 3, 4])?;
            Ok(g.affine(e, -1.5, 0.25))
        }))
    }),
    ("selective_scan", |_, r| {
        let mut ins = inputs(&[&[6, 3], &[6, 3], &[3, 4], &[6, 4], &[6, 4]], r);
        positive(&mut ins[1]);
        ins[2].data_mut().iter_mut().for_each(|v| *v = -(0.1 + v.abs()));
        Ok(Case { inputs: ins, mode: Mode::Elementwise, f: Box::new(|g, v| g.selective_scan(v[0], v[1], v[2], v[3], v[4])) })
    }),
    ("causal_conv1d", |_, r| elementwise(&[&[7, 3], &[3, 4]], r, Box::new(|g, v| g.causal_conv1d(v[0], v[1])))),
    ("pos_embed", |_, r| elementwise(&[&[5, 3], &[3, 4], &[4]], r, Box::new(|g, v| g.pos_embed(v[0], v[1], v[2])))),
    ("dice_loss", |_, r| {
        let mut ins = inputs(&[&[10], &[10]], r);
        positive(&mut ins[0]);
        positive(&mut ins[1]);
        Ok(Case { inputs: ins, mode: Mode::Elementwise, f: Box::new(|g, v| g.dice_loss(v[0], v[1], 1e-5)) })
    }),
    ("bce_with_logits", |_, r| {
        let mut ins = inputs(&[&[10], &[10]], r);
        positive(&mut ins[1]);
        Ok(Case { inputs: ins, mode: Mode::Elementwise, f: Box::new(|g, v| g.bce_with_logits(v[0], v[1])) })
    }),
];

fn lfe_cfg() -> CamConfig {
    CamConfig { attn_dim: 4, global_token_size: 2, mask_kernel: 3, reduction: 2, ..CamConfig::default() }
}

/// A patch of extent 8 at a fixed offset inside a 16x16x12 image.
fn patch() -> PatchRecord {
    PatchRecord::new([4, 2, 3], [8, 8, 8], [16, 16, 12])
}

const BLOCKS: &[(&str, Build)] = &[
    ("linear", |s, r| {
        let l = Linear::new(s, "l", 4, 3, true, r)?;
        elementwise(&[&[5, 4]], r, Box::new(move |g, v| l.forward(g, v[0])))
    }),
    ("layer_norm", |s, r| {
        let n = Norm::new(s, "n", NormKind::Layer, 6, r)?;
        randomize(s, r);
        elementwise(&[&[3, 6]], r, Box::new(move |g, v| n.forward(g, v[0])))
    }),
    ("conv_norm_act", |s, r| {
        let c = ConvNormAct::new(s, "c", 2, 3, ConvSpec::same(3), r)?;
        randomize(s, r);
        elementwise(&[&[2, 4, 3, 3]], r, Box::new(move |g, v| c.forward(g, v[0])))
    }),
    ("ccmamba_block", |s, r| {
        let cfg = CcMambaConfig { token_size: 2, compressed_dim: 8, state_dim: 4, ..CcMambaConfig::default() };
        let b = CcMambaBlock::new(s, "m", 4 * 8, cfg, r)?;
        randomize_small(s, r);
        Ok(Case { inputs: inputs(&[&[4, 4, 4, 4]], r), mode: Mode::Directions(6), f: Box::new(move |g, v| b.forward(g, v[0])) })
    }),
    ("coord_lfe", |s, r| {
        let cfg = lfe_cfg();
        let pos = PosEmbedding::new(s, "pos", cfg.attn_dim, r)?;
        let lfe = CoordLfe::new(s, "lfe", 2, 3, 2, &cfg, r)?;
        randomize_small(s, r);
        let rec = patch();
        Ok(Case {
            inputs: inputs(&[&[2, 4, 4, 4], &[3, 4, 4, 4]], r),
            mode: Mode::Directions(6),
            f: Box::new(move |g, v| {
                let ctx = GlobalContext { f_g: v[1], patch: &rec, image: [16, 16, 12] };
                lfe.forward(g, v[0], &ctx, &pos, &cfg)
            }),
        })
    }),
    ("coord_glf", |s, r| {
        let cfg = lfe_cfg();
        let glf = CoordGlf::new(s, "glf", 2, 3, &cfg, r)?;
        randomize_small(s, r);
        let rec = patch();
        Ok(Case {
            inputs: inputs(&[&[2, 4, 4, 4], &[3, 6, 6, 4]], r),
            mode: Mode::Directions(6),
            f: Box::new(move |g, v| {
                let ctx = GlobalContext { f_g: v[1], patch: &rec, image: [16, 16, 12] };
                glf.forward(g, v[0], &ctx, &cfg)
            }),
        })
    }),
    ("cam_block", |s, r| {
        let cam = CamBlock::new(s, "cam", 2, 3, 2, lfe_cfg(), r)?;
        randomize_small(s, r);
        let rec = patch();
        Ok(Case {
            inputs: inputs(&[&[2, 4, 4, 4], &[3, 4, 4, 4]], r),
            mode: Mode::Directions(6),
            f: Box::new(move |g, v| {
                let ctx = GlobalContext { f_g: v[1], patch: &rec, image: [16, 16, 12] };
                cam.forward(g, v[0], &ctx)
            }),
        })
    }),
    ("losses", |_, r| {
        let mut ins = inputs(&[&[1, 3, 3, 2], &[1, 3, 3, 2], &[1, 2, 2, 2], &[1, 2, 2, 2]], r);
        positive(&mut ins[1]);
        positive(&mut ins[3]);
        Ok(Case {
            inputs: ins,
            mode: Mode::Elementwise,
            f: Box::new(|g, v| {
                let l = seg_loss(g, v[0], v[1])?;
                let gl = seg_loss(g, v[2], v[3])?;
                total_loss(g, l, gl, 0.25)
            }),
        })
    }),
    ("comma_toy", |s, r| {
        let cfg = CommaConfig::toy();
        let net = CommaNet::new(&cfg, s, r)?;
        randomize_small(s, r);
        let full = [32, 24, 20];
        let rec = PatchRecord::new([8, 4, 2], cfg.patch_shape, full);
        let mut ins = inputs(&[&[1, 16, 16, 8], &[1, 16, 16, 16]], r);
        let grid = cfg.global_grid();
        let mask = |shape: &[usize], r: &mut ChaCha8Rng| Tensor::from_fn(shape, |_| if r.gen_bool(0.3) { 1.0 } else { 0.0 });
        ins.push(mask(&[1, grid[0], grid[1], grid[2]], r));
        ins.push(mask(&[1, 16, 16, 16], r));
        Ok(Case {
            inputs: ins,
            mode: Mode::Directions(4),
            f: Box::new(move |g, v| {
                let out = net.global_branch(g, v[0])?;
                let ctx = GlobalContext { f_g: out.features, patch: &rec, image: full };
                let logits = net.local_branch(g, v[1], &ctx)?;
                let ll = seg_loss(g, logits, v[3])?;
                let lg = seg_loss(g, out.logits, v[2])?;
                total_loss(g, ll, lg, net.cfg.lambda)
            }),
        })
    }),
];

/// Moves every parameter off its initial value so that no gradient path
/// is trivially zero.
fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
    }
}

fn randomize_small(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
    }
}

pub fn primitive_checks(seeds: usize) -> Result<Vec<CheckOutcome>> {
    PRIMITIVES.iter().map(|&(n, b)| run(n, PRIMITIVE_TOL, seeds, b)).collect()
}

pub fn block_checks(seeds: usize) -> Result<Vec<CheckOutcome>> {
    BLOCKS.iter().map(|&(n, b)| run(n, COMPOSED_TOL, seeds, b)).collect()
}

/// Names of every check in suite order.
pub fn check_names() -> impl Iterator<Item = &'static str> {
    PRIMITIVES.iter().chain(BLOCKS).map(|(n, _)| *n)
}

/// Runs a single named check.
pub fn run_named(name: &str, seeds: usize) -> Option<Result<CheckOutcome>> {
    if let Some(&(n, b)) = PRIMITIVES.iter().find(|(n, _)| *n == name) {
        return Some(run(n, PRIMITIVE_TOL, seeds, b));
    }
    BLOCKS.iter().find(|(n, _)| *n == name).map(|&(n, b)| run(n, COMPOSED_TOL, seeds, b))
}
