//! Patch sampling, SGD training and sliding-window inference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cam::GlobalContext;
use crate::coords::{tile_for_inference, PatchRecord, Stitcher};
use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph};
use crate::metrics::dice;
use crate::model::{batch_loss, downsample_mask, resize_volume, BatchSample, CommaNet, GlobalInput, Losses};
use crate::nn::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;
use crate::volume::{BinaryMask3D, Volume};

/// An image with its label mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub image: Volume,
    pub mask: BinaryMask3D,
}

/// A case with everything sampling needs precomputed.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub image: Volume,
    pub mask: BinaryMask3D,
    pub global: GlobalInput<f32>,
    foreground: Vec<[usize; 3]>,
}

impl PreparedCase {
    pub fn new(case: &Case, net: &CommaNet) -> Result<Self> {
        case.mask.check_same_extents(&BinaryMask3D::zeros(case.image.extents()))?;
        let image = case.image.zscore();
        let global = GlobalInput {
            resized: resize_volume(&image, net.cfg.global_resize),
            target: downsample_mask(&case.mask, net.cfg.global_grid()),
        };
        Ok(Self { image, mask: case.mask.clone(), global, foreground: case.mask.foreground().collect() })
    }

    pub fn extents(&self) -> [usize; 3] {
        self.image.extents()
    }
}

/// RNG of one batch slot; independent of how slots are scheduled.
pub fn slot_rng(seed: u64, iteration: usize, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((iteration as u64) << 20) | slot as u64);
    rng
}

fn open_unit(rng: &mut impl Rng) -> f64 {
    loop {
        let v: f64 = rng.gen_range(-1.0..1.0);
        if v > -1.0 {
            return v;
        }
    }
}

/// Patch origin along one axis; `anchor` forces the voxel inside.
fn axis_origin(full: usize, patch: usize, anchor: Option<usize>, rng: &mut impl Rng) -> isize {
    if patch >= full {
        return -(((patch - full) / 2) as isize);
    }
    let (lo, hi) = match anchor {
        Some(v) => ((v + 1).saturating_sub(patch), v.min(full - patch)),
        None => (0, full - patch),
    };
    rng.gen_range(lo..=hi) as isize
}

/// Draws a patch of `case`; with `force_foreground` it contains a
/// foreground voxel whenever the case has one.
pub fn sample_patch(case: &PreparedCase, patch: [usize; 3], force_foreground: bool, rng: &mut impl Rng) -> PatchRecord {
    let full = case.extents();
    let anchor = if force_foreground && !case.foreground.is_empty() {
        Some(case.foreground[rng.gen_range(0..case.foreground.len())])
    } else {
        None
    };
    let origin = std::array::from_fn(|a| axis_origin(full[a], patch[a], anchor.map(|v| v[a]), rng));
    PatchRecord::new(origin, patch, full)
}

/// Parameters, momentum buffers and progress of a training run.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub params: ParamStore<f32>,
    pub momentum: Vec<Vec<f32>>,
    pub iteration: usize,
    pub seed: u64,
}

impl ModelState {
    pub fn new(params: ParamStore<f32>, seed: u64) -> Self {
        let momentum = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self { params, momentum, iteration: 0, seed }
    }
}

/// One iteration's patches.
pub fn make_batch(net: &CommaNet, cases: &[PreparedCase], seed: u64, iteration: usize) -> (Vec<usize>, Vec<BatchSample<f32>>) {
    let cfg = &net.cfg;
    let mut used: Vec<usize> = Vec::new();
    let mut samples = Vec::with_capacity(cfg.batch_size);
    for slot in 0..cfg.batch_size {
        let mut rng = slot_rng(seed, iteration, slot);
        let ci = rng.gen_range(0..cases.len());
        let case = &cases[ci];
        let fg = rng.gen_bool(cfg.foreground_fraction.clamp(0.0, 1.0));
        let mut patch = sample_patch(case, cfg.patch_shape, fg, &mut rng);
        let [h, w, d] = cfg.patch_shape;
        let image = case.image.crop(patch.origin, cfg.patch_shape).into_data();
        let target = case.mask.crop(patch.origin, cfg.patch_shape).to_volume().into_data();
        if cfg.ablation.randomize_coords {
            patch.center = std::array::from_fn(|_| open_unit(&mut rng));
        }
        let slot_case = match used.iter().position(|&u| u == ci) {
            Some(i) => i,
            None => {
                used.push(ci);
                used.len() - 1
            }
        };
        samples.push(BatchSample {
            patch,
            image: Tensor::new(&[1, h, w, d], image).expect("patch extents"),
            target: Tensor::new(&[1, h, w, d], target).expect("patch extents"),
            case: slot_case,
            full_extent: case.extents(),
        });
    }
    (used, samples)
}

/// SGD with momentum, polynomial decay and global gradient-norm clipping.
pub fn sgd_step(state: &mut ModelState, grads: &[Option<Vec<f32>>], cfg: &crate::model::CommaConfig) {
    let progress = (state.iteration as f64 / cfg.iterations.max(1) as f64).min(1.0);
    let lr = cfg.lr * (1.0 - progress).powf(cfg.poly_power);
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    let scale = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
    let mu = cfg.momentum as f32;
    for ((p, m), g) in state.params.iter_mut().zip(&mut state.momentum).zip(grads) {
        let Some(g) = g else { continue };
        for ((w, v), &gv) in p.value.data_mut().iter_mut().zip(m.iter_mut()).zip(g) {
            *v = mu * *v + (scale as f32) * gv;
            *w -= (lr as f32) * *v;
        }
    }
}

/// Runs one iteration and advances `state`.
pub fn train_step(net: &CommaNet, state: &mut ModelState, cases: &[PreparedCase]) -> Result<Losses> {
    let (used, samples) = make_batch(net, cases, state.seed, state.iteration);
    let globals: Vec<GlobalInput<f32>> = used.iter().map(|&c| cases[c].global.clone()).collect();
    let (losses, grads) = {
        let mut g = Graph::with_params(&state.params);
        let (total, local, global) = batch_loss(net, &mut g, &globals, &samples)?;
        let losses = Losses {
            total: g.value(total).item().as_f64(),
            local: g.value(local).item().as_f64(),
            global: g.value(global).item().as_f64(),
        };
        if !losses.total.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: state.iteration });
        }
        let grads = g.backward(total)?;
        let grads: Vec<Option<Vec<f32>>> = state.params.ids().map(|id| grads.param(id).map(<[f32]>::to_vec)).collect();
        (losses, grads)
    };
    sgd_step(state, &grads, &net.cfg);
    state.iteration += 1;
    Ok(losses)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    pub losses: Losses,
    pub val_dice: Option<f64>,
}

/// Mean Dice of thresholded predictions over `cases`.
pub fn mean_dice(net: &CommaNet, params: &ParamStore<f32>, cases: &[Case], workers: usize) -> Result<f64> {
    let mut total = 0.0;
    for c in cases {
        let pred = infer(net, params, &c.image, workers)?;
        total += dice(&pred.mask, &c.mask)?;
    }
    Ok(total / cases.len().max(1) as f64)
}

/// Trains until `net.cfg.iterations`, the target Dice, or `on_record`
/// returning `false`.
pub fn train(
    net: &CommaNet,
    state: &mut ModelState,
    train_cases: &[Case],
    val_cases: &[Case],
    workers: usize,
    mut on_record: impl FnMut(&TrainRecord, &ModelState) -> Result<bool>,
) -> Result<Vec<TrainRecord>> {
    if train_cases.is_empty() {
        return Err(Error::invalid("train", "no training cases"));
    }
    let prepared = train_cases.iter().map(|c| PreparedCase::new(c, net)).collect::<Result<Vec<_>>>()?;
    let cfg = &net.cfg;
    let mut log = Vec::new();
    while state.iteration < cfg.iterations {
        let losses = train_step(net, state, &prepared)?;
        let it = state.iteration;
        let validate = cfg.val_every > 0 && !val_cases.is_empty() && (it.is_multiple_of(cfg.val_every) || it == cfg.iterations);
        let val_dice = if validate { Some(mean_dice(net, &state.params, val_cases, workers)?) } else { None };
        let rec = TrainRecord { iteration: it, losses, val_dice };
        log.push(rec);
        if !on_record(&rec, state)? {
            break;
        }
        if let (Some(target), Some(d)) = (cfg.target_dice, val_dice) {
            if d >= target {
                break;
            }
        }
    }
    Ok(log)
}

/// Stitched foreground probabilities and their 0.5 threshold.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub probs: Volume,
    pub mask: BinaryMask3D,
}

/// Patch probabilities of one tile given the global features.
fn tile_probs<R: Real>(
    net: &CommaNet,
    params: &ParamStore<R>,
    image: &Volume,
    features: &Tensor<R>,
    tile: &PatchRecord,
) -> Result<Vec<f32>> {
    let mut g = Graph::inference(params);
    let f_g = g.input(features.clone());
    let ctx = GlobalContext { f_g, patch: tile, image: image.extents() };
    let [h, w, d] = tile.shape;
    let crop = image.crop(tile.origin, tile.shape).into_data();
    let x = g.input(Tensor::new(&[1, h, w, d], crop.into_iter().map(|v| R::of(v as f64)).collect())?);
    let logits = net.local_branch(&mut g, x, &ctx)?;
    Ok(g.value(logits).data().iter().map(|&v| sigmoid(v).as_f64() as f32).collect())
}

/// Sliding-window prediction of a full image. The global branch runs once;
/// tiles are spread over `workers` threads and stitched in tile order.
pub fn infer(net: &CommaNet, params: &ParamStore<f32>, image: &Volume, workers: usize) -> Result<Prediction> {
    let cfg = &net.cfg;
    let normed = image.zscore();
    let features = {
        let mut g = Graph::inference(params);
        let x = g.input(resize_volume(&normed, cfg.global_resize));
        let out = net.global_branch(&mut g, x)?;
        g.value(out.features).clone()
    };
    let tiles = tile_for_inference(image.extents(), cfg.patch_shape, cfg.overlap)?;
    let workers = workers.clamp(1, tiles.len().max(1));
    let mut results: Vec<Option<Vec<f32>>> = vec![None; tiles.len()];
    std::thread::scope(|s| -> Result<()> {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (tiles, normed, features) = (&tiles, &normed, &features);
                s.spawn(move || -> Result<Vec<(usize, Vec<f32>)>> {
                    (w..tiles.len())
                        .step_by(workers)
                        .map(|i| Ok((i, tile_probs(net, params, normed, features, &tiles[i])?)))
                        .collect()
                })
            })
            .collect();
        for h in handles {
            for (i, p) in h.join().expect("inference worker panicked")? {
                results[i] = Some(p);
            }
        }
        Ok(())
    })?;
    let mut stitch = Stitcher::new(image.extents());
    for (tile, probs) in tiles.iter().zip(results) {
        stitch.add(tile, &probs.expect("every tile computed"));
    }
    let probs = Volume::new(image.extents(), stitch.finish())?;
    let mask = probs.threshold(0.5);
    Ok(Prediction { probs, mask })
}
