use comma_core::cam::GlobalContext;
use comma_core::coords::{patch_center, PatchRecord};
use comma_core::graph::sigmoid;
use comma_core::metrics::dice;
use comma_core::model::CommaConfig;
use comma_core::model::{resize_volume, CommaNet};
use comma_core::nn::Init;
use comma_core::phantom::{generate_phantom, PhantomSpec};
use comma_core::train::*;
use comma_core::volume::{BinaryMask3D, Volume};
use comma_core::{Error, Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn phantom(seed: u64, ext: usize) -> Case {
    let spec = PhantomSpec { seed, extents: [ext; 3], depth: 3, root_radius: 2.5, ..PhantomSpec::default() };
    let (image, mask) = generate_phantom(&spec).unwrap();
    Case { image, mask }
}

fn toy(seed: u64) -> (CommaNet, ParamStore<f32>) {
    toy_with(CommaConfig { seed, ..CommaConfig::toy() })
}

fn toy_with(cfg: CommaConfig) -> (CommaNet, ParamStore<f32>) {
    let seed = cfg.seed;
    let mut store = ParamStore::new();
    let net = CommaNet::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (net, store)
}

#[test]
fn forced_patches_contain_foreground() {
    let (net, _) = toy(0);
    let case = PreparedCase::new(&phantom(1, 32), &net).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let p = sample_patch(&case, [16; 3], true, &mut rng);
        assert!(p.origin.iter().all(|&o| (0..=16).contains(&o)));
        assert!(case.mask.crop(p.origin, p.shape).count() > 0);
        assert_eq!(p.center, patch_center(p.origin, p.shape, [32; 3]));
    }
}

#[test]
fn oversized_patch_is_centered_and_zero_padded() {
    let (net, _) = toy(0);
    let image = Volume::new([8, 8, 8], vec![1.0; 512]).unwrap();
    let case = PreparedCase::new(&Case { image, mask: BinaryMask3D::zeros([8; 3]) }, &net).unwrap();
    let p = sample_patch(&case, [16; 3], true, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(p.origin, [-4; 3]);
    assert_eq!(p.center, [0.0; 3]);
    let crop = case.image.crop(p.origin, p.shape);
    assert_eq!(crop.get(0, 0, 0), 0.0);
    assert_eq!(crop.get(4, 4, 4), case.image.get(0, 0, 0));
}

#[test]
fn batches_depend_only_on_seed_and_iteration() {
    let (net, _) = toy(0);
    let cases: Vec<PreparedCase> = (0..3).map(|i| PreparedCase::new(&phantom(i, 32), &net).unwrap()).collect();
    let a = make_batch(&net, &cases, 7, 3);
    let b = make_batch(&net, &cases, 7, 3);
    let c = make_batch(&net, &cases, 7, 4);
    assert_eq!(a.0, b.0);
    for (x, y) in a.1.iter().zip(&b.1) {
        assert_eq!(x.patch, y.patch);
        assert_eq!(x.image, y.image);
        assert_eq!(x.case, y.case);
    }
    assert!(a.1.iter().zip(&c.1).any(|(x, y)| x.patch != y.patch));
    for s in &a.1 {
        assert_eq!(s.patch.center, patch_center(s.patch.origin, s.patch.shape, s.full_extent));
        assert_eq!(a.0.len(), a.0.iter().collect::<std::collections::HashSet<_>>().len());
    }
}

#[test]
fn randomized_coordinates_replace_true_centers() {
    let mut cfg = CommaConfig::toy();
    cfg.ablation.randomize_coords = true;
    cfg.batch_size = 8;
    let net = CommaNet::new(&cfg, &mut ParamStore::<f32>::new(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let cases = vec![PreparedCase::new(&phantom(0, 32), &net).unwrap()];
    let mut differs = 0;
    for it in 0..10 {
        for s in make_batch(&net, &cases, 1, it).1 {
            assert!(s.patch.center.iter().all(|c| -1.0 < *c && *c < 1.0));
            if s.patch.center != patch_center(s.patch.origin, s.patch.shape, s.full_extent) {
                differs += 1;
            }
        }
    }
    assert_eq!(differs, 80);
}

#[test]
fn sgd_step_hand_oracle() {
    let mut store = ParamStore::<f32>::new();
    store.insert("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap(), Init::Zeros).unwrap();
    store.insert("frozen", Tensor::new(&[1], vec![3.0]).unwrap(), Init::Zeros).unwrap();
    let cfg = CommaConfig { lr: 0.1, momentum: 0.9, poly_power: 1.0, iterations: 2, grad_clip: 2.5, ..CommaConfig::toy() };
    let mut state = ModelState::new(store, 0);
    let grads = vec![Some(vec![3.0, 4.0]), None];
    sgd_step(&mut state, &grads, &cfg);
    // norm 5 clipped to 2.5: v = [1.5, 2], lr 0.1
    let w = state.params.iter().next().unwrap().value.data().to_vec();
    assert!((w[0] - 0.85).abs() < 1e-6 && (w[1] + 1.2).abs() < 1e-6);
    state.iteration = 1;
    sgd_step(&mut state, &grads, &cfg);
    // v = 0.9 v + [1.5, 2], lr halved by the linear decay
    let w = state.params.iter().next().unwrap().value.data().to_vec();
    assert!((w[0] - (0.85 - 0.05 * 2.85)).abs() < 1e-6);
    assert!((w[1] - (-1.2 - 0.05 * 3.8)).abs() < 1e-6);
    assert_eq!(state.params.iter().nth(1).unwrap().value.data(), &[3.0]);
}

fn run(seed: u64, steps: usize) -> (Vec<f64>, ParamStore<f32>) {
    let (net, store) = toy(seed);
    let cases: Vec<PreparedCase> = (0..2).map(|i| PreparedCase::new(&phantom(i, 32), &net).unwrap()).collect();
    let mut state = ModelState::new(store, seed);
    let losses = (0..steps).map(|_| train_step(&net, &mut state, &cases).unwrap().total).collect();
    (losses, state.params)
}

#[test]
fn identical_seeds_reproduce_the_curve() {
    let (a, pa) = run(3, 4);
    let (b, pb) = run(3, 4);
    let (c, _) = run(4, 4);
    assert_eq!(a, b);
    assert_ne!(a, c);
    for (x, y) in pa.iter().zip(pb.iter()) {
        assert_eq!(x.value, y.value);
    }
}

#[test]
fn non_finite_loss_aborts_with_iteration() {
    let (net, mut store) = toy(0);
    let id = store.id("local.head.bias").unwrap();
    store.get_mut(id).value.data_mut()[0] = f32::NAN;
    let cases = vec![PreparedCase::new(&phantom(0, 32), &net).unwrap()];
    let mut state = ModelState::new(store, 0);
    state.iteration = 5;
    match train_step(&net, &mut state, &cases) {
        Err(Error::NonFiniteLoss { iteration }) => assert_eq!(iteration, 5),
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn inference_is_independent_of_worker_count() {
    let (net, store) = toy(5);
    let image = phantom(9, 40).image;
    let before = net.global_calls();
    let one = infer(&net, &store, &image, 1).unwrap();
    assert_eq!(net.global_calls(), before + 1);
    let three = infer(&net, &store, &image, 3).unwrap();
    assert_eq!(net.global_calls(), before + 2);
    assert_eq!(one.probs, three.probs);
    assert_eq!(one.mask, three.mask);
}

#[test]
fn volume_equal_to_patch_is_one_forward_pass() {
    let (net, store) = toy(6);
    let image = phantom(2, 16).image;
    let pred = infer(&net, &store, &image, 1).unwrap();
    let normed = image.zscore();
    let mut g = Graph::inference(&store);
    let x = g.input(resize_volume(&normed, net.cfg.global_resize));
    let out = net.global_branch(&mut g, x).unwrap();
    let patch = PatchRecord::new([0; 3], [16; 3], [16; 3]);
    assert_eq!(patch.center, [0.0; 3]);
    let ctx = GlobalContext { f_g: out.features, patch: &patch, image: [16; 3] };
    let xp = g.input(normed.to_tensor());
    let logits = net.local_branch(&mut g, xp, &ctx).unwrap();
    let probs: Vec<f32> = g.value(logits).data().iter().map(|&v| sigmoid(v)).collect();
    assert_eq!(pred.probs.data(), &probs[..]);
    let mask: Vec<bool> = probs.iter().map(|&p| p > 0.5).collect();
    assert_eq!(pred.mask.data(), &mask[..]);
}

#[test]
fn constant_logit_model_stitches_without_seams() {
    let (net, mut store) = toy(7);
    let head = store.id("local.head.weight").unwrap();
    store.get_mut(head).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    store.set("local.head.bias", Tensor::full(&[1], 0.8)).unwrap();
    let image = phantom(3, 40).image;
    let pred = infer(&net, &store, &image, 2).unwrap();
    let want = sigmoid(0.8f32);
    assert!(pred.probs.data().iter().all(|&p| (p - want).abs() < 1e-6));
    assert_eq!(pred.mask.count(), pred.mask.len());
}

#[test]
fn overfit_loss_moving_average_decreases_early() {
    let (net, store) = toy_with(CommaConfig::desk());
    let (image, mask) = generate_phantom(&PhantomSpec::default()).unwrap();
    let cases = vec![PreparedCase::new(&Case { image, mask }, &net).unwrap()];
    let mut state = ModelState::new(store, 0);
    let losses: Vec<f64> = (0..50).map(|_| train_step(&net, &mut state, &cases).unwrap().total).collect();
    let avg: Vec<f64> = losses.chunks(10).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    for w in avg.windows(2) {
        assert!(w[1] < w[0], "{avg:?}");
    }
}

#[test]
fn training_beats_the_untrained_model_on_held_out_data() {
    let (net, store) = toy_with(CommaConfig { seed: 12, iterations: 150, ..CommaConfig::toy() });
    let train_cases: Vec<Case> = (0..4).map(|i| phantom(100 + i, 32)).collect();
    let held_out = vec![phantom(200, 32)];
    let untrained = mean_dice(&net, &store, &held_out, 1).unwrap();
    let mut state = ModelState::new(store, 12);
    train(&net, &mut state, &train_cases, &[], 1, |_, _| Ok(true)).unwrap();
    let trained = mean_dice(&net, &state.params, &held_out, 1).unwrap();
    let pred = infer(&net, &state.params, &held_out[0].image, 1).unwrap();
    assert_eq!(dice(&pred.mask, &held_out[0].mask).unwrap(), trained);
    assert!(trained > untrained, "trained {trained} untrained {untrained}");
}
