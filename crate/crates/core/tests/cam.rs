use comma_core::cam::*;
use comma_core::coords::PatchRecord;
use comma_core::gradcheck::random_tensor;
use comma_core::{Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg() -> CamConfig {
    CamConfig { attn_dim: 6, global_token_size: 2, mask_kernel: 3, reduction: 2, ..CamConfig::default() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn single_global_token_broadcasts_its_value() {
    let mut r = rng(1);
    let mut store = ParamStore::<f64>::new();
    let lfe = CoordLfe::new(&mut store, "lfe", 2, 2, 1, &cfg(), &mut r).unwrap();
    let mut g = Graph::with_params(&store);
    let local = g.input(random_tensor(&[5, 6], &mut r));
    let global = g.input(random_tensor(&[1, 6], &mut r));
    let (w, out) = lfe.attend(&mut g, local, global, true).unwrap();
    assert!(g.value(w).data().iter().all(|&v| v == 1.0));
    let v = lfe.v.forward(&mut g, global).unwrap();
    let row = g.value(v).data().to_vec();
    for chunk in g.value(out).data().chunks(6) {
        for (a, b) in chunk.iter().zip(&row) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn duplicated_global_tokens_change_nothing() {
    let mut r = rng(2);
    let mut store = ParamStore::<f64>::new();
    let lfe = CoordLfe::new(&mut store, "lfe", 2, 2, 1, &cfg(), &mut r).unwrap();
    let tok = random_tensor(&[1, 6], &mut r);
    let twice = Tensor::new(&[2, 6], [tok.data(), tok.data()].concat()).unwrap();
    let lt = random_tensor(&[4, 6], &mut r);
    let mut g = Graph::with_params(&store);
    let l = g.input(lt);
    let one = g.input(tok);
    let two = g.input(twice);
    let (_, a) = lfe.attend(&mut g, l, one, true).unwrap();
    let (w, b) = lfe.attend(&mut g, l, two, true).unwrap();
    assert!(g.value(w).data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    for (x, y) in g.value(a).data().iter().zip(g.value(b).data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let mut r = rng(3);
    let mut store = ParamStore::<f32>::new();
    let lfe = CoordLfe::new(&mut store, "lfe", 2, 2, 1, &cfg(), &mut r).unwrap();
    let mut g = Graph::with_params(&store);
    let l = g.input(random_tensor(&[7, 6], &mut r).cast());
    let gl = g.input(random_tensor(&[9, 6], &mut r).cast());
    let (w, _) = lfe.attend(&mut g, l, gl, true).unwrap();
    for row in g.value(w).data().chunks(9) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
    let bad = g.input(Tensor::zeros(&[3, 5]));
    assert!(lfe.attend(&mut g, l, bad, true).is_err());
}

fn glf(store: &mut ParamStore<f64>, seed: u64) -> CoordGlf {
    CoordGlf::new(store, "glf", 4, 3, &cfg(), &mut rng(seed)).unwrap()
}

#[test]
fn channel_attention_is_literal_mlp() {
    let mut store = ParamStore::<f64>::new();
    let m = glf(&mut store, 4);
    let mut g = Graph::with_params(&store);
    let zero = g.input(Tensor::zeros(&[4, 3, 3, 3]));
    let mc = m.channel_attention(&mut g, zero).unwrap();
    assert!(g.value(mc).data().iter().all(|&v| v == 0.0));
    // constant channels pool to their constants; check against a direct evaluation
    let consts = [0.5, -1.0, 2.0, 0.25];
    let f = g.input(Tensor::from_fn(&[4, 3, 3, 3], |i| consts[i / 27]));
    let mc = m.channel_attention(&mut g, f).unwrap();
    let w1 = store.get(m.channel_fc1.w).value.data();
    let w2 = store.get(m.channel_fc2.w).value.data();
    let hidden: Vec<f64> = (0..2).map(|h| (0..4).map(|c| consts[c] * w1[c * 2 + h]).sum::<f64>().max(0.0)).collect();
    for c in 0..4 {
        let expect: f64 = (0..2).map(|h| hidden[h] * w2[h * 4 + c]).sum();
        assert!((g.value(mc).data()[c] - expect).abs() < 1e-12);
    }
}

#[test]
fn spatial_and_pixel_masks_are_bounded() {
    let mut store = ParamStore::<f64>::new();
    let m = glf(&mut store, 5);
    let mut g = Graph::with_params(&store);
    let zero = g.input(Tensor::zeros(&[4, 3, 3, 3]));
    let ms = m.spatial_attention(&mut g, zero).unwrap();
    assert!(g.value(ms).data().iter().all(|&v| v == 0.5));
    drop(g);
    store.set("glf.pixel.weight", Tensor::zeros(&[1, 8, 3, 3, 3])).unwrap();
    let mut r = rng(6);
    let mut g = Graph::with_params(&store);
    let f = g.input(random_tensor(&[4, 3, 3, 3], &mut r));
    let mc = m.channel_attention(&mut g, f).unwrap();
    let ms = m.spatial_attention(&mut g, f).unwrap();
    assert!(g.value(ms).data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!(g.shape(ms), &[1, 3, 3, 3]);
    let mp = m.pixel_attention(&mut g, mc, ms, f).unwrap();
    assert_eq!(g.shape(mp), &[1, 3, 3, 3]);
    assert!(g.value(mp).data().iter().all(|&v| v == 0.5));
}

fn identity_fuse(store: &mut ParamStore<f64>, pixel_bias: f64) {
    let mut w = Tensor::zeros(&[4, 4, 3, 3, 3]);
    for c in 0..4 {
        w.data_mut()[(c * 4 + c) * 27 + 13] = 1.0;
    }
    store.set("glf.fuse.weight", w).unwrap();
    store.set("glf.pixel.weight", Tensor::zeros(&[1, 8, 3, 3, 3])).unwrap();
    store.set("glf.pixel.bias", Tensor::full(&[1], pixel_bias)).unwrap();
}

#[test]
fn saturated_pixel_mask_selects_a_source() {
    let mut r = rng(7);
    let (fl, fpg) = (random_tensor(&[4, 3, 3, 3], &mut r), random_tensor(&[4, 3, 3, 3], &mut r));
    for (bias, expect) in [(-60.0, 0usize), (60.0, 1)] {
        let mut store = ParamStore::<f64>::new();
        let m = glf(&mut store, 8);
        identity_fuse(&mut store, bias);
        let mut g = Graph::with_params(&store);
        let (a, b) = (g.input(fl.clone()), g.input(fpg.clone()));
        let y = m.fuse(&mut g, a, b).unwrap();
        for (i, &v) in g.value(y).data().iter().enumerate() {
            let want = if expect == 0 { 2.0 * fl.data()[i] } else { fpg.data()[i] + fl.data()[i] };
            assert!((v - want).abs() < 1e-12);
        }
    }
}

#[test]
fn blend_is_the_convex_form() {
    let mut r = rng(9);
    let mut store = ParamStore::<f64>::new();
    let m = glf(&mut store, 9);
    let mut g = Graph::with_params(&store);
    let mp_t = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64 / 8.0);
    let (fl, fpg) = (random_tensor(&[3, 2, 2, 2], &mut r), random_tensor(&[3, 2, 2, 2], &mut r));
    let (mp, a, b) = (g.input(mp_t.clone()), g.input(fl.clone()), g.input(fpg.clone()));
    let y = m.blend(&mut g, mp, a, b).unwrap();
    for (i, &v) in g.value(y).data().iter().enumerate() {
        let p = mp_t.data()[i % 8];
        assert!((v - (p * fpg.data()[i] + (1.0 - p) * fl.data()[i])).abs() < 1e-15);
    }
    let wrong = g.input(Tensor::zeros(&[3, 2, 2, 3]));
    assert!(m.fuse(&mut g, a, wrong).is_err());
}

#[test]
fn stage_one_shape_contract() {
    let mut r = rng(10);
    let cfg = CamConfig { global_token_size: 8, ..CamConfig::default() };
    let mut store = ParamStore::<f32>::new();
    let cam = CamBlock::new(&mut store, "cam", 256, 32, 1, cfg, &mut r).unwrap();
    let patch = PatchRecord::new([0, 0, 0], [96; 3], [256, 256, 96]);
    let mut g = Graph::with_params(&store);
    let fl = g.input(random_tensor(&[256, 12, 12, 12], &mut r).cast());
    let fg = g.input(random_tensor(&[32, 16, 16, 8], &mut r).cast());
    let ctx = GlobalContext { f_g: fg, patch: &patch, image: [256, 256, 96] };
    let y = cam.forward(&mut g, fl, &ctx).unwrap();
    assert_eq!(g.shape(y), &[256, 12, 12, 12]);
    assert!(g.value(y).data().iter().all(|v| v.is_finite()));
}

#[test]
fn ablation_lattice_constructs_and_runs() {
    let patch = PatchRecord::new([2, 2, 2], [8; 3], [16; 3]);
    for (lfe, glf) in [(false, false), (true, false), (false, true), (true, true)] {
        let mut r = rng(11);
        let mut store = ParamStore::<f64>::new();
        let cam = CamBlock::new(&mut store, "cam", 2, 3, 2, CamConfig { lfe, glf, ..cfg() }, &mut r).unwrap();
        let fl_t = random_tensor(&[2, 4, 4, 4], &mut r);
        let mut g = Graph::with_params(&store);
        let fl = g.input(fl_t.clone());
        let fg = g.input(random_tensor(&[3, 4, 4, 4], &mut r));
        let ctx = GlobalContext { f_g: fg, patch: &patch, image: [16; 3] };
        let y = cam.forward(&mut g, fl, &ctx).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 4, 4]);
        if !lfe && !glf {
            assert_eq!(g.value(y), &fl_t);
            assert!(store.is_empty() || store.iter().all(|p| p.name.starts_with("cam.pos")));
        }
    }
}

#[test]
fn literal_modes_run() {
    let patch = PatchRecord::new([0, 4, 0], [8; 3], [16; 3]);
    let mut r = rng(12);
    let c = CamConfig { coord_mode: CoordMode::Literal, crop_mode: comma_core::coords::CropMode::Literal, softmax: false, ..cfg() };
    let mut store = ParamStore::<f64>::new();
    let cam = CamBlock::new(&mut store, "cam", 2, 3, 2, c, &mut r).unwrap();
    let mut g = Graph::with_params(&store);
    let fl = g.input(random_tensor(&[2, 4, 4, 4], &mut r));
    let fg = g.input(random_tensor(&[3, 8, 8, 8], &mut r));
    let ctx = GlobalContext { f_g: fg, patch: &patch, image: [16; 3] };
    let y = cam.forward(&mut g, fl, &ctx).unwrap();
    assert_eq!(g.shape(y), &[2, 4, 4, 4]);
}
