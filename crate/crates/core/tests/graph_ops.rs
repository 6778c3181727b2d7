use comma_core::gradcheck::{check, random_tensor, Mode, PRIMITIVE_TOL};
use comma_core::graph::{Activation, Reduce, LEAKY_SLOPE};
use comma_core::kernels::{axis_taps, AxisMap, ConvSpec};
use comma_core::{Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;

fn primitive<F>(name: &str, shapes: &[&[usize]], f: F)
where
    F: Fn(&mut Graph<'_, f64>, &[comma_core::Var]) -> comma_core::Result<comma_core::Var>,
{
    let store = ParamStore::new();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<_> = shapes.iter().map(|s| random_tensor(s, &mut rng)).collect();
        let err = check(&store, &inputs, Mode::Elementwise, seed, &f).unwrap();
        assert!(err < PRIMITIVE_TOL, "{name} seed {seed}: rel err {err:e}");
    }
}

#[test]
fn matmul_hand_case() {
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = g.input(Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    let bad = g.input(Tensor::zeros(&[3, 1]));
    let err = g.matmul(a, bad).unwrap_err().to_string();
    assert!(err.contains("[2, 2]") && err.contains("[3, 1]"), "{err}");
}

#[test]
fn matmul_identity() {
    let mut g = Graph::<f64>::new();
    let i = g.input(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let a = g.input(Tensor::new(&[2, 2], vec![5.0, -1.0, 2.5, 7.0]).unwrap());
    let c = g.matmul(i, a).unwrap();
    assert_eq!(g.value(c).data(), g.value(a).data());
}

#[test]
fn matmul_gradient() {
    primitive("matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn conv_pointwise_doubles() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::from_fn(&[1, 3, 3, 3], |i| i as f32));
    let w = g.input(Tensor::new(&[1, 1, 1, 1, 1], vec![2.0]).unwrap());
    let y = g.conv3d(x, w, ConvSpec::pointwise()).unwrap();
    for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn conv_impulse_gives_box() {
    let mut g = Graph::<f32>::new();
    let mut x = Tensor::zeros(&[1, 7, 7, 7]);
    x.data_mut()[(3 * 7 + 3) * 7 + 3] = 1.0;
    let x = g.input(x);
    let w = g.input(Tensor::full(&[1, 1, 3, 3, 3], 1.0));
    let y = g.conv3d(x, w, ConvSpec::same(3)).unwrap();
    for i in 0..7 {
        for j in 0..7 {
            for k in 0..7 {
                let inside = [i, j, k].iter().all(|&c| (2..=4).contains(&c));
                assert_eq!(g.value(y).data()[(i * 7 + j) * 7 + k], if inside { 1.0 } else { 0.0 });
            }
        }
    }
}

#[test]
fn conv_gradient() {
    primitive("conv3d", &[&[2, 4, 4, 4], &[3, 2, 3, 3, 3]], |g, v| g.conv3d(v[0], v[1], ConvSpec::same(3)));
}

#[test]
fn strided_conv_gradient() {
    let spec = ConvSpec { kernel: 3, stride: [2, 2, 1], padding: 1 };
    primitive("conv3d stride", &[&[2, 4, 4, 3], &[2, 2, 3, 3, 3]], move |g, v| g.conv3d(v[0], v[1], spec));
}

#[test]
fn activation_values() {
    assert_eq!(Activation::Silu.apply(0.0f64), 0.0);
    assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[3]));
    let s = g.softmax(x, 0).unwrap();
    for &p in g.value(s).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!(g.softmax(x, 1).is_err());
}

#[test]
fn activation_gradients() {
    for kind in [
        Activation::Relu,
        Activation::LeakyRelu(LEAKY_SLOPE),
        Activation::Silu,
        Activation::Gelu,
        Activation::Sigmoid,
        Activation::Softplus,
        Activation::Exp,
    ] {
        primitive(&format!("{kind:?}"), &[&[5, 3]], move |g, v| Ok(g.act(v[0], kind)));
    }
}

#[test]
fn softmax_gradient() {
    primitive("softmax", &[&[3, 4, 2]], |g, v| g.softmax(v[0], 1));
}

#[test]
fn normalize_gradient() {
    primitive("normalize", &[&[3, 8]], |g, v| g.normalize_rows(v[0], 8, 1e-5));
}

#[test]
fn maxpool_values_and_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::new(&[1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.maxpool2(x).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);
    let odd = g.input(Tensor::zeros(&[1, 3, 2, 2]));
    assert!(g.maxpool2(odd).is_err());
    primitive("maxpool2", &[&[2, 4, 4, 2]], |g, v| g.maxpool2(v[0]));
}

#[test]
fn resample_constant_and_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::<f64>::new();
    let c = g.input(Tensor::full(&[1, 4, 4, 4], 2.5));
    let up = g.resample(c, std::array::from_fn(|_| axis_taps(4, 7, AxisMap::Centers))).unwrap();
    assert!(g.value(up).data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    let pooled = g.maxpool2(c).unwrap();
    assert!(g.value(pooled).data().iter().all(|&v| v == 2.5));

    let x = g.input(random_tensor(&[1, 4, 4, 4], &mut rng));
    let up = g.resample(x, std::array::from_fn(|_| axis_taps(4, 8, AxisMap::Origin))).unwrap();
    let down = g.resample(up, std::array::from_fn(|_| axis_taps(8, 4, AxisMap::Origin))).unwrap();
    for (a, b) in g.value(down).data().iter().zip(g.value(x).data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn resample_is_exact_on_linear_fields() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_fn(&[1, 4, 5, 6], |i| {
        let (a, b, c) = (i / 30, (i / 6) % 5, i % 6);
        1.0 + 2.0 * a as f64 - 0.5 * b as f64 + 0.25 * c as f64
    }));
    let taps = [axis_taps(4, 7, AxisMap::Centers), axis_taps(5, 3, AxisMap::Centers), axis_taps(6, 9, AxisMap::Centers)];
    let y = g.resample(x, taps.clone()).unwrap();
    let coord = |t: &comma_core::kernels::AxisTaps, j: usize| t.lo[j] as f64 * t.w_lo[j] + t.hi[j] as f64 * t.w_hi[j];
    for i in 0..7 {
        for j in 0..3 {
            for k in 0..9 {
                let expect = 1.0 + 2.0 * coord(&taps[0], i) - 0.5 * coord(&taps[1], j) + 0.25 * coord(&taps[2], k);
                assert!((g.value(y).data()[(i * 3 + j) * 9 + k] - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn resample_gradient() {
    primitive("resample", &[&[2, 3, 4, 5]], |g, v| {
        g.resample(v[0], [
            axis_taps(3, 5, AxisMap::Centers),
            axis_taps(4, 2, AxisMap::Origin),
            axis_taps(5, 4, AxisMap::Affine { scale: 1.3, offset: -0.7 }),
        ])
    });
}

#[test]
fn structural_gradients() {
    primitive("gather", &[&[6]], |g, v| g.gather(v[0], vec![5, 0, usize::MAX, 0, 2], &[5]));
    primitive("concat", &[&[2, 3], &[1, 3]], |g, v| g.concat(&[v[0], v[1]]));
    primitive("expand", &[&[3]], |g, v| g.expand(v[0], 2, 4, &[2, 3, 4]));
    primitive("reduce mean", &[&[2, 3, 4]], |g, v| g.reduce(v[0], 1, Reduce::Mean));
    primitive("reduce max", &[&[2, 3, 4]], |g, v| g.reduce(v[0], 1, Reduce::Max));
    primitive("mul", &[&[4], &[4]], |g, v| g.mul(v[0], v[1]));
    primitive("sub", &[&[4], &[4]], |g, v| g.sub(v[0], v[1]));
    primitive("affine", &[&[4]], |g, v| Ok(g.affine(v[0], -1.5, 0.5)));
}

#[test]
fn sequence_gradients() {
    primitive("causal_conv1d", &[&[6, 3], &[3, 4]], |g, v| g.causal_conv1d(v[0], v[1]));
    primitive("pos_embed", &[&[5, 3], &[3, 4], &[4]], |g, v| g.pos_embed(v[0], v[1], v[2]));
    primitive("selective_scan", &[&[7, 3], &[7, 3], &[3, 2], &[7, 2], &[7, 2]], |g, v| {
        // Keep delta positive and A negative as in the block.
        let delta = g.act(v[1], Activation::Softplus);
        let a = g.act(v[2], Activation::Exp);
        let a = g.affine(a, -1.0, 0.0);
        g.selective_scan(v[0], delta, a, v[3], v[4])
    });
}

#[test]
fn loss_gradients() {
    primitive("dice", &[&[2, 3, 3], &[2, 3, 3]], |g, v| {
        let p = g.act(v[0], Activation::Sigmoid);
        let t = g.act(v[1], Activation::Sigmoid);
        g.dice_loss(p, t, 1e-5)
    });
    primitive("bce", &[&[2, 3, 3], &[2, 3, 3]], |g, v| {
        let t = g.act(v[1], Activation::Sigmoid);
        g.bce_with_logits(v[0], t)
    });
}

#[test]
fn causal_conv_sees_only_the_past() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::new(&[4, 1], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
    let w = g.input(Tensor::new(&[1, 3], vec![3.0, 2.0, 1.0]).unwrap());
    let y = g.causal_conv1d(x, w).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 0.0]);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::<f32>::new();
        let x = g.input(random_tensor(&[4, 6, 6, 6], &mut rng).cast());
        let w = g.input(random_tensor(&[20, 4, 3, 3, 3], &mut rng).cast());
        let y = g.conv3d(x, w, ConvSpec::same(3)).unwrap();
        let y = g.normalize_rows(y, 216, 1e-5).unwrap();
        g.value(y).data().to_vec()
    };
    assert_eq!(run(), run());
}
