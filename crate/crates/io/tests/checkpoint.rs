use comma_core::model::CommaConfig;
use comma_core::phantom::{generate_phantom, PhantomSpec};
use comma_core::train::{infer, train_step, Case, ModelState, PreparedCase};
use comma_core::{nn::Init, ParamStore, Tensor};
use comma_io::checkpoint::*;
use comma_io::IoError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn byte_layout() {
    let mut store = ParamStore::<f32>::new();
    store.insert("ab", Tensor::new(&[1, 2], vec![1.0, -2.5]).unwrap(), Init::Zeros).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    write_params(&path, &store).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let mut want = b"CKPT0001".to_vec();
    want.extend([1, 0, 0, 0, 2, 0, 0, 0, b'a', b'b', 2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
    want.extend(1.0f32.to_le_bytes());
    want.extend((-2.5f32).to_le_bytes());
    assert_eq!(bytes, want);
    let back = read_tensors(&path).unwrap();
    assert_eq!(back, vec![("ab".to_string(), store.iter().next().unwrap().value.clone())]);
}

#[test]
fn malformed_checkpoints_are_rejected() {
    let t = Tensor::new(&[3], vec![1.0f32, 2.0, 3.0]).unwrap();
    let good = encode([("w", &t)]);
    assert!(matches!(decode(&good[..good.len() - 2]), Err(IoError::Truncated { .. })));
    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad), Err(IoError::BadMagic { .. })));
    let mut long = good.clone();
    long.push(1);
    assert!(matches!(decode(&long), Err(IoError::Trailing { .. })));

    let mut store = ParamStore::<f32>::new();
    store.insert("w", Tensor::zeros(&[3]), Init::Zeros).unwrap();
    assert!(load_params(&mut store.clone(), vec![("v".into(), t.clone())]).is_err());
    assert!(load_params(&mut store.clone(), vec![("w".into(), Tensor::zeros(&[4]))]).is_err());
    assert!(load_params(&mut store.clone(), vec![("w".into(), t.clone()), ("w".into(), t.clone())]).is_err());
    load_params(&mut store, vec![("w".into(), t.clone())]).unwrap();
    assert_eq!(store.iter().next().unwrap().value, t);
}

fn toy_state(seed: u64, steps: usize) -> (CommaConfig, comma_core::model::CommaNet, ModelState, Case) {
    let cfg = CommaConfig { seed, ..CommaConfig::toy() };
    let mut store = ParamStore::new();
    let net = comma_core::model::CommaNet::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let spec = PhantomSpec { seed, extents: [24, 32, 16], depth: 3, root_radius: 2.0, ..PhantomSpec::default() };
    let (image, mask) = generate_phantom(&spec).unwrap();
    let case = Case { image, mask };
    let prepared = vec![PreparedCase::new(&case, &net).unwrap()];
    let mut state = ModelState::new(store, seed);
    for _ in 0..steps {
        train_step(&net, &mut state, &prepared).unwrap();
    }
    (cfg, net, state, case)
}

#[test]
fn run_roundtrip_preserves_inference_bitwise() {
    let (cfg, net, state, case) = toy_state(3, 3);
    let dir = tempfile::tempdir().unwrap();
    save_run(dir.path(), &cfg, &state).unwrap();
    let (cfg2, net2, state2) = load_run(dir.path()).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(state2.iteration, 3);
    assert_eq!(state2.seed, 3);
    assert_eq!(state2.momentum, state.momentum);
    for (a, b) in state.params.iter().zip(state2.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
    let p1 = infer(&net, &state.params, &case.image, 1).unwrap();
    let p2 = infer(&net2, &state2.params, &case.image, 2).unwrap();
    let bits = |v: &comma_core::volume::Volume| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&p1.probs), bits(&p2.probs));
    assert_eq!(p1.mask, p2.mask);
}

#[test]
fn resumed_training_continues_the_same_curve() {
    let (cfg, net, mut state, case) = toy_state(4, 2);
    let dir = tempfile::tempdir().unwrap();
    save_run(dir.path(), &cfg, &state).unwrap();
    let (_, net2, mut resumed) = load_run(dir.path()).unwrap();
    let prepared = vec![PreparedCase::new(&case, &net).unwrap()];
    for _ in 0..2 {
        let a = train_step(&net, &mut state, &prepared).unwrap();
        let b = train_step(&net2, &mut resumed, &prepared).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn missing_run_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_run(dir.path()).unwrap_err();
    assert!(err.to_string().contains(CONFIG_FILE));
}
