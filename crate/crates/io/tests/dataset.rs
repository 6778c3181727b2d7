use comma_core::phantom::{case_seed, generate_phantom, PhantomSpec, Split};
use comma_io::dataset::*;
use comma_io::vvol;

fn spec() -> PhantomSpec {
    PhantomSpec { extents: [16, 20, 12], depth: 2, root_radius: 1.5, ..PhantomSpec::default() }
}

#[test]
fn generated_cohort_matches_case_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_dataset(dir.path(), 5, &spec(), 9, [0.6, 0.2, 0.2], 2).unwrap();
    let splits: Vec<Split> = m.entries.iter().map(|e| e.split).collect();
    assert_eq!(splits, [Split::Train, Split::Train, Split::Train, Split::Val, Split::Test]);
    let (image, mask) = generate_phantom(&PhantomSpec { seed: case_seed(9, 3), ..spec() }).unwrap();
    let e = &m.entries[3];
    assert_eq!(vvol::read_volume(&m.path(&e.volume)).unwrap(), image);
    assert_eq!(vvol::read_mask(&m.path(&e.mask)).unwrap(), mask);
    assert_eq!(Manifest::read(dir.path()).unwrap(), m);
    assert_eq!(Manifest::read(&dir.path().join(MANIFEST_FILE)).unwrap(), m);
    let val = m.load(Split::Val).unwrap();
    assert_eq!(val.len(), 1);
    assert_eq!(val[0].0, "case_003");
    assert_eq!(val[0].1.mask, mask);
}

#[test]
fn generation_is_deterministic_and_worker_independent() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    make_dataset(a.path(), 4, &spec(), 1, [0.5, 0.0, 0.5], 1).unwrap();
    make_dataset(b.path(), 4, &spec(), 1, [0.5, 0.0, 0.5], 3).unwrap();
    for i in 0..4 {
        for f in [format!("case_{i:03}.vvol"), format!("case_{i:03}_mask.vvol")] {
            assert_eq!(std::fs::read(a.path().join(&f)).unwrap(), std::fs::read(b.path().join(&f)).unwrap());
        }
    }
}

#[test]
fn manifest_parsing() {
    let text = "volume_path\tmask_path\tsplit\na.vvol\ta_m.vvol\ttrain\nb.vvol\tb_m.vvol\ttest\n";
    let m = Manifest::parse(text, "/data").unwrap();
    assert_eq!(m.entries.len(), 2);
    assert_eq!(m.path(&m.entries[1].mask), std::path::PathBuf::from("/data/b_m.vvol"));
    assert_eq!(m.to_tsv(), text);
    assert!(Manifest::parse("a\tb\n", ".").is_err());
    assert!(Manifest::parse("a\tb\tdev\n", ".").is_err());
    assert!(Manifest::parse("a\tb\ttrain\na\tc\ttest\n", ".").is_err());
}

#[test]
fn invalid_requests_fail() {
    let dir = tempfile::tempdir().unwrap();
    assert!(make_dataset(dir.path(), 3, &spec(), 0, [0.5, 0.6, 0.0], 1).is_err());
    assert!(make_dataset(dir.path(), 3, &PhantomSpec { root_radius: 0.1, ..spec() }, 0, [1.0, 0.0, 0.0], 1).is_err());
}
