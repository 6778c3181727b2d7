use comma_core::cam::CoordMode;
use comma_core::model::CommaConfig;
use comma_io::config::*;
use comma_io::IoError;

#[test]
fn example_lines_parse() {
    let cfg = parse("# run\npatch_shape=96,96,96\nlambda=0.25\nablate.lfe=false\n\npreset=paper\n").unwrap();
    assert_eq!(cfg.patch_shape, [96; 3]);
    assert_eq!(cfg.lambda, 0.25);
    assert!(cfg.ablation.lfe);
    assert_eq!(cfg.base_channels, CommaConfig::paper().base_channels);
}

#[test]
fn preset_applies_before_other_keys() {
    let a = parse("lambda=0.5\npreset=toy").unwrap();
    let b = parse("preset=toy\nlambda=0.5").unwrap();
    assert_eq!(a, b);
    assert_eq!(a, CommaConfig { lambda: 0.5, ..CommaConfig::toy() });
    assert_eq!(parse("").unwrap(), CommaConfig::desk());
}

#[test]
fn ablation_keys() {
    let cfg = parse("ablate.lfe=true\nablate.glf=true\nablate.gloss=1\nablate.randcoord=yes").unwrap();
    let a = cfg.ablation;
    assert!(!a.lfe && !a.glf && !a.global_loss && a.randomize_coords);
}

#[test]
fn serialization_roundtrips() {
    let mut odd = CommaConfig::toy();
    odd.lambda = 0.1 + 0.2;
    odd.lr = 1.0 / 3.0;
    odd.coord_mode = CoordMode::Literal;
    odd.target_dice = Some(0.95);
    odd.ablation.randomize_coords = true;
    odd.seed = u64::MAX;
    for cfg in [CommaConfig::paper(), CommaConfig::desk(), CommaConfig::toy(), odd] {
        assert_eq!(parse(&to_string(&cfg)).unwrap(), cfg);
    }
}

#[test]
fn errors_carry_line_numbers() {
    let line = |text: &str| match parse(text) {
        Err(IoError::Parse { line, .. }) => line,
        other => panic!("{other:?}"),
    };
    assert_eq!(line("lambda=0.5\nbogus=1"), 2);
    assert_eq!(line("\n\npatch_shape=32,32"), 3);
    assert_eq!(line("lambda=x"), 1);
    assert_eq!(line("lambda=1\nlambda=2"), 2);
    assert_eq!(line("no equals sign"), 1);
    assert_eq!(line("preset=huge"), 1);
    assert!(matches!(parse("patch_shape=40,32,32"), Err(IoError::Core(_))));
}
