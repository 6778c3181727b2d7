use std::path::Path;
use std::process::{Command, Output};

use comma_io::report::parse_bench_csv;

fn comma(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_comma")).args(args).current_dir(cwd).env_remove("COMMA_SEED").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen(dir: &Path, seed: &str) {
    let o = comma(&["gen-data", "--out", "data", "--cases", "3", "--seed", seed, "--size", "24,24,24", "--depth", "2", "--splits", "0.34,0.33,0.33"], dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn eval_of_identical_directories_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "4");
    let o = comma(&["eval", "--pred", "data", "--gt", "data", "--small-vessel-axis", "z", "--small-vessel-threshold", "4", "--out", "rep"], dir.path());
    assert!(o.status.success());
    let csv = std::fs::read_to_string(dir.path().join("rep/report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for r in rows {
        let f: Vec<&str> = r.split(',').collect();
        for i in [1, 2, 3, 6, 7, 8] {
            assert_eq!(f[i], "1", "{r}");
        }
    }
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("rep/report.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 3);
}

#[test]
fn train_infer_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "5");
    std::fs::write(dir.path().join("cfg.txt"), "preset=toy\niterations=3\nval_every=2\n").unwrap();
    let o = comma(&["train", "--config", "cfg.txt", "--data", "data", "--out", "run", "--ablate", "gloss"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "iter,loss,loss_local,loss_global,val_dice");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].ends_with(',') && !lines[2].ends_with(','));
    let cfg = std::fs::read_to_string(dir.path().join("run/config.txt")).unwrap();
    assert!(cfg.contains("ablate.gloss=true") && cfg.contains("iterations=3"));

    let o = comma(&["infer", "--run", "run", "--data", "data", "--split", "all", "--out", "pred"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = comma(&["eval", "--pred", "pred", "--gt", "data"], dir.path());
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 4);

    let o = comma(&["infer", "--run", "run", "--input", "data/case_000.vvol", "--out", "one.vvol"], dir.path());
    assert!(o.status.success());
    assert_eq!(std::fs::read(dir.path().join("one.vvol")).unwrap(), std::fs::read(dir.path().join("pred/case_000_mask.vvol")).unwrap());
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "6");
    let run = |env: Option<&str>, out: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_comma"));
        c.args(["gen-data", "--out", out, "--cases", "1", "--size", "16,16,16", "--depth", "1"]).current_dir(dir.path()).env_remove("COMMA_SEED");
        if let Some(s) = env {
            c.env("COMMA_SEED", s);
        }
        assert!(c.output().unwrap().status.success());
        std::fs::read(dir.path().join(out).join("case_000.vvol")).unwrap()
    };
    let seeded = comma(&["gen-data", "--out", "s6", "--cases", "1", "--seed", "6", "--size", "16,16,16", "--depth", "1"], dir.path());
    assert!(seeded.status.success());
    let explicit = std::fs::read(dir.path().join("s6/case_000.vvol")).unwrap();
    assert_eq!(run(Some("6"), "e6"), explicit);
    assert_ne!(run(None, "e0"), explicit);
    let mut c = Command::new(env!("CARGO_BIN_EXE_comma"));
    let o = c.args(["bench-scan", "--lengths", "8"]).env("COMMA_SEED", "x").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "7");
    assert_eq!(comma(&["train", "--data", "data"], dir.path()).status.code(), Some(2));
    assert_eq!(comma(&["eval", "--pred", "missing", "--gt", "data"], dir.path()).status.code(), Some(2));
    assert_eq!(comma(&["gradcheck", "--check", "nothing"], dir.path()).status.code(), Some(2));
    std::fs::write(dir.path().join("cfg.txt"), "preset=toy\niterations=4\nlr=1e30\n").unwrap();
    let o = comma(&["train", "--config", "cfg.txt", "--data", "data", "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("iteration"));
}

#[test]
fn gradcheck_and_indices_print_csv() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "8");
    let o = comma(&["gradcheck", "--seeds", "2", "--check", "linear", "--check", "softmax"], dir.path());
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 3);
    assert!(out.lines().skip(1).all(|l| l.ends_with(",PASS")));
    let o = comma(&["indices", "--input", "data"], dir.path());
    let out = stdout(&o);
    assert_eq!(out.lines().next(), Some("case,si,di"));
    assert_eq!(out.lines().count(), 4);
}

#[test]
fn bench_scan_writes_parseable_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = comma(&["bench-scan", "--lengths", "16,32", "--repeats", "1", "--out", "b.csv"], dir.path());
    assert!(o.status.success());
    let rows = parse_bench_csv(&std::fs::read_to_string(dir.path().join("b.csv")).unwrap()).unwrap();
    assert_eq!(rows.iter().map(|r| r.len).collect::<Vec<_>>(), [16, 32]);
    assert!(rows[1].attn_bytes > rows[0].attn_bytes);
}
