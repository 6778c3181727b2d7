//! The `comma` command line.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use comma_core::bench::bench_scan_vs_attention;
use comma_core::grad_suite;
use comma_core::metrics::{dispersion_index, evaluate, sparsity_index, EvalOptions, NSD_TAU};
use comma_core::model::CommaConfig;
use comma_core::phantom::{PhantomSpec, Split, DEFAULT_SPLIT};
use comma_core::train::{self, infer, ModelState};
use comma_core::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, CONFIG_FILE, MODEL_FILE};
use crate::config::{self, KeyValues};
use crate::dataset::{make_dataset, Manifest};
use crate::error::{create_dir, write, IoError, Result};
use crate::report::{self, ReportRow, METRICS_HEADER};
use crate::vvol::{self, VolumeFile};

pub const SEED_ENV: &str = "COMMA_SEED";

#[derive(Debug, Parser)]
#[command(name = "comma", version, about = "Vessel segmentation with coordinate-aware global context")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a cohort of synthetic phantoms and its manifest.
    GenData(GenData),
    /// Train a model on the train split of a dataset.
    Train(TrainArgs),
    /// Predict masks for a dataset split or a single volume.
    Infer(InferArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Sparsity and dispersion indices of masks.
    Indices(IndicesArgs),
    /// Finite-difference gradient checks of every differentiable operator.
    Gradcheck(GradcheckArgs),
    /// Time a ccMamba block against full self-attention.
    BenchScan(BenchArgs),
}

fn triple<T: std::str::FromStr>(s: &str) -> std::result::Result<[T; 3], String> {
    let v: Vec<T> = s.split(',').map(|x| x.trim().parse().map_err(|_| format!("bad value `{x}`"))).collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected three comma-separated values, found `{s}`"))
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub cases: usize,
    /// Defaults to $COMMA_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = triple::<usize>, default_value = "64,64,64")]
    pub size: [usize; 3],
    /// Train, val and test fractions.
    #[arg(long, value_parser = triple::<f64>)]
    pub splits: Option<[f64; 3]>,
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    #[arg(long, default_value_t = 3.0)]
    pub radius: f64,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Part {
    Lfe,
    Glf,
    Gloss,
    Randcoord,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// key=value configuration; the desk preset when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory or manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for the checkpoint, config and metrics log.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub ablate: Vec<Part>,
    /// Overrides one configuration key, e.g. `--set lambda=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Continue from the state saved in `--out`.
    #[arg(long)]
    pub resume: bool,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Parameters to use instead of the run's model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory or manifest.
    #[arg(long, conflicts_with = "input", required_unless_present = "input")]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// A single f32 volume; `--out` is then the output file.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    X,
    Y,
    Z,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted masks.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory holding ground-truth masks under the same file names.
    #[arg(long)]
    pub gt: PathBuf,
    /// Writes report.csv and report.json here instead of printing CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = NSD_TAU)]
    pub tau: f64,
    #[arg(long, value_parser = triple::<f64>, default_value = "1,1,1")]
    pub spacing: [f64; 3],
    #[arg(long, value_enum, requires = "small_vessel_threshold")]
    pub small_vessel_axis: Option<Axis>,
    /// Voxels beyond this coordinate count as small vessels.
    #[arg(long, requires = "small_vessel_axis")]
    pub small_vessel_threshold: Option<usize>,
}

#[derive(Debug, Args)]
pub struct IndicesArgs {
    /// A mask file or a directory of volumes.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    /// Run only the named checks.
    #[arg(long)]
    pub check: Vec<String>,
    #[arg(long)]
    pub list: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "4096,8192,16384")]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Writes to stdout; a closed pipe ends output quietly.
fn emit(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(IoError::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| IoError::Usage(format!("{SEED_ENV}=`{v}` is not an integer"))),
        Err(_) => Ok(None),
    }
}

fn seed_or_env(seed: Option<u64>) -> Result<u64> {
    Ok(match seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Indices(a) => indices_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::BenchScan(a) => bench_cmd(a),
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let spec = PhantomSpec { extents: a.size, depth: a.depth, root_radius: a.radius, ..PhantomSpec::default() };
    let m = make_dataset(&a.out, a.cases, &spec, seed_or_env(a.seed)?, a.splits.unwrap_or(DEFAULT_SPLIT), a.workers)?;
    let counts = Split::ALL.map(|s| m.split(s).count());
    eprintln!("wrote {} cases to {} (train {}, val {}, test {})", a.cases, a.out.display(), counts[0], counts[1], counts[2]);
    Ok(())
}

/// The configuration of a training run: the file, then `$COMMA_SEED` if the
/// file sets no seed, then flags.
pub fn train_config(a: &TrainArgs) -> Result<CommaConfig> {
    let mut cfg = CommaConfig::desk();
    let mut file_seed = false;
    if let Some(path) = &a.config {
        let text = String::from_utf8_lossy(&crate::error::read(path)?).into_owned();
        let kv = KeyValues::parse(&text).map_err(|e| e.in_file(path))?;
        file_seed = kv.get("seed").is_some();
        cfg = config::apply_all(cfg, &kv).map_err(|e| e.in_file(path))?;
    }
    if !file_seed {
        if let Some(s) = env_seed()? {
            cfg.seed = s;
        }
    }
    for kv in &a.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| IoError::Usage(format!("--set expects KEY=VALUE, found `{kv}`")))?;
        config::apply(&mut cfg, k.trim(), v.trim()).map_err(|e| IoError::Usage(format!("--set {kv}: {e}")))?;
    }
    for part in &a.ablate {
        match part {
            Part::Lfe => cfg.ablation.lfe = false,
            Part::Glf => cfg.ablation.glf = false,
            Part::Gloss => cfg.ablation.global_loss = false,
            Part::Randcoord => cfg.ablation.randomize_coords = true,
        }
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn open_log(path: &Path, append: bool) -> Result<std::fs::File> {
    let mut opts = std::fs::OpenOptions::new();
    opts.create(true);
    if append {
        opts.append(true);
    } else {
        opts.write(true).truncate(true);
    }
    let mut f = opts.open(path).map_err(|e| IoError::io(path, e))?;
    if !append {
        writeln!(f, "{METRICS_HEADER}").map_err(|e| IoError::io(path, e))?;
    }
    Ok(f)
}

pub const METRICS_FILE: &str = "metrics.csv";

fn train_cmd(a: TrainArgs) -> Result<()> {
    let manifest = Manifest::read(&a.data)?;
    let cases = |s| -> Result<Vec<_>> { Ok(manifest.load(s)?.into_iter().map(|(_, c)| c).collect()) };
    let (train_cases, val_cases) = (cases(Split::Train)?, cases(Split::Val)?);
    if train_cases.is_empty() {
        return Err(IoError::Usage(format!("{} has no train cases", a.data.display())));
    }
    create_dir(&a.out)?;
    let (cfg, net, mut state) = if a.resume {
        let (mut cfg, _, state) = checkpoint::load_run(&a.out)?;
        if let Some(n) = a.iterations {
            cfg.iterations = n;
        }
        let (net, _) = checkpoint::load_model(&cfg, &a.out.join(MODEL_FILE))?;
        (cfg, net, state)
    } else {
        let cfg = train_config(&a)?;
        let mut store = ParamStore::new();
        let net = comma_core::model::CommaNet::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        let state = ModelState::new(store, cfg.seed);
        (cfg, net, state)
    };
    write(&a.out.join(CONFIG_FILE), config::to_string(&cfg).as_bytes())?;
    let log_path = a.out.join(METRICS_FILE);
    let mut log = open_log(&log_path, a.resume)?;
    let records = train::train(&net, &mut state, &train_cases, &val_cases, a.workers, |rec, st| {
        writeln!(log, "{}", report::metrics_row(rec)).map_err(|e| comma_core::Error::InvalidArgument { op: "metrics log", msg: e.to_string() })?;
        if let Some(d) = rec.val_dice {
            eprintln!("iter {} loss {:.4} val_dice {:.4}", rec.iteration, rec.losses.total, d);
        }
        if cfg.checkpoint_every > 0 && rec.iteration % cfg.checkpoint_every == 0 {
            checkpoint::save_run(&a.out, &cfg, st).map_err(|e| comma_core::Error::InvalidArgument { op: "checkpoint", msg: e.to_string() })?;
        }
        Ok(true)
    });
    let records = match records {
        Ok(r) => r,
        Err(e) => {
            log.flush().ok();
            return Err(e.into());
        }
    };
    checkpoint::save_run(&a.out, &cfg, &state)?;
    if let Some(last) = records.last() {
        eprintln!("finished at iteration {} with loss {:.4}", last.iteration, last.losses.total);
    }
    Ok(())
}

fn infer_cmd(a: InferArgs) -> Result<()> {
    let cfg = config::read(&a.run.join(CONFIG_FILE))?;
    let ckpt = a.checkpoint.clone().unwrap_or_else(|| a.run.join(MODEL_FILE));
    let (net, params) = checkpoint::load_model(&cfg, &ckpt)?;
    if let Some(input) = &a.input {
        let image = vvol::read_volume(input)?;
        let pred = infer(&net, &params, &image, a.workers)?;
        return vvol::write_mask(&a.out, &pred.mask);
    }
    let data = a.data.as_ref().expect("clap requires --data without --input");
    let manifest = Manifest::read(data)?;
    let splits: Vec<Split> = match a.split.as_str() {
        "all" => Split::ALL.to_vec(),
        s => vec![s.parse()?],
    };
    create_dir(&a.out)?;
    for e in manifest.entries.iter().filter(|e| splits.contains(&e.split)) {
        let image = vvol::read_volume(&manifest.path(&e.volume))?;
        let pred = infer(&net, &params, &image, a.workers)?;
        let name = e.mask.file_name().ok_or_else(|| IoError::Usage(format!("bad mask path {}", e.mask.display())))?;
        vvol::write_mask(&a.out.join(name), &pred.mask)?;
    }
    Ok(())
}

fn vvol_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| IoError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| IoError::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "vvol") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

/// Scores every binary mask in `pred` against the same-named file in `gt`.
/// Real-valued volumes are skipped.
pub fn evaluate_dirs(pred: &Path, gt: &Path, opts: &EvalOptions) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for p in vvol_files(pred)? {
        let VolumeFile::Binary(pm) = vvol::read_file(&p)? else { continue };
        let name = p.file_name().expect("listed files have names");
        let gm = vvol::read_mask(&gt.join(name))?;
        let r = evaluate(&pm, &gm, opts).map_err(|e| IoError::from(e).in_file(&p))?;
        rows.push(ReportRow::new(stem(&p), &r));
    }
    if rows.is_empty() {
        return Err(IoError::Usage(format!("no masks in {}", pred.display())));
    }
    Ok(rows)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let small_vessel = a.small_vessel_axis.zip(a.small_vessel_threshold).map(|(ax, t)| (ax as usize, t));
    let opts = EvalOptions { tau: a.tau, spacing: a.spacing, small_vessel };
    let rows = evaluate_dirs(&a.pred, &a.gt, &opts)?;
    let csv = report::report_csv(&rows);
    match &a.out {
        Some(dir) => {
            create_dir(dir)?;
            write(&dir.join("report.csv"), csv.as_bytes())?;
            write(&dir.join("report.json"), report::report_json(&rows)?.as_bytes())
        }
        None => emit(&csv),
    }
}

fn indices_cmd(a: IndicesArgs) -> Result<()> {
    let files = if a.input.is_dir() { vvol_files(&a.input)? } else { vec![a.input.clone()] };
    let mut out = String::from("case,si,di\n");
    for p in files {
        if let VolumeFile::Binary(m) = vvol::read_file(&p)? {
            out += &format!("{},{},{}\n", stem(&p), sparsity_index(&m), dispersion_index(&m));
        }
    }
    emit(&out)
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    if a.list {
        return emit(&grad_suite::check_names().map(|n| format!("{n}\n")).collect::<String>());
    }
    let names: Vec<String> = if a.check.is_empty() { grad_suite::check_names().map(String::from).collect() } else { a.check };
    emit("check,worst,tolerance,result\n")?;
    let mut failed = 0;
    for n in &names {
        let outcome = grad_suite::run_named(n, a.seeds).ok_or_else(|| IoError::Usage(format!("unknown check `{n}`")))??;
        let ok = outcome.passed();
        failed += usize::from(!ok);
        emit(&format!("{},{:e},{:e},{}\n", outcome.name, outcome.worst, outcome.tolerance, if ok { "PASS" } else { "FAIL" }))?;
    }
    if failed > 0 {
        return Err(IoError::GradCheck { failed });
    }
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let rows = bench_scan_vs_attention(&a.lengths, a.dim, a.repeats, seed_or_env(a.seed)?)?;
    let csv = report::bench_csv(&rows);
    match &a.out {
        Some(p) => write(p, csv.as_bytes()),
        None => emit(&csv),
    }
}
