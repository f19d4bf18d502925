use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use cscd_core::calibrate::{build_tables, calibrate_tables, CalibrationTable};
use cscd_core::cascade::{batch_infer, build_cascade, CascadeModel, CascadeSpec, MacTable, Preset, ThresholdVector};
use cscd_core::data::{split_indices, standardize, Dataset, DatasetKind, Split};
use cscd_core::eval::{
    alpha_csv, alpha_curve, confidence_histogram, evaluate_recorded, fmt_g9, hist_csv, spearman, sweep_csv,
    sweep_recorded,
};
use cscd_core::persist::{load_model, load_thresholds, save_model, save_thresholds};
use cscd_core::rng::rng_from;
use cscd_core::train::{ci_bt_train, trunk_phase_epochs, TrainConfig};
use cscd_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "cscd", version, about = "Train, calibrate and evaluate early-exit classifier cascades")]
struct Cli {
    /// Directory holding the dataset files.
    #[arg(long, global = true, env = "CSCD_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,
    #[arg(long, global = true, default_value = "fashion")]
    dataset: String,
    /// Model file to read (or to write, for `train` without `--out`).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for inference and evaluation; training is always
    /// single-threaded.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Backtrack-train a cascade.
    Train(TrainArgs),
    /// Compute exit thresholds for a tolerance.
    Calibrate(CalibrateArgs),
    /// Accuracy and cost of the cascade on the test set.
    Eval(EvalArgs),
    /// Calibrate and evaluate for several tolerances.
    Sweep(SweepArgs),
    /// Early-exit inference on individual test images.
    Infer(InferArgs),
    /// Retained accuracy against confidence level for one component.
    AlphaCurve(AlphaArgs),
    /// Confidence histograms of every component on the test set.
    Histogram(HistArgs),
    /// Per-layer multiply-accumulate counts.
    MacReport(MacArgs),
}

#[derive(Args, Debug, Clone)]
struct SubsetArgs {
    /// Use a label-stratified subset of this many training images.
    #[arg(long)]
    train_limit: Option<usize>,
    /// `train`, or `holdout:<fraction>` to reserve part of the training set
    /// for calibration (training then uses the rest).
    #[arg(long, default_value = "train")]
    calib_split: CalibSplit,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Preset architecture (`mini`, `small`, `deep`) or a spec file.
    #[arg(long, default_value = "mini")]
    spec: String,
    /// Epochs per branch classifier; the trunk phase runs 1.25x as many.
    #[arg(long, default_value_t = 4)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    l2: f64,
    #[arg(long)]
    augment: bool,
    #[command(flatten)]
    subset: SubsetArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    epsilon: f64,
    #[command(flatten)]
    subset: SubsetArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Threshold file, `zeros` or `disabled`.
    #[arg(long, default_value = "disabled")]
    thresholds: String,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "0,0.01,0.02,0.04,0.08")]
    epsilons: Vec<f64>,
    #[command(flatten)]
    subset: SubsetArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long, default_value = "disabled")]
    thresholds: String,
    /// First test-set index.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value_t = 1)]
    count: usize,
}

#[derive(Args, Debug)]
struct AlphaArgs {
    #[arg(long)]
    component: usize,
    #[arg(long, default_value_t = 20)]
    grid: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct HistArgs {
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MacArgs {
    /// Preset or spec file; defaults to the spec of `--model`.
    #[arg(long)]
    spec: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum CalibSplit {
    Train,
    Holdout(f64),
}

impl FromStr for CalibSplit {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "train" {
            return Ok(CalibSplit::Train);
        }
        let frac = s
            .strip_prefix("holdout:")
            .and_then(|f| f.parse::<f64>().ok())
            .ok_or_else(|| format!("expected `train` or `holdout:<fraction>`, got `{s}`"))?;
        if !(frac > 0.0 && frac < 1.0) {
            return Err(format!("holdout fraction must be in (0, 1), got {frac}"));
        }
        Ok(CalibSplit::Holdout(frac))
    }
}

fn main() -> ExitCode {
    keep_freed_memory();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Activations are allocated and dropped every batch. Left to its defaults,
/// glibc hands each multi-megabyte buffer back to the kernel and the next
/// batch pays for fresh zeroed pages, which costs more than the arithmetic.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn keep_freed_memory() {
    // SAFETY: mallopt only adjusts allocator tuning knobs; it runs before
    // any other thread exists.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn keep_freed_memory() {}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFiniteLoss { .. } => 3,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        Error::Io { .. }
        | Error::Gzip(_)
        | Error::BadMagic { .. }
        | Error::Truncated { .. }
        | Error::TrailingBytes { .. }
        | Error::CountMismatch { .. }
        | Error::CifarRecordSize(_)
        | Error::CifarLabel { .. }
        | Error::ModelMagic(_)
        | Error::ModelVersion { .. }
        | Error::Crc { .. }
        | Error::Misaligned(_) => 4,
        _ => 2,
    }
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn run(cli: &Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .map_err(|e| config_error(e.to_string()))?;
    eprint!("{}", resolved_config(cli));
    match &cli.command {
        Command::Train(a) => cmd_train(cli, a),
        Command::Calibrate(a) => cmd_calibrate(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Sweep(a) => cmd_sweep(cli, a),
        Command::Infer(a) => cmd_infer(cli, a),
        Command::AlphaCurve(a) => cmd_alpha(cli, a),
        Command::Histogram(a) => cmd_hist(cli, a),
        Command::MacReport(a) => cmd_mac_report(cli, a),
    }
}

fn resolved_config(cli: &Cli) -> String {
    let mut s = String::from("# resolved configuration\n");
    let _ = writeln!(s, "data_dir={}", cli.data_dir.display());
    let _ = writeln!(s, "dataset={}", cli.dataset);
    let _ = writeln!(s, "model={}", cli.model.as_ref().map_or("-".into(), |p| p.display().to_string()));
    let _ = writeln!(s, "seed={}", cli.seed);
    let _ = writeln!(s, "threads={}", cli.threads);
    let _ = writeln!(s, "command={:?}", cli.command);
    s
}

/// Standardized training and test sets; statistics always come from the
/// complete training file.
fn load_data(cli: &Cli, need_test: bool) -> Result<(Dataset, Option<Dataset>)> {
    let kind: DatasetKind = cli.dataset.parse()?;
    let mut train = kind.load(&cli.data_dir, Split::Train)?;
    let mut test = if need_test {
        Some(kind.load(&cli.data_dir, Split::Test)?)
    } else {
        None
    };
    match test.as_mut() {
        Some(t) => standardize(&mut train, &mut [t])?,
        None => standardize(&mut train, &mut [])?,
    };
    Ok((train, test))
}

/// Applies `--train-limit` and `--calib-split`: returns the training part
/// and the calibration part.
fn partition(train: Dataset, subset: &SubsetArgs, seed: u64) -> Result<(Dataset, Dataset)> {
    let train = match subset.train_limit {
        Some(0) => return Err(config_error("--train-limit must be >= 1")),
        Some(limit) if limit < train.len() => {
            let frac = limit as f64 / train.len() as f64;
            let (keep, _) = split_indices(&train.labels, train.num_classes, frac, 1.0 - frac, &mut rng_from(seed, &[7, 1]))?;
            train.subset(&keep)
        }
        _ => train,
    };
    match subset.calib_split {
        CalibSplit::Train => Ok((train.clone(), train)),
        CalibSplit::Holdout(frac) => {
            let (a, b) = split_indices(&train.labels, train.num_classes, 1.0 - frac, frac, &mut rng_from(seed, &[7, 2]))?;
            Ok((train.subset(&a), train.subset(&b)))
        }
    }
}

fn resolve_spec(name: &str, input_shape: [usize; 3], num_classes: usize) -> Result<CascadeSpec> {
    if let Ok(preset) = name.parse::<Preset>() {
        return Ok(preset.spec(input_shape, num_classes));
    }
    let path = Path::new(name);
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CascadeSpec::parse(&text)
}

fn model_path(cli: &Cli) -> Result<&Path> {
    cli.model.as_deref().ok_or_else(|| config_error("--model is required"))
}

fn open_model(cli: &Cli) -> Result<CascadeModel> {
    load_model(model_path(cli)?)
}

fn resolve_thresholds(arg: &str, n: usize) -> Result<ThresholdVector> {
    let t = match arg {
        "zeros" => ThresholdVector::zeros(n),
        "disabled" => ThresholdVector::disabled(n),
        path => load_thresholds(Path::new(path))?,
    };
    if t.len() != n {
        return Err(Error::InvalidThresholds(format!("{} thresholds for {n} components", t.len())));
    }
    Ok(t)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        learning_rate: a.lr,
        momentum: a.momentum,
        l2: a.l2,
        seed: cli.seed,
        augment: a.augment,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let out = a
        .out
        .as_deref()
        .or(cli.model.as_deref())
        .ok_or_else(|| config_error("--out (or --model) is required"))?;
    let (full_train, test) = load_data(cli, true)?;
    let test = test.expect("requested");
    let spec = resolve_spec(&a.spec, full_train.sample_shape(), full_train.num_classes)?;
    let (train, _) = partition(full_train, &a.subset, cli.seed)?;
    eprintln!(
        "training on {} images, trunk phase {} epochs, branch phases {} epochs",
        train.len(),
        trunk_phase_epochs(cfg.epochs),
        cfg.epochs
    );
    let mut model = build_cascade(spec, cli.seed)?;
    let report = ci_bt_train(&mut model, &train, &cfg, Some(&test), |s| eprintln!("{s}"))?;
    save_model(&model, out)?;

    let mut s = String::new();
    let _ = writeln!(s, "model {}", out.display());
    let _ = writeln!(s, "epochs_per_phase {:?}", report.epochs_per_phase());
    for p in &report.phases {
        if let Some(last) = p.epochs.last() {
            let _ = writeln!(
                s,
                "phase {} final_train_loss {} final_train_acc {} frozen_unchanged {}",
                p.phase,
                fmt_g9(last.loss),
                fmt_g9(last.accuracy),
                p.frozen_unchanged()
            );
        }
    }
    if let Some(acc) = &report.eval_accuracy {
        let cols: Vec<String> = acc.iter().map(|&v| fmt_g9(v)).collect();
        let _ = writeln!(s, "test_accuracy_per_component {}", cols.join(" "));
    }
    let _ = writeln!(s, "wall_clock_s {:.1}", report.wall_clock.as_secs_f64());
    print!("{s}");
    Ok(())
}

fn calib_tables(cli: &Cli, model: &CascadeModel, subset: &SubsetArgs) -> Result<Vec<CalibrationTable>> {
    let (train, _) = load_data(cli, false)?;
    let (_, calib) = partition(train, subset, cli.seed)?;
    build_tables(&model.all_outputs(&calib.images, 256)?, &calib.labels)
}

fn cmd_calibrate(cli: &Cli, a: &CalibrateArgs) -> Result<()> {
    let model = open_model(cli)?;
    let tables = calib_tables(cli, &model, &a.subset)?;
    let result = calibrate_tables(&tables, model.num_components(), a.epsilon)?;
    if let Some(out) = &a.out {
        save_thresholds(&result.thresholds, out)?;
        eprintln!("thresholds written to {}", out.display());
    }
    print!("{}", result.to_text());
    Ok(())
}

fn test_outputs(cli: &Cli, model: &CascadeModel) -> Result<(Dataset, Vec<Vec<cscd_core::cascade::ClassifierOutput>>)> {
    let (_, test) = load_data(cli, true)?;
    let test = test.expect("requested");
    let outputs = model.all_outputs(&test.images, 256)?;
    Ok((test, outputs))
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let model = open_model(cli)?;
    let thresholds = resolve_thresholds(&a.thresholds, model.num_components())?;
    let macs = MacTable::new(&model.spec)?;
    let start = std::time::Instant::now();
    let (test, outputs) = test_outputs(cli, &model)?;
    let report = evaluate_recorded(&outputs, &test.labels, &thresholds, &macs)?;
    print!("{}", report.to_text());
    eprintln!("wall_clock_s {:.2}", start.elapsed().as_secs_f64());
    Ok(())
}

fn cmd_sweep(cli: &Cli, a: &SweepArgs) -> Result<()> {
    let model = open_model(cli)?;
    let macs = MacTable::new(&model.spec)?;
    let tables = calib_tables(cli, &model, &a.subset)?;
    let (test, outputs) = test_outputs(cli, &model)?;
    let points: Vec<_> = sweep_recorded(&tables, &outputs, &test.labels, &a.epsilons, &macs)?
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    emit(a.out.as_deref(), &sweep_csv(&points))
}

fn cmd_infer(cli: &Cli, a: &InferArgs) -> Result<()> {
    let model = open_model(cli)?;
    let thresholds = resolve_thresholds(&a.thresholds, model.num_components())?;
    let macs = MacTable::new(&model.spec)?;
    let (_, test) = load_data(cli, true)?;
    let test = test.expect("requested");
    let end = a.index.checked_add(a.count).filter(|&e| e <= test.len()).ok_or_else(|| {
        config_error(format!("indices {}..{} outside the {}-image test set", a.index, a.index + a.count, test.len()))
    })?;
    let traces = batch_infer(&model, &thresholds, &macs, &test.images.rows(a.index, end))?;
    let mut s = String::new();
    for (i, t) in traces.iter().enumerate() {
        let _ = writeln!(
            s,
            "index={} label={} predicted={} exit={} confidence={} macs={}",
            a.index + i,
            test.labels[a.index + i],
            t.predicted_class,
            t.exit_component,
            fmt_g9(f64::from(t.confidence)),
            t.macs_used
        );
    }
    print!("{s}");
    Ok(())
}

fn cmd_alpha(cli: &Cli, a: &AlphaArgs) -> Result<()> {
    let model = open_model(cli)?;
    if a.component >= model.num_components() {
        return Err(Error::ComponentOutOfRange {
            index: a.component,
            count: model.num_components(),
        });
    }
    let (test, outputs) = test_outputs(cli, &model)?;
    let table = CalibrationTable::from_outputs(&outputs, a.component, &test.labels)?;
    let curve = alpha_curve(&table, model.num_classes(), a.grid)?;
    let xs: Vec<f64> = curve.iter().map(|p| p.delta).collect();
    let ys: Vec<f64> = curve.iter().map(|p| p.alpha).collect();
    eprintln!(
        "component {} points {} spearman {}",
        a.component,
        curve.len(),
        fmt_g9(spearman(&xs, &ys))
    );
    emit(a.out.as_deref(), &alpha_csv(&curve))
}

fn cmd_hist(cli: &Cli, a: &HistArgs) -> Result<()> {
    let model = open_model(cli)?;
    let (_, outputs) = test_outputs(cli, &model)?;
    emit(a.out.as_deref(), &hist_csv(&confidence_histogram(&outputs, a.bins)?))
}

fn cmd_mac_report(cli: &Cli, a: &MacArgs) -> Result<()> {
    let spec = match (&a.spec, &cli.model) {
        (Some(name), _) => {
            let kind: DatasetKind = cli.dataset.parse()?;
            let (shape, classes) = match kind {
                DatasetKind::Cifar10 => ([3, 32, 32], 10),
                DatasetKind::Mnist | DatasetKind::Fashion => ([1, 28, 28], 10),
            };
            resolve_spec(name, shape, classes)?
        }
        (None, Some(path)) => load_model(path)?.spec,
        (None, None) => return Err(config_error("mac-report needs --spec or --model")),
    };
    let table = MacTable::new(&spec)?;
    let mut s = String::from("component,part,index,layer,macs\n");
    for l in &table.layers {
        let _ = writeln!(s, "{},{},{},{},{}", l.component, l.part, l.index, l.layer, l.macs);
    }
    for m in 0..table.num_components() {
        let _ = writeln!(
            s,
            "# component {m}: trunk {} classifier {} cumulative {}",
            table.trunk[m],
            table.classifier[m],
            table.cumulative(m)
        );
    }
    let _ = writeln!(s, "# full_network {}", table.full_network());
    print!("{s}");
    Ok(())
}
