use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use mapfuse::diagnostics;
use mapfuse::image_io::load_pair_root;
use mapfuse::metrics::{self, append_csv, evaluate_all, parse_metric_list, Metric};
use mapfuse::nn::GradCheckConfig;
use mapfuse::train::{
    ablate, infer_fuse, load_checkpoint, save_checkpoint, synthetic_pairs, train_with_progress,
    AblationAxes, AblationRow, SyntheticMode, TrainConfig, DEFAULT_SEED,
};
use mapfuse::{load_image, save_image, ArchConfig, Error, PairDataset};

#[derive(Parser, Debug)]
#[command(name = "mapfuse", version, about = "Infrared/visible image fusion: train, fuse, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network on a directory with X/ and Y/ subfolders.
    Train(TrainArgs),
    /// Fuse one pair with a trained checkpoint.
    Fuse(FuseArgs),
    /// Append fusion metrics for one triple to a CSV file.
    Eval(EvalArgs),
    /// Train and evaluate a grid of configurations.
    Ablate(AblateArgs),
    /// Finite-difference check of every layer and the full network.
    Gradcheck(GradcheckArgs),
    /// Compare metrics and loss against their slow oracles.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    /// key=value file applied beneath the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// add, concat or mapping.
    #[arg(long)]
    fusion: Option<String>,
    /// mean or var.
    #[arg(long = "loss-gate")]
    loss_gate: Option<String>,
    #[arg(long)]
    depth: Option<usize>,
    /// SSIM window stride in pixels.
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long = "base-channels")]
    base_channels: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Step log CSV; defaults to `<out>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Debug)]
struct FuseArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    y: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    y: PathBuf,
    #[arg(long)]
    fused: PathBuf,
    /// Comma-separated metric names; defaults to EI,CE,SF,EN,Qabf,MS_SSIM,SD,VIF.
    #[arg(long)]
    metrics: Option<String>,
    #[arg(long)]
    csv: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Directory with X/ and Y/; omit to use generated pairs.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Number of generated pairs (side = crop) when no --data is given.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Subset of fusion,loss_gate,depth.
    #[arg(long, default_value = "fusion")]
    axes: String,
    /// Pairs held out for evaluation (taken from the end in id order).
    #[arg(long, default_value_t = 2)]
    holdout: usize,
    #[arg(long)]
    metrics: Option<String>,
    /// Concurrent training runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long = "base-channels", default_value_t = 16)]
    base_channels: usize,
    #[arg(long, default_value = "mapping")]
    fusion: String,
    /// Entries probed per parameter tensor.
    #[arg(long, default_value_t = 6)]
    entries: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    #[arg(long, default_value_t = 50)]
    triples: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

/// Usage problems exit with 2, everything else with 1.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        let usage = err
            .chain()
            .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config(_))));
        Failure {
            code: if usage { 2 } else { 1 },
            err,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        err: anyhow::anyhow!(msg.into()),
    }
}

fn resolve_config(flags: &TrainFlags) -> Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &flags.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(|e| Failure { code: 2, err: e })?;
        cfg.apply_kv(&text)
            .with_context(|| format!("in config {}", path.display()))?;
    }
    let set = |cfg: &mut TrainConfig, key: &str, v: Option<String>| -> Result<(), Failure> {
        if let Some(v) = v {
            cfg.set(key, &v)?;
        }
        Ok(())
    };
    set(&mut cfg, "epochs", flags.epochs.map(|v| v.to_string()))?;
    set(&mut cfg, "steps", flags.steps.map(|v| v.to_string()))?;
    set(&mut cfg, "lr", flags.lr.map(|v| v.to_string()))?;
    set(&mut cfg, "batch", flags.batch.map(|v| v.to_string()))?;
    set(&mut cfg, "crop", flags.crop.map(|v| v.to_string()))?;
    set(&mut cfg, "seed", flags.seed.map(|v| v.to_string()))?;
    set(&mut cfg, "fusion", flags.fusion.clone())?;
    set(&mut cfg, "loss_gate", flags.loss_gate.clone())?;
    set(&mut cfg, "depth", flags.depth.map(|v| v.to_string()))?;
    set(&mut cfg, "stride", flags.stride.map(|v| v.to_string()))?;
    set(&mut cfg, "base_channels", flags.base_channels.map(|v| v.to_string()))?;
    let seed_in_file = flags
        .config
        .as_ref()
        .and_then(|p| fs::read_to_string(p).ok())
        .is_some_and(|t| t.lines().any(|l| l.trim_start().starts_with("seed")));
    if flags.seed.is_none() && !seed_in_file {
        info!("no --seed given; using default seed {DEFAULT_SEED}");
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let cfg = resolve_config(&args.flags)?;
    if !args.data.is_dir() {
        return Err(usage(format!("--data {} is not a directory", args.data.display())));
    }
    let dataset = load_pair_root(&args.data, cfg.crop)?;
    info!("training on {} pairs: {}", dataset.len(), cfg.to_kv().trim().replace('\n', " "));
    let every = 10usize;
    let result = train_with_progress(&dataset, &cfg, |r| {
        if r.step % every == 0 {
            info!("step {} epoch {} loss {:.6} frac_x {:.3}", r.step, r.epoch, r.loss, r.frac_x);
        }
    });
    let (ckpt, log) = match result {
        Ok(r) => r,
        Err(Error::NonFiniteLoss { step, last_good }) => {
            let rescue = with_suffix(&args.out, ".last_good");
            save_checkpoint(&last_good, &rescue)?;
            return Err(anyhow::anyhow!(
                "non-finite loss at step {step}; last good parameters saved to {}",
                rescue.display()
            )
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&ckpt, &args.out)?;
    let log_path = args.log.unwrap_or_else(|| with_suffix(&args.out, ".log.csv"));
    fs::write(&log_path, log.to_csv())
        .with_context(|| format!("writing {}", log_path.display()))?;
    for e in log.epochs() {
        info!("epoch {}: {} steps, mean loss {:.6}", e.epoch, e.steps, e.mean_loss);
    }
    info!("wrote {} and {}", args.out.display(), log_path.display());
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_fuse(args: FuseArgs) -> CmdResult {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let x = load_image(&args.x)?;
    let y = load_image(&args.y)?;
    let fused = infer_fuse(&ckpt, &x, &y)?;
    save_image(&fused, &args.out)?;
    eprintln!(
        "EN {:.4}  SD {:.4}  SF {:.4}",
        metrics::entropy(&fused),
        metrics::standard_deviation(&fused),
        metrics::spatial_frequency(&fused)
    );
    Ok(())
}

fn metric_list(arg: Option<&str>) -> Result<Vec<Metric>, Failure> {
    match arg {
        Some(list) => Ok(parse_metric_list(list)?),
        None => Ok(Metric::DEFAULT.to_vec()),
    }
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let selected = metric_list(args.metrics.as_deref())?;
    let x = load_image(&args.x)?;
    let y = load_image(&args.y)?;
    let f = load_image(&args.fused)?;
    let report = evaluate_all(&x, &y, &f, &selected)?;
    append_csv(&args.csv, &report)?;
    let mut out = io::stdout().lock();
    writeln!(out, "{}", report.header().join(",")).context("writing stdout")?;
    writeln!(out, "{}", report.row().join(",")).context("writing stdout")?;
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> CmdResult {
    let cfg = resolve_config(&args.flags)?;
    let axes = AblationAxes::parse(&args.axes)?;
    let selected = metric_list(args.metrics.as_deref())?;
    let dataset = match (&args.data, args.synthetic) {
        (Some(dir), _) => load_pair_root(dir, cfg.crop)?,
        (None, Some(n)) => PairDataset::new(synthetic_pairs(n, cfg.crop, cfg.seed, SyntheticMode::Modal)?, cfg.crop)?,
        (None, None) => return Err(usage("ablate needs --data DIR or --synthetic N")),
    };
    let (train_set, held_out) = dataset.split_tail(args.holdout)?;
    info!(
        "ablating {} configurations on {} training / {} held-out pairs",
        axes.configs(&cfg).len(),
        train_set.len(),
        held_out.len()
    );
    let rows = ablate(&train_set, &held_out, &cfg, axes, &selected, args.jobs)?;
    for r in rows.iter().filter(|r| r.status != "ok") {
        warn!("{} / {} / depth {}: {}", r.config.fusion_rule, r.config.loss_gate, r.config.depth, r.status);
    }
    match &args.out {
        Some(path) => {
            let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
            AblationRow::write_csv(&rows, &selected, file)?;
        }
        None => AblationRow::write_csv(&rows, &selected, io::stdout().lock())?,
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> CmdResult {
    let arch = ArchConfig::new(args.depth, args.base_channels, args.fusion.parse()?)?;
    let cfg = GradCheckConfig {
        entries_per_param: args.entries,
        seed: args.seed,
        ..GradCheckConfig::default()
    };
    let reports = diagnostics::gradcheck_suite(&arch, &cfg)?;
    let mut out = io::stdout().lock();
    let mut failed = 0;
    for r in &reports {
        write!(out, "{r}").context("writing stdout")?;
        failed += usize::from(!r.passed());
    }
    writeln!(out, "{} of {} checks passed", reports.len() - failed, reports.len()).context("writing stdout")?;
    if failed > 0 {
        return Err(anyhow::anyhow!("{failed} gradient check(s) failed").into());
    }
    Ok(())
}

fn cmd_selftest(args: SelftestArgs) -> CmdResult {
    let lines = diagnostics::selftest(args.triples, args.seed)?;
    let mut out = io::stdout().lock();
    for l in &lines {
        writeln!(out, "{l}").context("writing stdout")?;
    }
    let failed = lines.iter().filter(|l| !l.passed()).count();
    if failed > 0 {
        return Err(anyhow::anyhow!("{failed} self-test check(s) failed").into());
    }
    Ok(())
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("MAPFUSE_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("MAPFUSE_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring thread pool")?;
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    init_threads()?;
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Selftest(a) => cmd_selftest(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
