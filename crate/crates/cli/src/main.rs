use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adafuse::checkpoint::Checkpoint;
use adafuse::data::{load_image, save_image, ImagePair, Manifest, Modality, PreparedPair, Raster};
use adafuse::diagnostics::{gradcheck_suite, selftest, CheckResult, DEFAULT_SEEDS};
use adafuse::losses::LossTerms;
use adafuse::metrics::{evaluate, write_csv, write_json, MetricsReport, MetricsRow};
use adafuse::network::FusionMode;
use adafuse::train::{fuse_luminance, fuse_prepared, Ablation, TrainConfig, TrainPair, Trainer, CHECKPOINT_FILE};
use adafuse::{AdaFuseModel, Error};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "adafuse",
    version,
    about = "Multi-modal image fusion with spatial-frequential cross attention"
)]
struct Cli {
    /// Emit machine-readable JSON (results on stdout, errors on stderr).
    #[arg(long, global = true)]
    json: bool,

    /// Log progress at info level.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a JSON config.
    Train(TrainArgs),
    /// Fuse two source images with a trained checkpoint.
    Fuse(FuseArgs),
    /// Score fused images against the sources listed in a manifest.
    Eval(EvalArgs),
    /// Train one ablation variant and fuse its training pairs.
    Ablate(AblateArgs),
    /// Compare reverse-mode gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Run the invariant suite.
    Selftest,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<u64>,
}

#[derive(Args, Debug)]
struct FuseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    source_a: PathBuf,
    source_b: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    /// Reattach the colour source's chrominance to the fused luminance.
    #[arg(long)]
    color: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, conflicts_with = "fused_dir", required_unless_present = "fused_dir")]
    checkpoint: Option<PathBuf>,
    /// Directory holding `<pair_id>.png` fused images.
    #[arg(long)]
    fused_dir: Option<PathBuf>,
    #[arg(long, default_value = "metrics.csv")]
    csv: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Base training config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "caf")]
    fusion: FusionMode,
    #[arg(long)]
    no_fgfb: bool,
    #[arg(long, default_value = "both")]
    loss: LossTerms,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<u64>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = DEFAULT_SEEDS)]
    seeds: u64,
    /// Restrict to these operations (repeatable).
    #[arg(long = "op")]
    ops: Vec<String>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
    Checks(Vec<CheckResult>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::ShapeMismatch { .. } | Error::InvalidShape { .. } => "shape",
        Error::NonFinite { .. } => "non_finite",
        Error::NotScalar(_) | Error::GraphConsumed | Error::MissingGradient(_) => "autograd",
        Error::InvalidArgument(_) => "invalid_argument",
        Error::Checkpoint(_) => "checkpoint",
        Error::Io { .. } => "io",
        Error::Decode { .. } => "decode",
        Error::Json(_) => "json",
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    message: String,
    exit_code: u8,
}

fn report_failure(failure: &Failure, json: bool) -> u8 {
    let (kind, message, code) = match failure {
        Failure::Usage(m) => ("usage", m.clone(), EXIT_USAGE),
        Failure::Runtime(e) => (error_kind(e), e.to_string(), EXIT_RUNTIME),
        Failure::Checks(failed) => {
            let names: Vec<_> = failed.iter().map(|c| c.name.as_str()).collect();
            ("check_failed", format!("checks failed: {}", names.join(", ")), EXIT_RUNTIME)
        }
    };
    if json {
        let body = serde_json::json!({ "error": ErrorBody { kind, message, exit_code: code } });
        eprintln!("{body}");
    } else {
        eprintln!("error: {message}");
    }
    code
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Failure> {
    println!("{}", serde_json::to_string_pretty(value).map_err(Error::from)?);
    Ok(())
}

fn train(args: TrainArgs, json: bool) -> Result<(), Failure> {
    let mut cfg = TrainConfig::load(&args.config)?;
    if let Some(out) = args.out {
        cfg.output_dir = out;
    }
    if args.max_steps.is_some() {
        cfg.max_steps = args.max_steps;
    }
    let data = TrainPair::from_pairs(&cfg.dataset.load()?)?;
    let mut trainer = match &args.resume {
        Some(path) => Trainer::resume(cfg.clone(), &Checkpoint::read(path)?)?,
        None => Trainer::new(cfg.clone())?,
    };
    let summary = trainer.run(&data, Some(&cfg.output_dir))?;
    let ckpt = cfg.output_dir.join(CHECKPOINT_FILE);
    if json {
        print_json(&serde_json::json!({
            "steps": summary.steps,
            "epochs": summary.epochs,
            "first_loss": summary.first_loss,
            "last_loss": summary.last_loss,
            "stopped_early": summary.stopped_early,
            "checkpoint": ckpt,
        }))?;
    } else {
        println!(
            "trained {} steps ({} epochs{}); final loss {:.6}; checkpoint {}",
            summary.steps,
            summary.epochs,
            if summary.stopped_early { ", stopped early" } else { "" },
            summary.last_loss.unwrap_or(f64::NAN),
            ckpt.display()
        );
    }
    Ok(())
}

fn fuse(args: FuseArgs, json: bool) -> Result<(), Failure> {
    let model = AdaFuseModel::<f32>::load(&args.checkpoint)?;
    let pair = ImagePair::new("cli", load_image(&args.source_a)?, load_image(&args.source_b)?, Modality::default())?;
    let fused = fuse_prepared(&model, &PreparedPair::new(&pair)?, args.color)?;
    save_image(&args.output, &fused)?;
    if json {
        print_json(&serde_json::json!({
            "output": args.output,
            "channels": fused.channels,
            "height": fused.height,
            "width": fused.width,
        }))?;
    } else {
        println!("wrote {}", args.output.display());
    }
    Ok(())
}

fn luminance_of(r: Raster) -> Result<Raster, Error> {
    if r.channels == 3 {
        Ok(adafuse::data::rgb_to_ycbcr(&r)?.y)
    } else {
        Ok(r)
    }
}

fn fused_path(dir: &Path, pair_id: &str) -> PathBuf {
    ["png", "pgm", "ppm"]
        .iter()
        .map(|ext| dir.join(format!("{pair_id}.{ext}")))
        .find(|p| p.exists())
        .unwrap_or_else(|| dir.join(format!("{pair_id}.png")))
}

fn score_all(pairs: &[ImagePair], mut fused_y: impl FnMut(&PreparedPair) -> Result<Raster, Error>) -> Result<Vec<MetricsRow>, Error> {
    pairs
        .iter()
        .map(|pair| {
            let prep = PreparedPair::new(pair)?;
            let report = evaluate(&fused_y(&prep)?, &prep.ref_a, &prep.ref_b)?;
            Ok(MetricsRow {
                pair_id: pair.pair_id.clone(),
                report,
            })
        })
        .collect()
}

fn write_reports(rows: &[MetricsRow], csv: &Path, report: Option<&Path>, json: bool) -> Result<(), Failure> {
    write_csv(csv, rows)?;
    if let Some(path) = report {
        write_json(path, rows)?;
    }
    let mean = MetricsReport::mean(&rows.iter().map(|r| r.report).collect::<Vec<_>>());
    if json {
        print_json(&serde_json::json!({ "rows": rows, "mean": mean, "csv": csv }))?;
    } else {
        println!("pair_id,en,psnr,mi,cc,fmi");
        for r in rows {
            let m = &r.report;
            println!("{},{:.4},{:.4},{:.4},{:.4},{:.4}", r.pair_id, m.en, m.psnr, m.mi, m.cc, m.fmi);
        }
        println!("mean,{:.4},{:.4},{:.4},{:.4},{:.4}", mean.en, mean.psnr, mean.mi, mean.cc, mean.fmi);
    }
    Ok(())
}

fn eval(args: EvalArgs, json: bool) -> Result<(), Failure> {
    let pairs = Manifest::load(&args.manifest)?.load_all()?;
    let rows = match (&args.checkpoint, &args.fused_dir) {
        (Some(ckpt), _) => {
            let model = AdaFuseModel::<f32>::load(ckpt)?;
            score_all(&pairs, |prep| fuse_luminance(&model, prep))?
        }
        (None, Some(dir)) => score_all(&pairs, |prep| luminance_of(load_image(&fused_path(dir, &prep.pair_id))?))?,
        (None, None) => return Err(Failure::Usage("eval needs --checkpoint or --fused-dir".into())),
    };
    write_reports(&rows, &args.csv, args.report.as_deref(), json)
}

fn ablate(args: AblateArgs, json: bool) -> Result<(), Failure> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    let ablation = Ablation {
        fusion: args.fusion,
        fgfb: !args.no_fgfb,
        terms: args.loss,
    };
    ablation.apply(&mut cfg);
    if args.max_steps.is_some() {
        cfg.max_steps = args.max_steps;
    }
    let out = args.out.unwrap_or_else(|| {
        let fgfb = if ablation.fgfb { "fgfb" } else { "no-fgfb" };
        cfg.output_dir
            .join(format!("ablate-{}-{fgfb}-{:?}", ablation.fusion, ablation.terms).to_lowercase())
    });
    let pairs = cfg.dataset.load()?;
    let mut trainer = Trainer::new(cfg)?;
    trainer.run(&TrainPair::from_pairs(&pairs)?, Some(&out))?;
    let fused_dir = out.join("fused");
    let rows = score_all(&pairs, |prep| {
        let y = fuse_luminance(&trainer.model, prep)?;
        save_image(&fused_dir.join(format!("{}.png", prep.pair_id)), &y)?;
        Ok(y)
    })?;
    write_reports(&rows, &out.join("metrics.csv"), Some(&out.join("metrics.json")), json)
}

fn print_checks(results: &[CheckResult], json: bool) -> Result<(), Failure> {
    if json {
        print_json(&results)?;
    } else {
        for c in results {
            println!(
                "{:<26} {:>12.3e}  tol {:.0e}  {}",
                c.name,
                c.value,
                c.tolerance,
                if c.passed { "PASS" } else { "FAIL" }
            );
        }
    }
    let failed: Vec<_> = results.iter().filter(|c| !c.passed).cloned().collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Checks(failed))
    }
}

fn gradcheck(args: GradcheckArgs, json: bool) -> Result<(), Failure> {
    let known = adafuse::diagnostics::gradcheck_ops();
    if let Some(bad) = args.ops.iter().find(|o| !known.contains(&o.as_str())) {
        return Err(Failure::Usage(format!("unknown op {bad:?}; known: {}", known.join(", "))));
    }
    if args.seeds == 0 {
        return Err(Failure::Usage("--seeds must be positive".into()));
    }
    let only = (!args.ops.is_empty()).then_some(args.ops.as_slice());
    print_checks(&gradcheck_suite(args.seeds, only)?, json)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let json = cli.json;
    match cli.command {
        Command::Train(a) => train(a, json),
        Command::Fuse(a) => fuse(a, json),
        Command::Eval(a) => eval(a, json),
        Command::Ablate(a) => ablate(a, json),
        Command::Gradcheck(a) => gradcheck(a, json),
        Command::Selftest => print_checks(&selftest()?, json),
    }
}

fn main() -> ExitCode {
    let json_requested = std::env::args().any(|a| a == "--json");
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            if json_requested {
                return ExitCode::from(report_failure(
                    &Failure::Usage(e.to_string().lines().next().unwrap_or("usage error").to_string()),
                    true,
                ));
            }
            eprint!("{e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let json = cli.json;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => ExitCode::from(report_failure(&f, json)),
    }
}
