//! `lisn` command-line tool.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad arguments or configuration.

mod settings;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lisn::complexity::{measure, report};
use lisn::data::{load_image, save_image, Dataset, TRAIN_FRACTION};
use lisn::eval::{evaluate, EvalOptions, Upscaler};
use lisn::model::{LisnModel, Variant};
use lisn::train::{load_checkpoint, Trainer};
use lisn::{selftest, Error};

use settings::Settings;

/// Raised for invalid arguments or configuration; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

const CHECKPOINT_DIR: &str = "checkpoint";
const TRAIN_LOG: &str = "train_log.jsonl";
const CONFIG_ECHO: &str = "config.txt";
const METRICS_FILE: &str = "metrics.jsonl";

/// Lightweight infrared image super-resolution.
#[derive(Parser, Debug)]
#[command(name = "lisn", version, about)]
struct Cli {
    /// Seed for weight initialization and patch sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` config file; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory for outputs.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints, a JSON-lines log and the resolved config.
    Train(TrainArgs),
    /// Report PSNR/SSIM of a checkpoint on a set of HR images.
    Eval(EvalArgs),
    /// Super-resolve one image with a checkpoint.
    Upscale(UpscaleArgs),
    /// Print parameter and FLOP counts per layer.
    Complexity(ComplexityArgs),
    /// Run the built-in acceptance battery.
    Selftest(SelftestArgs),
}

/// Architecture overrides shared by `train` and `complexity`.
#[derive(Args, Debug, Default)]
struct ModelArgs {
    /// Upscaling factor (2 or 4).
    #[arg(long)]
    scale: Option<usize>,
    /// Feature channels C.
    #[arg(long)]
    width: Option<usize>,
    /// Number of split blocks N.
    #[arg(long)]
    blocks: Option<usize>,
    /// Architecture variant: default, no_split, no_rdb or no_cca.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// HR image directory or manifest file.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Separate validation set; by default a seeded split of --data is used.
    #[arg(long, value_name = "DIR")]
    val: Option<PathBuf>,
    /// Total epochs to reach.
    #[arg(long)]
    epochs: Option<usize>,
    /// Optimizer steps per epoch.
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    /// Patches per step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// LR patch side; HR crops are this times the scale.
    #[arg(long)]
    patch_size: Option<usize>,
    /// Continue from this checkpoint directory.
    #[arg(long, value_name = "DIR")]
    resume: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long, value_name = "DIR")]
    ckpt: PathBuf,
    /// HR image directory or manifest file.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Border width excluded from the metrics.
    #[arg(long, default_value_t = 0)]
    shave: usize,
    /// Print JSON lines instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct UpscaleArgs {
    /// Checkpoint directory.
    #[arg(long, value_name = "DIR")]
    ckpt: PathBuf,
    /// LR input image.
    #[arg(long, value_name = "IMG")]
    input: PathBuf,
    /// Output image; format follows the extension.
    #[arg(long, value_name = "IMG")]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct ComplexityArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Side of the square LR input.
    #[arg(long, default_value_t = 64)]
    input_size: usize,
    /// FLOPs counted per multiply-accumulate (1 or 2).
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..=2))]
    mac_flops: u64,
    /// List every layer instead of per-stage totals.
    #[arg(long)]
    detail: bool,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
    /// Also time this many inference runs.
    #[arg(long, value_name = "REPEATS")]
    measure: Option<usize>,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    /// Run only these criteria (1 to 12).
    #[arg(long, value_name = "ID", value_delimiter = ',')]
    only: Vec<u8>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) if e.chain().any(|c| c.is::<UsageError>()) => {
            eprintln!("error: {e:#}");
            eprintln!("run `lisn --help` for usage");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let threads = threads_from_env()?;
    let mut settings = Settings::default();
    if let Some(path) = &cli.config {
        settings.apply_file(path)?;
    }
    if let Some(seed) = cli.seed {
        settings.train.seed = seed;
    }
    match cli.command {
        Command::Train(args) => train(settings, args, cli.out.as_deref(), threads),
        Command::Eval(args) => eval(args, cli.out.as_deref(), threads),
        Command::Upscale(args) => upscale(args),
        Command::Complexity(args) => complexity(settings, args, cli.out.as_deref()),
        Command::Selftest(args) => run_selftest(args, cli.out.as_deref()),
    }
}

/// Worker count from `LISN_THREADS`, default 1.
fn threads_from_env() -> Result<usize> {
    match std::env::var("LISN_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(usage(format!("LISN_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

fn apply_model_args(settings: &mut Settings, args: &ModelArgs) -> Result<()> {
    let m = &mut settings.model;
    if let Some(v) = args.scale {
        m.scale = v;
    }
    if let Some(v) = args.width {
        m.width = v;
    }
    if let Some(v) = args.blocks {
        m.n_blocks = v;
    }
    if let Some(v) = args.variant {
        m.variant = v;
    }
    m.validate().map_err(|e| usage(e.to_string()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn train(mut settings: Settings, args: TrainArgs, out: Option<&Path>, threads: usize) -> Result<ExitCode> {
    let out = out.ok_or_else(|| usage("train requires --out DIR"))?;
    let t = &mut settings.train;
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.steps_per_epoch {
        t.steps_per_epoch = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.patch_size {
        t.patch_size = v;
    }
    if t.batch_size == 0 || t.patch_size == 0 {
        return Err(usage("batch_size and patch_size must be positive"));
    }
    apply_model_args(&mut settings, &args.model)?;
    if !args.data.exists() {
        return Err(usage(format!("data path {} does not exist", args.data.display())));
    }

    create_dir(out)?;
    let echo = out.join(CONFIG_ECHO);
    fs::write(&echo, settings.to_text()).with_context(|| format!("cannot write {}", echo.display()))?;

    let data = Dataset::open(&args.data).with_context(|| format!("loading {}", args.data.display()))?;
    let (train_set, val_set) = match &args.val {
        Some(dir) => (data, Dataset::open(dir).with_context(|| format!("loading {}", dir.display()))?),
        None if data.len() >= 2 => data.split(TRAIN_FRACTION, settings.train.seed),
        None => (data, Dataset::new(Vec::new())),
    };
    log::info!(
        "{} training images, {} validation images, {} eval threads",
        train_set.len(),
        val_set.len(),
        threads
    );

    let mut cfg = settings.train.clone();
    cfg.checkpoint_dir = Some(out.join(CHECKPOINT_DIR));
    let mut trainer = match &args.resume {
        Some(dir) => {
            let ckpt = load_checkpoint(dir).with_context(|| format!("resuming from {}", dir.display()))?;
            if ckpt.manifest.config != settings.model {
                log::warn!("resuming with the checkpoint's architecture; model settings are ignored");
            }
            Trainer::from_checkpoint(ckpt, cfg)
        }
        None => Trainer::new(&settings.model, cfg)?,
    };

    let log_path = out.join(TRAIN_LOG);
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(args.resume.is_some())
        .write(true)
        .truncate(args.resume.is_none())
        .open(&log_path)
        .with_context(|| format!("cannot open {}", log_path.display()))?;
    let val = (!val_set.is_empty()).then_some(&val_set);
    let mut io_err = None;
    let result = trainer.fit(&train_set, val, |record| {
        let psnr = record.val_psnr.map_or(String::new(), |p| format!(", val PSNR {p:.2} dB"));
        log::info!("epoch {} lr {:.3e} loss {:.5}{psnr}", record.epoch, record.lr, record.mean_loss);
        let line = serde_json::to_string(record).expect("record serializes");
        if let Err(e) = writeln!(log_file, "{line}") {
            io_err = Some(e);
        }
        Ok(())
    });
    if let Some(e) = io_err {
        return Err(e).with_context(|| format!("cannot write {}", log_path.display()));
    }
    result?;
    log::info!("final checkpoint at {}", out.join(CHECKPOINT_DIR).display());
    Ok(ExitCode::SUCCESS)
}

fn eval(args: EvalArgs, out: Option<&Path>, threads: usize) -> Result<ExitCode> {
    let ckpt = load_checkpoint(&args.ckpt).with_context(|| format!("loading {}", args.ckpt.display()))?;
    let data = match Dataset::open(&args.data) {
        Ok(d) if !d.is_empty() => d,
        Ok(_) | Err(Error::Empty(_)) => bail!("no evaluable images in {}", args.data.display()),
        Err(e) => return Err(e).with_context(|| format!("loading {}", args.data.display())),
    };
    let opts = EvalOptions {
        shave: args.shave,
        threads,
        ..EvalOptions::default()
    };
    let report = evaluate(&ckpt.model, &data, &opts)?;
    if args.json {
        print!("{}", report.to_jsonl());
    } else {
        print!("{}", report.to_table());
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        let path = dir.join(METRICS_FILE);
        fs::write(&path, report.to_jsonl()).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn upscale(args: UpscaleArgs) -> Result<ExitCode> {
    let ckpt = load_checkpoint(&args.ckpt).with_context(|| format!("loading {}", args.ckpt.display()))?;
    let lr = load_image(&args.input)?;
    let sr = ckpt.model.upscale(&lr.hr)?.map(|v| v.clamp(0.0, 1.0));
    save_image(&sr, &args.output)?;
    let s = sr.shape();
    log::info!("wrote {}x{} image to {}", s[3], s[2], args.output.display());
    Ok(ExitCode::SUCCESS)
}

fn complexity(mut settings: Settings, args: ComplexityArgs, out: Option<&Path>) -> Result<ExitCode> {
    apply_model_args(&mut settings, &args.model)?;
    if args.input_size == 0 {
        return Err(usage("--input-size must be positive"));
    }
    let hw = (args.input_size, args.input_size);
    let rep = report(&settings.model, hw, args.mac_flops)?;
    let measurement = match args.measure {
        Some(n) => {
            let model = LisnModel::<f32>::build(&settings.model, settings.train.seed)?;
            Some(measure(&model, hw, n).map_err(|e| usage(e.to_string()))?)
        }
        None => None,
    };
    let json = serde_json::json!({ "report": rep, "measurement": measurement });
    if args.json {
        println!("{}", serde_json::to_string_pretty(&json)?);
    } else {
        print!("{}", rep.to_table(args.detail));
        if let Some(m) = &measurement {
            println!(
                "median inference {:.2} ms over {} runs, peak tensor memory {:.1} MiB, {}",
                m.median_ms,
                m.repeats,
                m.peak_bytes as f64 / (1 << 20) as f64,
                m.hardware
            );
        }
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        let path = dir.join("complexity.json");
        fs::write(&path, serde_json::to_string_pretty(&json)?).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn run_selftest(args: SelftestArgs, out: Option<&Path>) -> Result<ExitCode> {
    let results: Vec<_> = if args.only.is_empty() {
        selftest::CRITERIA
            .iter()
            .filter_map(|c| {
                let r = selftest::run(c.0);
                if let Some(r) = &r {
                    println!("{r}");
                }
                r
            })
            .collect()
    } else {
        let mut v = Vec::new();
        for &id in &args.only {
            let r = selftest::run(id).ok_or_else(|| usage(format!("no criterion {id}")))?;
            println!("{r}");
            v.push(r);
        }
        v
    };
    let passed = results.iter().filter(|r| r.passed).count();
    println!("{passed} of {} criteria passed", results.len());
    if let Some(dir) = out {
        create_dir(dir)?;
        let path = dir.join("selftest.json");
        fs::write(&path, serde_json::to_string_pretty(&results)?).with_context(|| format!("cannot write {}", path.display()))?;
    }
    match results.iter().find(|r| !r.passed) {
        None => Ok(ExitCode::SUCCESS),
        Some(first) => {
            eprintln!("first failure: criterion {} ({}): {}", first.id, first.title, first.detail);
            Ok(ExitCode::from(1))
        }
    }
}
