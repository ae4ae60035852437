use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;
use serde_json::{json, Map, Value};

use usaad::blursynth::{build_corpus, BlurSource, KernelConfig};
use usaad::history::{read_loss_csv, RowScale};
use usaad::imaging;
use usaad::metrics::{MetricReport, NrModel};
use usaad::networks::FusionMode;
use usaad::trainer::{fit, Preset, TrainConfig, Trainer};
use usaad::Error;

mod plot;

#[derive(Parser, Debug)]
#[command(name = "usaad", version, about = "Unsupervised scale-recurrent deblurring")]
struct Cli {
    /// Seed for every random stream of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML or JSON file of training settings; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split a folder of sharp images into unpaired blur and sharp groups.
    MakeDataset(MakeDatasetArgs),
    /// Train from scratch or resume from a checkpoint.
    Train(TrainArgs),
    /// Restore every image of a folder with a trained checkpoint.
    Deblur(DeblurArgs),
    /// Score a folder of images, with references when available.
    Eval(EvalArgs),
    /// Train one of the Net1..Net8 ablation presets.
    Ablate(AblateArgs),
    /// Plot a loss history CSV to PNG.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct MakeDatasetArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = KernelConfig::default().size)]
    kernel_size: usize,
    #[arg(long, default_value_t = KernelConfig::default().intensity)]
    intensity: f64,
    /// Folder of already blurred counterparts (matched by file name); no
    /// kernels are applied.
    #[arg(long, value_name = "DIR")]
    pre_blurred: Option<PathBuf>,
}

/// Flags mirroring [`TrainConfig`]; only the ones given override the file.
#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n_scales: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    image_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    fusion: Option<FusionMode>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda_adv: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda_cyc: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    learning_rate: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    beta1: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    beta2: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    image_pool: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    blur_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    sharp_dir: Option<PathBuf>,
    /// Checkpoints and the loss CSV go here.
    #[arg(long, alias = "out")]
    #[serde(skip_serializing_if = "Option::is_none")]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    image_channels: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    base_width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    residual_blocks: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    reblur_width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    disc_width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    disc_layers: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    attention_reduction: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    residual_init_gain: Option<f64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    #[serde(skip)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    preset: String,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Debug)]
struct DeblurArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    test: PathBuf,
    /// Reference images with the same file names; enables PSNR.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also dump the 36-dimensional feature vectors as JSON here.
    #[arg(long)]
    features: Option<PathBuf>,
    /// No-reference model JSON (`kind: linear | pristine`).
    #[arg(long, conflicts_with = "pristine")]
    model: Option<PathBuf>,
    /// Fit pristine statistics on this folder of sharp images instead of
    /// the built-in synthetic scenes.
    #[arg(long)]
    pristine: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    history: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Invalid(_) => 2,
        Error::NonFinite { .. } => 4,
        _ => 3,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) | Error::Invalid(_) => "usage",
        Error::NonFinite { .. } => "numerical",
        _ => "data",
    }
}

/// Defaults, overridden by the config file, overridden by flags.
fn resolve_config(file: Option<&Path>, seed: Option<u64>, args: &TrainArgs) -> Result<TrainConfig, Error> {
    let mut merged = Map::new();
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let parsed: Value = if text.trim_start().starts_with('{') {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            let table: toml::Table = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.to_string().trim().replace('\n', " "))))?;
            serde_json::to_value(table).expect("toml values convert to json")
        };
        match parsed {
            Value::Object(m) => merged.extend(m),
            _ => return Err(Error::Config(format!("{} is not a table of settings", path.display()))),
        }
    }
    if let Value::Object(m) = serde_json::to_value(args).expect("flags serialize") {
        merged.extend(m);
    }
    if let Some(s) = seed {
        merged.insert("seed".into(), s.into());
    }
    let config: TrainConfig = serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

fn train(config: &TrainConfig, resume: Option<&Path>) -> Result<(), Error> {
    println!("{}", config.to_json_line());
    let outcome = fit(config, resume)?;
    let last = outcome.checkpoints.last().map(|p| p.display().to_string()).unwrap_or_default();
    println!(
        "{}",
        json!({
            "iterations": outcome.trainer.iteration,
            "checkpoint": last,
            "loss_csv": outcome.loss_csv.display().to_string(),
            "final_total": outcome.history.last().map(|b| b.total),
        })
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.command {
        Command::MakeDataset(a) => {
            let seed = cli.seed.unwrap_or(0);
            println!(
                "{}",
                json!({
                    "command": "make-dataset",
                    "src": a.src, "out": a.out, "seed": seed,
                    "kernel_size": a.kernel_size, "intensity": a.intensity,
                    "pre_blurred": a.pre_blurred,
                })
            );
            let blur = match &a.pre_blurred {
                Some(dir) => BlurSource::External(dir.clone()),
                None => BlurSource::Synthetic(KernelConfig { size: a.kernel_size, intensity: a.intensity }),
            };
            let corpus = build_corpus(&a.src, &a.out, seed, &blur)?;
            println!("{}", corpus.manifest_path.display());
        }
        Command::Train(a) => {
            let config = resolve_config(cli.config.as_deref(), cli.seed, a)?;
            train(&config, a.resume.as_deref())?;
        }
        Command::Ablate(a) => {
            let preset: Preset = a.preset.parse()?;
            let mut config = resolve_config(cli.config.as_deref(), cli.seed, &a.train)?;
            preset.apply(&mut config);
            config.validate()?;
            info!("{preset}: {} scales, fusion {}", config.n_scales, config.fusion);
            train(&config, a.train.resume.as_deref())?;
        }
        Command::Deblur(a) => {
            println!("{}", json!({"command": "deblur", "ckpt": a.ckpt, "in": a.input, "out": a.out}));
            let trainer = Trainer::load(&a.ckpt)?;
            let paths = imaging::list_images(&a.input)?;
            fs::create_dir_all(&a.out).map_err(|e| Error::Data(format!("{}: {e}", a.out.display())))?;
            for path in &paths {
                let image = imaging::load_image(path, trainer.config.image_channels, None)?;
                let restored = trainer.infer(&image)?;
                let stem = path.file_stem().expect("listed images have names").to_string_lossy();
                imaging::save_png(&restored, 0, &a.out.join(format!("{stem}.png")))?;
                info!("restored {}", path.display());
            }
            println!("{}", json!({"restored": paths.len()}));
        }
        Command::Eval(a) => {
            println!(
                "{}",
                json!({
                    "command": "eval", "test": a.test, "ref": a.reference, "out": a.out,
                    "features": a.features, "model": a.model, "pristine": a.pristine,
                })
            );
            let model = match (&a.model, &a.pristine) {
                (Some(path), _) => NrModel::load(path)?,
                (None, Some(dir)) => {
                    let images = imaging::list_images(dir)?
                        .iter()
                        .map(|p| imaging::load_image(p, 3, None))
                        .collect::<Result<Vec<_>, _>>()?;
                    NrModel::from_pristine(&images)?
                }
                (None, None) => NrModel::builtin()?,
            };
            let report = MetricReport::from_dirs(&a.test, a.reference.as_deref(), Some(&model))?;
            write_file(&a.out, &report.to_csv())?;
            if let Some(path) = &a.features {
                write_file(path, &report.features_json())?;
            }
            let agg = report.aggregate();
            println!(
                "{}",
                json!({"images": report.records.len(), "psnr": agg.psnr, "nr_score": agg.nr_score, "piqe": agg.piqe})
            );
        }
        Command::Inspect(a) => {
            println!("{}", json!({"command": "inspect", "history": a.history, "out": a.out}));
            let rows = read_loss_csv(&a.history)?;
            let totals: Vec<_> = rows.iter().filter(|r| r.scale == RowScale::Total).collect();
            if totals.is_empty() {
                return Err(Error::Data(format!("{} holds no iterations", a.history.display())));
            }
            let series = plot::Series::from_rows(&totals);
            plot::render(&series, &a.out)?;
            println!("{}", plot::legend(&series));
        }
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": kind(&e), "message": e.to_string()}));
            ExitCode::from(exit_code(&e))
        }
    }
}
