mod settings;

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::{json, Value};

use slr_core::data::{gen_denoising, ingest_images, load_dataset, save_dataset, write_label_image, Dataset, GenConfig};
use slr_core::trainer::{format_curve, predict_dataset, train_with_observer, univariate_error, Model, TrainConfig};
use slr_core::OracleKind;

use settings::Settings;

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or missing inputs; exit code 2.
    Usage(String),
    /// Failure while doing the work; exit code 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<slr_core::Error> for CliError {
    fn from(e: slr_core::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

#[derive(Parser)]
#[command(name = "slr", version, about = "Structured learning with logistic regression oracles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic denoising train/test datasets.
    Gen(GenArgs),
    /// Train a unary/pairwise model and report univariate error.
    Train(TrainArgs),
    /// Train every unary x pairwise oracle combination.
    Matrix(MatrixArgs),
    /// Predict labelings with a saved model.
    Predict(PredictArgs),
    /// Build a dataset from portable pixmaps and graymap label masks.
    Ingest(IngestArgs),
}

#[derive(Args)]
struct GenArgs {
    /// `key = value` settings file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    /// Image width and height.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LearnArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    test_data: Option<PathBuf>,
    /// Outer learning iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// Message-passing sweeps after each classifier update.
    #[arg(long)]
    mp_iters: Option<usize>,
    /// Sweeps for plain inference when measuring error.
    #[arg(long)]
    test_mp_iters: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    learn: LearnArgs,
    /// zero, const, linear, boost or mlp.
    #[arg(long)]
    unary: Option<String>,
    #[arg(long)]
    pairwise: Option<String>,
}

#[derive(Args)]
struct MatrixArgs {
    #[command(flatten)]
    learn: LearnArgs,
    /// Train cells concurrently.
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    mp_iters: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IngestArgs {
    /// Input image (PPM/PGM); repeat for several.
    #[arg(long = "image", required = true)]
    images: Vec<PathBuf>,
    /// Label mask for the image at the same position; repeat or omit.
    #[arg(long = "mask")]
    masks: Vec<PathBuf>,
    #[arg(long, default_value_t = 2)]
    labels: usize,
    #[arg(long)]
    out: PathBuf,
}

const GEN_KEYS: &[&str] = &["train", "test", "size", "sigma", "seed", "out"];
const LEARN_KEYS: &[&str] = &[
    "train-data",
    "test-data",
    "iters",
    "mp-iters",
    "test-mp-iters",
    "eps",
    "seed",
    "out",
    "unary",
    "pairwise",
];
const PREDICT_KEYS: &[&str] = &["model", "data", "mp-iters", "out"];

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| anyhow!(e))?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn open_dataset(path: &Path) -> Result<Dataset, CliError> {
    if !path.exists() {
        return Err(usage(format!("dataset {} does not exist", path.display())));
    }
    Ok(load_dataset(path).with_context(|| format!("loading {}", path.display()))?)
}

fn cmd_gen(args: GenArgs) -> Result<(), CliError> {
    let mut s = Settings::load(args.config.as_deref(), GEN_KEYS)?;
    let defaults = GenConfig::default();
    let size = s.pick("size", args.size, defaults.width)?;
    let config = GenConfig {
        num_train: s.pick("train", args.train, defaults.num_train)?,
        num_test: s.pick("test", args.test, defaults.num_test)?,
        width: size,
        height: size,
        blur_sigma: s.pick("sigma", args.sigma, defaults.blur_sigma)?,
        seed: s.pick("seed", args.seed, defaults.seed)?,
    };
    let out: PathBuf = s.require("out", args.out.map(|p| p.display().to_string()))?.into();
    config.validate().map_err(|e| usage(e.to_string()))?;

    let (train, test) = gen_denoising(&config)?;
    create_dir(&out)?;
    save_dataset(out.join("train.jsonl"), &train)?;
    save_dataset(out.join("test.jsonl"), &test)?;
    let manifest = json!({
        "command": "gen",
        "config": s.effective(),
        "files": { "train": "train.jsonl", "test": "test.jsonl" },
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    println!("wrote {} train and {} test images to {}", train.len(), test.len(), out.display());
    Ok(())
}

struct Learn {
    train: Dataset,
    test: Option<Dataset>,
    config: TrainConfig,
    out: PathBuf,
    settings: Settings,
}

fn parse_kind(text: &str) -> Result<OracleKind, CliError> {
    text.parse().map_err(|e: slr_core::Error| usage(e.to_string()))
}

fn learn_setup(args: LearnArgs, unary: Option<String>, pairwise: Option<String>) -> Result<Learn, CliError> {
    let mut s = Settings::load(args.config.as_deref(), LEARN_KEYS)?;
    let base = TrainConfig::default();
    let mut config = TrainConfig {
        outer_iters: s.pick("iters", args.iters, base.outer_iters)?,
        mp_iters: s.pick("mp-iters", args.mp_iters, base.mp_iters)?,
        test_mp_iters: s.pick("test-mp-iters", args.test_mp_iters, base.test_mp_iters)?,
        epsilon: s.pick("eps", args.eps, base.epsilon)?,
        seed: s.pick("seed", args.seed, base.seed)?,
        ..base
    };
    if !(config.epsilon > 0.0 && config.epsilon.is_finite()) {
        return Err(usage(format!("--eps must be positive, got {}", config.epsilon)));
    }
    config.unary = parse_kind(&s.pick("unary", unary, config.unary.name().to_string())?)?;
    config.pairwise = parse_kind(&s.pick("pairwise", pairwise, config.pairwise.name().to_string())?)?;
    let train_path: PathBuf = s.require("train-data", args.train_data.map(|p| p.display().to_string()))?.into();
    let test_path = s.pick("test-data", args.test_data.map(|p| p.display().to_string()), String::new())?;
    let out: PathBuf = s.require("out", args.out.map(|p| p.display().to_string()))?.into();

    let train = open_dataset(&train_path)?;
    let test = if test_path.is_empty() { None } else { Some(open_dataset(Path::new(&test_path))?) };
    Ok(Learn { train, test, config, out, settings: s })
}

fn format_error(e: Option<f64>) -> String {
    e.map(|v| v.to_string()).unwrap_or_else(|| "none".into())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let Learn { train, test, config, out, settings } = learn_setup(args.learn, args.unary, args.pairwise)?;
    create_dir(&out)?;
    let outcome = train_with_observer(&train, test.as_ref(), &config, |p| {
        eprintln!(
            "iteration {} train={} test={}",
            p.iteration,
            p.train_error,
            format_error(p.test_error)
        );
    })?;
    outcome.model.save(out.join("model.slr"))?;
    fs::write(out.join("curve.csv"), format_curve(&outcome.curve))?;
    let summary = format!(
        "unary={} pairwise={} train={} test={}",
        config.unary,
        config.pairwise,
        outcome.train_error,
        format_error(outcome.test_error)
    );
    let manifest = json!({
        "command": "train",
        "config": settings.effective(),
        "train_error": outcome.train_error,
        "test_error": outcome.test_error,
        "files": { "model": "model.slr", "curve": "curve.csv" },
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    println!("{summary}");
    Ok(())
}

fn cell_seed(seed: u64, row: usize, col: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add((row * OracleKind::ALL.len() + col) as u64 + 1)
}

fn cmd_matrix(args: MatrixArgs) -> Result<(), CliError> {
    let Learn { train, test, config, out, settings } = learn_setup(args.learn, None, None)?;
    let test = test.ok_or_else(|| usage("matrix needs --test-data"))?;
    create_dir(&out)?;
    let cells_path = out.join("cells.csv");
    let cells = Mutex::new(File::create(&cells_path)?);
    writeln!(cells.lock().unwrap(), "unary,pairwise,train_error,test_error")?;

    let kinds = OracleKind::ALL;
    let jobs: Vec<(usize, usize)> = (0..kinds.len()).flat_map(|r| (0..kinds.len()).map(move |c| (r, c))).collect();
    let run = |&(r, c): &(usize, usize)| -> Result<f64, CliError> {
        let cfg = TrainConfig {
            unary: kinds[r],
            pairwise: kinds[c],
            seed: cell_seed(config.seed, r, c),
            record_curve: false,
            ..config.clone()
        };
        let outcome = slr_core::trainer::train(&train, Some(&test), &cfg)
            .with_context(|| format!("cell unary={} pairwise={}", kinds[r], kinds[c]))?;
        let test_error = outcome.test_error.expect("test set given");
        let mut f = cells.lock().unwrap();
        writeln!(f, "{},{},{},{}", kinds[r], kinds[c], outcome.train_error, test_error)?;
        f.flush()?;
        eprintln!("unary={} pairwise={} train={} test={}", kinds[r], kinds[c], outcome.train_error, test_error);
        Ok(test_error)
    };
    let results: Vec<f64> = if args.parallel {
        jobs.par_iter().map(run).collect::<Result<_, _>>()?
    } else {
        jobs.iter().map(run).collect::<Result<_, _>>()?
    };

    let mut table = String::from("unary\\pairwise");
    for k in kinds {
        table.push(',');
        table.push_str(k.heading());
    }
    table.push('\n');
    for (r, k) in kinds.iter().enumerate() {
        table.push_str(k.heading());
        for c in 0..kinds.len() {
            table.push_str(&format!(",{:.3}", results[r * kinds.len() + c]));
        }
        table.push('\n');
    }
    fs::write(out.join("matrix.csv"), &table)?;
    write_json(
        &out.join("manifest.json"),
        &json!({ "command": "matrix", "config": settings.effective(), "parallel": args.parallel }),
    )?;
    print!("{table}");
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<(), CliError> {
    let mut s = Settings::load(args.config.as_deref(), PREDICT_KEYS)?;
    let model_path: PathBuf = s.require("model", args.model.map(|p| p.display().to_string()))?.into();
    let data_path: PathBuf = s.require("data", args.data.map(|p| p.display().to_string()))?.into();
    let base = TrainConfig::default();
    let mp_iters = s.pick("mp-iters", args.mp_iters, base.test_mp_iters)?;
    let out: PathBuf = s.require("out", args.out.map(|p| p.display().to_string()))?.into();
    if !model_path.exists() {
        return Err(usage(format!("model {} does not exist", model_path.display())));
    }
    let model = Model::load(&model_path).with_context(|| format!("loading {}", model_path.display()))?;
    let data = open_dataset(&data_path)?;

    let predictions = predict_dataset(&model, &data, mp_iters, base.agreement_tol)?;
    create_dir(&out)?;
    let mut golds = Vec::new();
    for (k, (ex, pred)) in data.examples().iter().zip(&predictions).enumerate() {
        if let Some((w, h)) = ex.graph().grid_dims() {
            write_label_image(out.join(format!("pred_{k:03}.pgm")), pred, w, h, data.num_labels())?;
        }
        if let Some(gold) = ex.labels() {
            let e = univariate_error(std::slice::from_ref(pred), &[gold])?;
            println!("example={k} error={e}");
            golds.push(gold);
        }
    }
    if golds.len() == predictions.len() && !golds.is_empty() {
        println!("mean_error={}", univariate_error(&predictions, &golds)?);
    }
    Ok(())
}

fn cmd_ingest(args: IngestArgs) -> Result<(), CliError> {
    if !args.masks.is_empty() && args.masks.len() != args.images.len() {
        return Err(usage(format!("{} masks given for {} images", args.masks.len(), args.images.len())));
    }
    if args.labels < 2 {
        return Err(usage("--labels must be at least 2"));
    }
    for p in args.images.iter().chain(&args.masks) {
        if !p.exists() {
            return Err(usage(format!("{} does not exist", p.display())));
        }
    }
    let items: Vec<(PathBuf, Option<PathBuf>)> = args
        .images
        .iter()
        .enumerate()
        .map(|(k, img)| (img.clone(), args.masks.get(k).cloned()))
        .collect();
    let data = ingest_images(&items, args.labels)?;
    save_dataset(&args.out, &data)?;
    println!("wrote {} examples to {}", data.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Matrix(a) => cmd_matrix(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Ingest(a) => cmd_ingest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
