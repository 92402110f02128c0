//! The `capsnet` command line.
//!
//! Exit codes: 0 success, 1 I/O failure writing outputs, 2 configuration
//! error, 3 unreadable data or checkpoint, 4 numeric abort.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, Dataset, RunConfig};
use crate::data::{eval_batches, load_cifar10, load_mnist, DataError, DatasetSplit};
use crate::ensemble::{Ensemble, EnsembleError};
use crate::model::{CapsNet, MaskBy, ModelError};
use crate::tensor::Tape;
use crate::train::{evaluate, metrics_csv, TrainError, Trainer};

#[derive(Debug, Parser)]
#[command(name = "capsnet", version, about = "Train and evaluate capsule networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model, writing per-epoch checkpoints and metrics.csv.
    Train(TrainArgs),
    /// Print the accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Print the accuracy of an ensemble manifest.
    Ensemble(EnsembleArgs),
    /// Write originals over reconstructions as a PPM grid.
    Reconstruct(ReconstructArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// key = value run configuration.
    #[arg(long, required_unless_present = "resume")]
    pub config: Option<PathBuf>,
    /// Dataset directory; defaults to `data.dir` from the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Total epochs, overriding `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, conflicts_with = "resume")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, conflicts_with = "config")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
    /// Evaluate only the first N examples.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    pub count: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Output { .. } => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config { .. } => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Model(m) => m.into(),
        }
    }
}

impl From<EnsembleError> for CliError {
    fn from(e: EnsembleError) -> Self {
        match e {
            EnsembleError::Config(_) => CliError::Config(e.to_string()),
            EnsembleError::Eval(t) => t.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Applies `CAPSNET_THREADS` to the global worker pool.
pub fn init_threads() -> Result<()> {
    let Ok(value) = std::env::var("CAPSNET_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Config(format!("CAPSNET_THREADS must be a positive integer, got {value:?}")))?;
    // A pool that already exists (e.g. inside tests) keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Loads `(train, val)` for `dataset`, truncated to the given limits.
pub fn load_dataset(
    dataset: Dataset,
    dir: &Path,
    train_limit: Option<usize>,
    val_limit: Option<usize>,
) -> std::result::Result<(DatasetSplit, DatasetSplit), DataError> {
    let (train, val) = match dataset {
        Dataset::Mnist => load_mnist(dir)?,
        Dataset::Cifar10 => load_cifar10(dir)?,
    };
    let cut = |s: DatasetSplit, n: Option<usize>| match n {
        Some(n) if n < s.len() => s.head(n),
        _ => s,
    };
    Ok((cut(train, train_limit), cut(val, val_limit)))
}

fn dataset_of(model: &CapsNet<f32>) -> Dataset {
    if model.config().input.channels == 1 {
        Dataset::Mnist
    } else {
        Dataset::Cifar10
    }
}

fn pick(split: SplitArg, (train, val): (DatasetSplit, DatasetSplit), limit: Option<usize>) -> DatasetSplit {
    let s = match split {
        SplitArg::Train => train,
        SplitArg::Val => val,
    };
    match limit {
        Some(n) if n < s.len() => s.head(n),
        _ => s,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| CliError::Output {
        path: path.to_path_buf(),
        source,
    })
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ensemble(a) => cmd_ensemble(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
    }
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let (mut trainer, run) = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::<f32>::load(path)?;
            let trainer = Trainer::resume(ck.model, ck.run.train.clone(), ck.state)?;
            (trainer, ck.run)
        }
        None => {
            let path = args.config.as_ref().expect("clap requires --config without --resume");
            let text =
                std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let mut run = RunConfig::parse(&text)?;
            if let Some(seed) = args.seed {
                run.model.seed = seed;
            }
            let model = CapsNet::build(run.model.clone())?;
            (Trainer::new(model, run.train.clone())?, run)
        }
    };
    let mut run = run;
    if let Some(e) = args.epochs {
        run.train.epochs = e;
        trainer.config.epochs = e;
    }
    let dir = args
        .data
        .clone()
        .or_else(|| run.data_dir.clone())
        .ok_or_else(|| CliError::Config("no dataset directory: pass --data or set data.dir".into()))?;
    let (train, val) = load_dataset(run.dataset, &dir, run.train_limit, run.val_limit)?;

    std::fs::create_dir_all(&args.out).map_err(|source| CliError::Output {
        path: args.out.clone(),
        source,
    })?;
    let mut stdout = std::io::stdout();
    while trainer.state.epoch < run.train.epochs {
        let record = trainer.train_epoch(&train, &val)?;
        let ck = Checkpoint {
            run: run.clone(),
            model: trainer.model.clone(),
            state: trainer.state.clone(),
        };
        let path = args.out.join(format!("epoch-{:03}.caps", record.epoch));
        ck.save(&path).map_err(|e| CliError::Output {
            path: path.clone(),
            source: std::io::Error::other(e.to_string()),
        })?;
        write_file(
            &args.out.join("metrics.csv"),
            metrics_csv(&trainer.state.history).as_bytes(),
        )?;
        let _ = writeln!(
            stdout,
            "epoch {} margin {:.5} recon {:.3} total {:.5} val_accuracy {:.4}",
            record.epoch, record.margin, record.reconstruction, record.total, record.val_accuracy
        );
    }
    let ck = Checkpoint {
        run,
        model: trainer.model,
        state: trainer.state,
    };
    let final_path = args.out.join("final.caps");
    write_file(&final_path, &ck.to_bytes())?;
    write_file(&args.out.join("metrics.csv"), metrics_csv(&ck.state.history).as_bytes())
}

pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ck = Checkpoint::<f32>::load(&args.checkpoint)?;
    let split = pick(
        args.split,
        load_dataset(dataset_of(&ck.model), &args.data, None, None)?,
        args.limit,
    );
    let acc = evaluate(&ck.model, &split, ck.run.train.batch_size, &ck.run.train.augmentation)?;
    println!("accuracy {acc:.6} ({} examples)", split.len());
    Ok(())
}

pub fn cmd_ensemble(args: EnsembleArgs) -> Result<()> {
    let ensemble = Ensemble::<f32>::from_manifest(&args.manifest)?;
    let first = &ensemble.members()[0];
    let split = pick(
        args.split,
        load_dataset(dataset_of(first), &args.data, None, None)?,
        args.limit,
    );
    let crop = crate::data::AugmentationConfig {
        random_crop: Some(first.config().input.height),
        enabled: first.config().input.height < split.height,
    };
    let acc = ensemble.evaluate(&split, 128, &crop)?;
    println!(
        "accuracy {acc:.6} ({} examples, {} members)",
        split.len(),
        ensemble.members().len()
    );
    Ok(())
}

/// Writes a binary PPM; `rgb` holds `width * height * 3` bytes.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> std::io::Result<()> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    std::fs::write(path, out)
}

/// Grid with originals on the top row and reconstructions below, one
/// column per image. Values in `[0, 1]` map to `round(v * 255)`.
pub fn reconstruction_grid(
    originals: &[f32],
    reconstructions: &[f32],
    count: usize,
    (channels, height, width): (usize, usize, usize),
) -> (usize, usize, Vec<u8>) {
    let grid_w = count * width;
    let grid_h = 2 * height;
    let mut rgb = vec![0u8; grid_w * grid_h * 3];
    let image_len = channels * height * width;
    for (row, source) in [originals, reconstructions].into_iter().enumerate() {
        for n in 0..count {
            let img = &source[n * image_len..(n + 1) * image_len];
            for y in 0..height {
                for x in 0..width {
                    let at = ((row * height + y) * grid_w + n * width + x) * 3;
                    for c in 0..3 {
                        let v = img[(c % channels) * height * width + y * width + x];
                        rgb[at + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                }
            }
        }
    }
    (grid_w, grid_h, rgb)
}

pub fn cmd_reconstruct(args: ReconstructArgs) -> Result<()> {
    let ck = Checkpoint::<f32>::load(&args.checkpoint)?;
    let model = &ck.model;
    let split = pick(
        args.split,
        load_dataset(dataset_of(model), &args.data, None, None)?,
        None,
    );
    let count = (args.count as usize).min(split.len());
    if count == 0 {
        return Err(CliError::Data("split is empty".into()));
    }
    let batch = eval_batches::<f32>(&split.head(count), count, &ck.run.train.augmentation)
        .next()
        .expect("non-empty split yields a batch");
    let tape = Tape::new();
    let vars = model.bind(&tape, false);
    let fwd = model.forward(&vars, tape.constant(batch.images.clone()), None)?;
    let recon = model.reconstruct(&vars, &fwd, MaskBy::Predictions)?;
    let input = model.config().input;
    let (w, h, rgb) = reconstruction_grid(
        batch.images.data(),
        recon.value().data(),
        count,
        (input.channels, input.height, input.width),
    );
    write_ppm(&args.out, w, h, &rgb).map_err(|source| CliError::Output {
        path: args.out.clone(),
        source,
    })?;
    println!("wrote {} ({w}x{h}, {count} images)", args.out.display());
    Ok(())
}
