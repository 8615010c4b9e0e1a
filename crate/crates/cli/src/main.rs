//! `tilecodec` command-line front end.
//!
//! Every subcommand writes machine-readable JSON lines to stdout and
//! diagnostics to stderr. Exit codes: 0 success, 1 usage error, 2 data
//! error (unreadable or malformed input), 3 internal error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::{json, Value};
use thiserror::Error;

use tilecodec::bitstream::{hex, load_model, read_stream, save_model, ModelFileError, StreamError};
use tilecodec::codec::{decode_image_threads, encode_image, CodecError, EncodeConfig};
use tilecodec::eval::{
    bitmap_pgm, load_corpus, summarize, sweep_adaptive, sweep_constant, to_csv, write_file, EvalError, RdRecord,
};
use tilecodec::image_io::{read_image, write_image, ImageError, ImageFormat};
use tilecodec::metrics::psnr;
use tilecodec::model::{Architecture, CodecModel, K_MAX};
use tilecodec::synth::synthetic_image;
use tilecodec::train::{
    patch_corpus, train_context, train_residual, LrConvention, Phase, TrainConfig, TrainError, PATCHES_PER_IMAGE,
};

#[derive(Debug, Parser)]
#[command(name = "tilecodec", version, about = "Block-based neural image codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compress a PNG or PPM image into a stream.
    Encode(EncodeArgs),
    /// Reconstruct an image from a stream.
    Decode(DecodeArgs),
    /// Train one phase of a model on a directory of images.
    Train(TrainArgs),
    /// Rate-distortion sweep over a directory of images.
    Sweep(SweepArgs),
    /// Print a stream's header and iteration histogram without a model.
    Inspect(InspectArgs),
    /// Write seeded synthetic PNG images, e.g. to rebuild the test corpus.
    GenCorpus(GenCorpusArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Constant,
    Adaptive,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    /// Image to compress (.png or .ppm).
    #[arg(long)]
    input: PathBuf,
    /// Stream file to write.
    #[arg(long)]
    output: PathBuf,
    /// Model file.
    #[arg(long)]
    model: PathBuf,
    /// Rate control: fixed iterations per tile, or a per-tile PSNR target.
    #[arg(long, value_enum, default_value = "constant")]
    mode: ModeArg,
    /// Iterations per tile, 0 to 16 (constant mode only).
    #[arg(long, conflicts_with = "target_psnr")]
    k: Option<usize>,
    /// Per-tile PSNR target in dB (adaptive mode only).
    #[arg(long)]
    target_psnr: Option<f64>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    /// Stream file.
    #[arg(long)]
    input: PathBuf,
    /// Image to write; `.png` selects PNG, anything else binary PPM.
    #[arg(long)]
    output: PathBuf,
    /// Model file the stream was encoded with.
    #[arg(long)]
    model: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PhaseArg {
    Context,
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RecipeArg {
    /// Learning rate 0.001, batch 16 (context) or 8 (residual), fan-in init.
    Toy,
    /// Batch 32, learning rate 0.5, σ = 0.02 init.
    AsPublished,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ConventionArg {
    /// The learning rate scales Adam's normalized step.
    AdamStep,
    /// The learning rate scales the bias-corrected first moment directly.
    Unnormalized,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Which network to train.
    #[arg(long, value_enum)]
    phase: PhaseArg,
    /// Directory of training images (.png or .ppm).
    #[arg(long)]
    corpus: PathBuf,
    /// Optimizer steps; 0 writes the starting model unchanged.
    #[arg(long)]
    steps: u64,
    /// Seed for initialization, batch order and binarization noise.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Starting model. Required for the residual phase unless
    /// --ablate-context; a fresh model is created otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Hyperparameter preset.
    #[arg(long, value_enum, default_value = "toy")]
    recipe: RecipeArg,
    /// Override the initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Override the mini-batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// What the learning rate multiplies.
    #[arg(long, value_enum, default_value = "adam-step")]
    lr_convention: ConventionArg,
    /// Residual phase: zero the context predictor and code tiles
    /// independently.
    #[arg(long)]
    ablate_context: bool,
    /// Hardest patches kept per corpus image.
    #[arg(long, default_value_t = PATCHES_PER_IMAGE)]
    patches_per_image: usize,
    /// Print a progress record every this many steps.
    #[arg(long, default_value_t = 50)]
    log_every: u64,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Directory of evaluation images.
    #[arg(long)]
    corpus: PathBuf,
    /// Model file.
    #[arg(long)]
    model: PathBuf,
    /// Rate control swept over.
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Comma-separated k values (constant) or PSNR targets in dB (adaptive).
    #[arg(long, value_delimiter = ',', required = true)]
    params: Vec<f64>,
    /// Per-image CSV output.
    #[arg(long)]
    csv: PathBuf,
    /// Directory for one PGM bit-allocation map per adaptive record.
    #[arg(long)]
    maps_dir: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// Stream file.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Debug, Args)]
struct GenCorpusArgs {
    /// Directory to create and fill.
    #[arg(long)]
    out: PathBuf,
    /// Number of images.
    #[arg(long)]
    count: u64,
    /// Image width.
    #[arg(long, default_value_t = 384)]
    width: usize,
    /// Image height.
    #[arg(long, default_value_t = 384)]
    height: usize,
    /// Seed of the first image; image i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CodecError> for CliError {
    fn from(e: CodecError) -> Self {
        match e {
            CodecError::TooLarge { .. } | CodecError::ModelMismatch { .. } | CodecError::Stream(_) => {
                CliError::Data(e.to_string())
            }
            CodecError::InvalidK(_) | CodecError::InvalidTarget(_) => CliError::Usage(e.to_string()),
            CodecError::Residual(_) | CodecError::Tensor(_) | CodecError::Pool(_) => CliError::Internal(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Codec { image, source } => match CliError::from(source) {
                CliError::Usage(m) => CliError::Usage(m),
                CliError::Data(m) => CliError::Data(format!("{image}: {m}")),
                CliError::Internal(m) => CliError::Internal(format!("{image}: {m}")),
            },
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::EmptyCorpus | TrainError::ImageTooSmall { .. } => CliError::Data(e.to_string()),
            TrainError::MissingContextModel => CliError::Usage(e.to_string()),
            TrainError::NonFinite(_) | TrainError::Tensor(_) => CliError::Internal(e.to_string()),
        }
    }
}

fn read_model(path: &Path) -> Result<CodecModel, CliError> {
    let bytes = std::fs::read(path).map_err(|e| io_error(path, e))?;
    load_model(&bytes).map_err(|e: ModelFileError| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| io_error(path, e))
}

fn emit(v: Value) {
    println!("{v}");
}

fn threads(arg: Option<usize>) -> Result<usize, CliError> {
    match arg {
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => Ok(n),
        None => Ok(0),
    }
}

/// JSON cannot hold infinity; lossless results report `null` PSNR.
fn finite(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn encode(args: EncodeArgs) -> Result<(), CliError> {
    let cfg = match (args.mode, args.k, args.target_psnr) {
        (ModeArg::Constant, Some(k), None) => EncodeConfig::constant(k),
        (ModeArg::Constant, None, _) => return Err(CliError::Usage("constant mode requires --k".into())),
        (ModeArg::Constant, Some(_), Some(_)) => {
            return Err(CliError::Usage("--target-psnr applies to adaptive mode only".into()))
        }
        (ModeArg::Adaptive, None, Some(t)) => EncodeConfig::adaptive(t),
        (ModeArg::Adaptive, _, None) => return Err(CliError::Usage("adaptive mode requires --target-psnr".into())),
        (ModeArg::Adaptive, Some(_), Some(_)) => return Err(CliError::Usage("--k applies to constant mode only".into())),
    }
    .with_threads(threads(args.threads)?);
    let img = read_image(&args.input)?;
    let model = read_model(&args.model)?;
    info!("encoding {}x{} image", img.width(), img.height());
    let enc = encode_image(&img, &cfg, &model)?;
    write_bytes(&args.output, &enc.bytes)?;
    let hist = enc.plan.histogram();
    let tiles = enc.plan.iterations.len();
    let mean_k = enc.plan.iterations.iter().map(|&k| k as f64).sum::<f64>() / tiles as f64;
    let mut rec = json!({
        "mode": match args.mode { ModeArg::Constant => "constant", ModeArg::Adaptive => "adaptive" },
        "bpp": enc.bpp(),
        "payload_bpp": enc.payload_bpp(),
        "bytes": enc.bytes.len(),
        "tiles": tiles,
        "mean_k": mean_k,
        "histogram": hist.to_vec(),
        "psnr": finite(psnr(&img, &enc.reconstruction).map_err(|e| CliError::Internal(e.to_string()))?),
    });
    match cfg.mode {
        tilecodec::codec::RateMode::Constant(k) => rec["k"] = json!(k),
        tilecodec::codec::RateMode::Adaptive(t) => rec["target_psnr"] = json!(t),
    }
    emit(rec);
    Ok(())
}

fn decode(args: DecodeArgs) -> Result<(), CliError> {
    let bytes = std::fs::read(&args.input).map_err(|e| io_error(&args.input, e))?;
    let model = read_model(&args.model)?;
    let img = decode_image_threads(&bytes, &model, threads(args.threads)?)?;
    write_image(&img, &args.output, ImageFormat::from_path(&args.output))?;
    emit(json!({
        "width": img.width(),
        "height": img.height(),
        "output": args.output.display().to_string(),
    }));
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), CliError> {
    let phase = match args.phase {
        PhaseArg::Context => Phase::Context,
        PhaseArg::Residual => Phase::Residual,
    };
    let mut cfg = match args.recipe {
        RecipeArg::Toy => TrainConfig::toy(phase, args.steps, args.seed),
        RecipeArg::AsPublished => TrainConfig::as_published(phase, args.steps, args.seed),
    };
    if let Some(lr) = args.lr {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(CliError::Usage("--lr must be a finite non-negative number".into()));
        }
        cfg.lr0 = lr;
    }
    if let Some(b) = args.batch_size {
        if b == 0 {
            return Err(CliError::Usage("--batch-size must be at least 1".into()));
        }
        cfg.batch_size = b;
    }
    cfg.lr_convention = match args.lr_convention {
        ConventionArg::AdamStep => LrConvention::AdamStep,
        ConventionArg::Unnormalized => LrConvention::Unnormalized,
    };
    cfg.ablate_context = args.ablate_context;
    if args.ablate_context && phase == Phase::Context {
        return Err(CliError::Usage("--ablate-context applies to the residual phase only".into()));
    }
    if args.log_every == 0 {
        return Err(CliError::Usage("--log-every must be at least 1".into()));
    }
    let mut model = match &args.model {
        Some(p) => read_model(p)?,
        None if phase == Phase::Residual && !args.ablate_context => {
            return Err(CliError::Usage("residual phase requires --model with a trained context predictor".into()))
        }
        None => CodecModel::init_with(Architecture::toy(), cfg.init, cfg.seed),
    };
    let images: Vec<_> = load_corpus(&args.corpus)?.into_iter().map(|c| c.image).collect();
    let corpus = patch_corpus(&images, args.patches_per_image)?;
    if corpus.is_empty() {
        return Err(CliError::Data(format!("{}: no training images", args.corpus.display())));
    }
    info!("{} patches from {} images", corpus.len(), images.len());
    let every = args.log_every;
    let mut log = |r: &tilecodec::train::StepRecord| {
        if r.step.is_multiple_of(every) || r.step + 1 == cfg.steps {
            emit(json!({
                "phase": args.phase.to_possible_value().map(|v| v.get_name().to_string()),
                "step": r.step,
                "lr": r.lr,
                "loss": r.loss,
            }));
        }
    };
    match phase {
        Phase::Context => train_context(&corpus, &mut model, &cfg, &mut log)?,
        Phase::Residual => train_residual(&corpus, &mut model, &cfg, &mut log)?,
    }
    write_bytes(&args.out, &save_model(&model))?;
    emit(json!({
        "out": args.out.display().to_string(),
        "digest": hex(&model.digest()),
        "context_steps": model.meta.context_steps,
        "residual_steps": model.meta.residual_steps,
        "context_loss": finite(model.meta.context_loss as f64),
        "residual_loss": finite(model.meta.residual_loss as f64),
    }));
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<(), CliError> {
    let model = read_model(&args.model)?;
    let corpus = load_corpus(&args.corpus)?;
    let threads = threads(args.threads)?;
    let records: Vec<RdRecord> = match args.mode {
        ModeArg::Constant => {
            let ks = args
                .params
                .iter()
                .map(|&p| {
                    if p >= 0.0 && p.fract() == 0.0 && p <= K_MAX as f64 {
                        Ok(p as usize)
                    } else {
                        Err(CliError::Usage(format!("k={p} is not an integer in 0..={K_MAX}")))
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            sweep_constant(&corpus, &model, &ks, threads)?
        }
        ModeArg::Adaptive => sweep_adaptive(&corpus, &model, &args.params, threads)?,
    };
    write_file(&args.csv, to_csv(&records).as_bytes())?;
    if let Some(dir) = &args.maps_dir {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        for r in records.iter().filter(|r| r.mode == "adaptive") {
            let path = dir.join(format!("{}_{}.pgm", r.image, r.param));
            write_file(&path, &bitmap_pgm(&r.plan))?;
        }
    }
    for s in summarize(&records) {
        emit(json!({
            "mode": s.mode,
            "param": s.param,
            "images": s.images,
            "bpp": s.mean_bpp,
            "payload_bpp": s.mean_payload_bpp,
            "psnr": finite(s.mean_psnr),
            "lossless_images": s.infinite,
        }));
    }
    Ok(())
}

fn inspect(args: InspectArgs) -> Result<(), CliError> {
    let bytes = std::fs::read(&args.input).map_err(|e| io_error(&args.input, e))?;
    let stream = read_stream(&bytes).map_err(|e: StreamError| CliError::Data(e.to_string()))?;
    let h = &stream.header;
    let (rows, cols) = h.grid();
    let hist = stream.plan.histogram();
    let mut rec = json!({
        "width": h.width,
        "height": h.height,
        "rows": rows,
        "cols": cols,
        "mode": h.mode.name(),
        "model_digest": hex(&h.model_digest),
        "bytes": bytes.len(),
        "payload_bits": stream.plan.payload_bits(),
        "histogram": hist.to_vec(),
    });
    match h.mode.target_db() {
        Some(t) => rec["target_psnr"] = json!(t),
        None => rec["k"] = json!(stream.plan.iterations.first().copied().unwrap_or(0)),
    }
    emit(rec);
    Ok(())
}

fn gen_corpus(args: GenCorpusArgs) -> Result<(), CliError> {
    if args.width == 0 || args.height == 0 {
        return Err(CliError::Usage("image sides must be positive".into()));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| io_error(&args.out, e))?;
    for i in 0..args.count {
        let path = args.out.join(format!("img{i:02}.png"));
        write_image(&synthetic_image(args.width, args.height, args.seed + i), &path, ImageFormat::Png)?;
        emit(json!({ "path": path.display().to_string(), "seed": args.seed + i }));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Train(a) => train(a),
        Command::Sweep(a) => sweep(a),
        Command::Inspect(a) => inspect(a),
        Command::GenCorpus(a) => gen_corpus(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TILECODEC_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
