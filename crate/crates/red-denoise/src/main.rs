//! Command-line front end: simulation, training, inference, evaluation,
//! and the depth-sweep experiment.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags, malformed
//! configs), 2 on runtime failures (I/O, checksum, divergence).

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use red_denoise::ct_sim::{detectors_for, make_pair};
use red_denoise::error::Error;
use red_denoise::io::{
    read_pgm16, read_rtf1, write_pgm16, write_rtf1, Manifest, ManifestEntry, RTF1_MAGIC,
};
use red_denoise::metrics::{evaluate, QualityReport};
use red_denoise::training::{load_checkpoint, train, worker_threads, TrainConfig};

#[derive(Parser)]
#[command(
    name = "red-denoise",
    version,
    about = "Residual encoder-decoder denoising for simulated low-dose CT"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantom pairs and a dataset manifest
    Simulate(SimulateArgs),
    /// Train a denoiser from a key=value config file
    Train(TrainArgs),
    /// Run a checkpoint over one image (PGM or RTF1)
    Denoise(DenoiseArgs),
    /// Evaluate a checkpoint over a manifest
    Eval(EvalArgs),
    /// Train and evaluate one model per network depth
    SweepDepth(SweepArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Output directory for images and the manifest
    #[arg(long)]
    out: PathBuf,
    /// Number of pairs to generate
    #[arg(long)]
    count: usize,
    /// Phantom edge length in pixels
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Projection angles per scan
    #[arg(long, default_value_t = 60)]
    views: usize,
    /// Photons per ray entering the object
    #[arg(long, default_value_t = 1e4)]
    photons: f64,
    /// Base seed; pair i uses seed + i
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// key=value training config
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoints and history
    #[arg(long)]
    out: PathBuf,
    /// Override the config's warmup_iterations (pixel-loss-only phase)
    #[arg(long)]
    warmup_iterations: Option<usize>,
}

#[derive(Args)]
struct DenoiseArgs {
    /// Checkpoint to apply
    #[arg(long)]
    model: PathBuf,
    /// Input image, PGM or RTF1 (detected by content)
    #[arg(long = "in")]
    input: PathBuf,
    /// Output image, written in the input's format
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to apply
    #[arg(long)]
    model: PathBuf,
    /// Dataset manifest
    #[arg(long)]
    manifest: PathBuf,
    /// Report destination (TSV)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated even layer counts, e.g. 4,8,12
    #[arg(long, value_delimiter = ',', required = true)]
    layers: Vec<usize>,
    /// Base training config (every depth shares it, seeds included)
    #[arg(long)]
    config: PathBuf,
    /// Output directory; one subdirectory per depth plus sweep.tsv
    #[arg(long)]
    out: PathBuf,
    /// Manifest to evaluate on (defaults to the training manifest)
    #[arg(long)]
    eval_manifest: Option<PathBuf>,
    /// Train the depths concurrently
    #[arg(long, default_value_t = false)]
    parallel: bool,
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Train(args) => cmd_train(args),
        Command::Denoise(args) => cmd_denoise(args),
        Command::Eval(args) => cmd_eval(args),
        Command::SweepDepth(args) => cmd_sweep(args),
    };
    match outcome {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    println!(
        "simulate: out={} count={} size={} views={} photons={} seed={} detectors={} threads={}",
        args.out.display(),
        args.count,
        args.size,
        args.views,
        args.photons,
        args.seed,
        detectors_for(args.size),
        worker_threads()
    );
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", args.out.display())))?;
    let mut entries = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let seed = args.seed.wrapping_add(i as u64);
        let (clean, noisy) = make_pair(seed, args.size, args.views, args.photons)?;
        let clean_name = format!("pair{i:04}_clean.rtf");
        let noisy_name = format!("pair{i:04}_noisy.rtf");
        write_rtf1(&args.out.join(&clean_name), &clean)?;
        write_rtf1(&args.out.join(&noisy_name), &noisy)?;
        write_pgm16(&args.out.join(format!("pair{i:04}_clean.pgm")), &clean)?;
        write_pgm16(&args.out.join(format!("pair{i:04}_noisy.pgm")), &noisy)?;
        entries.push(ManifestEntry {
            seed,
            photons: args.photons,
            views: args.views,
            clean: clean_name,
            noisy: noisy_name,
        });
        println!("wrote pair {i} (seed {seed})");
    }
    Manifest::write(&args.out.join("manifest.tsv"), &entries)?;
    println!("manifest: {}", args.out.join("manifest.tsv").display());
    Ok(())
}

fn load_train_config(path: &Path, warmup_override: Option<usize>) -> Result<TrainConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut config = TrainConfig::parse(&text, base)?;
    if let Some(warmup) = warmup_override {
        config.warmup_iterations = warmup;
    }
    Ok(config)
}

fn print_train_config(config: &TrainConfig) {
    println!(
        "train: manifest={} patch_size={} patches_per_image={} batch_size={} iterations={} \
         learning_rate={} adam=({},{},{}) lambda_p={} warmup_iterations={} seed={} \
         checkpoint_every={} extractor_seed={:#x} num_layers={} channels={} kernel_size={} \
         model_seed={} threads={}",
        config.manifest.display(),
        config.patch_size,
        config.patches_per_image,
        config.batch_size,
        config.iterations,
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
        config.lambda_p,
        config.warmup_iterations,
        config.seed,
        config.checkpoint_every,
        config.extractor_seed,
        config.red.num_layers,
        config.red.channels,
        config.red.kernel_size,
        config.red.seed,
        worker_threads()
    );
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let config = load_train_config(&args.config, args.warmup_iterations)?;
    print_train_config(&config);
    let (_, history) = train(&config, &args.out)?;
    let last = history.records.last().expect("at least one iteration");
    println!(
        "done: {} iterations, final loss {:.6e} (mse {:.6e}, perceptual {:.6e})",
        last.iteration, last.total, last.mse, last.perceptual
    );
    println!(
        "final checkpoint: {}",
        args.out.join("model_final.rdck").display()
    );
    Ok(())
}

enum ImageFormat {
    Pgm,
    Rtf1,
}

fn sniff_format(path: &Path) -> Result<ImageFormat, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    if bytes.starts_with(RTF1_MAGIC) {
        Ok(ImageFormat::Rtf1)
    } else if bytes.starts_with(b"P5") {
        Ok(ImageFormat::Pgm)
    } else {
        Err(CliError::Runtime(format!(
            "{} is neither RTF1 nor binary PGM",
            path.display()
        )))
    }
}

fn cmd_denoise(args: DenoiseArgs) -> Result<(), CliError> {
    println!(
        "denoise: model={} in={} out={} threads={}",
        args.model.display(),
        args.input.display(),
        args.out.display(),
        worker_threads()
    );
    let model = load_checkpoint(&args.model)?;
    let format = sniff_format(&args.input)?;
    let image = match format {
        ImageFormat::Pgm => read_pgm16(&args.input)?,
        ImageFormat::Rtf1 => read_rtf1(&args.input)?,
    };
    let (_, denoised) = model.forward_image(&image)?;
    match format {
        // write_pgm16 clamps to [0, 1] as part of quantization
        ImageFormat::Pgm => write_pgm16(&args.out, &denoised)?,
        ImageFormat::Rtf1 => write_rtf1(&args.out, &denoised)?,
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

/// Content-addressed checkpoint id: file name plus the stored checksum.
fn checkpoint_id(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    if bytes.len() < 8 {
        return Ok(name);
    }
    let checksum = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    Ok(format!("{name}@{checksum:016x}"))
}

fn run_eval(
    model_path: &Path,
    manifest_path: &Path,
    out_path: &Path,
) -> Result<QualityReport, CliError> {
    let model = load_checkpoint(model_path)?;
    let manifest = Manifest::read(manifest_path)?;
    let mut report = evaluate(&manifest, &checkpoint_id(model_path)?, |noisy| {
        model.forward_image(noisy).map(|(_, denoised)| denoised)
    });
    report.manifest_id = manifest_path.display().to_string();
    std::fs::write(out_path, report.to_tsv())
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", out_path.display())))?;
    Ok(report)
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    println!(
        "eval: model={} manifest={} out={} threads={}",
        args.model.display(),
        args.manifest.display(),
        args.out.display(),
        worker_threads()
    );
    let report = run_eval(&args.model, &args.manifest, &args.out)?;
    if let (Some(d), Some(n)) = (&report.denoised_agg, &report.noisy_agg) {
        println!(
            "denoised: ssim {:.4} rmse {:.5} psnr {:.2} dB",
            d.mean.ssim, d.mean.rmse, d.mean.psnr_db
        );
        println!(
            "noisy:    ssim {:.4} rmse {:.5} psnr {:.2} dB",
            n.mean.ssim, n.mean.rmse, n.mean.psnr_db
        );
    }
    println!("report: {}", args.out.display());
    Ok(())
}

struct DepthOutcome {
    layers: usize,
    report: QualityReport,
    seconds: f64,
}

fn run_depth(
    base: &TrainConfig,
    layers: usize,
    out_dir: &Path,
    eval_manifest: &Path,
) -> Result<DepthOutcome, CliError> {
    let mut config = base.clone();
    config.red.num_layers = layers;
    let dir = out_dir.join(format!("depth_{layers:02}"));
    let started = Instant::now();
    train(&config, &dir)?;
    let report = run_eval(
        &dir.join("model_final.rdck"),
        eval_manifest,
        &dir.join("report.tsv"),
    )?;
    Ok(DepthOutcome {
        layers,
        report,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    for &layers in &args.layers {
        if layers < 2 || layers % 2 != 0 {
            return Err(CliError::Usage(format!(
                "layer counts must be even and >= 2, got {layers}"
            )));
        }
    }
    let base = load_train_config(&args.config, None)?;
    let eval_manifest = args
        .eval_manifest
        .clone()
        .unwrap_or_else(|| base.manifest.clone());
    println!(
        "sweep-depth: layers={:?} config={} out={} eval_manifest={} parallel={} threads={}",
        args.layers,
        args.config.display(),
        args.out.display(),
        eval_manifest.display(),
        args.parallel,
        worker_threads()
    );
    print_train_config(&base);
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", args.out.display())))?;

    let outcomes: Vec<DepthOutcome> = if args.parallel {
        let results: Vec<Result<DepthOutcome, CliError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = args
                .layers
                .iter()
                .map(|&layers| {
                    let (base, out, eval_manifest) = (&base, &args.out, &eval_manifest);
                    scope.spawn(move || run_depth(base, layers, out, eval_manifest))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("depth worker panicked"))
                .collect()
        });
        results.into_iter().collect::<Result<_, _>>()?
    } else {
        let mut outcomes = Vec::with_capacity(args.layers.len());
        for &layers in &args.layers {
            outcomes.push(run_depth(&base, layers, &args.out, &eval_manifest)?);
        }
        outcomes
    };

    let mut table = String::from("layers\tssim\trmse\tpsnr_db\tseconds\n");
    for o in &outcomes {
        let agg =
            o.report.denoised_agg.as_ref().ok_or_else(|| {
                CliError::Runtime(format!("depth {} produced no metrics", o.layers))
            })?;
        table.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.3}\n",
            o.layers, agg.mean.ssim, agg.mean.rmse, agg.mean.psnr_db, o.seconds
        ));
    }
    if let Some(noisy) = outcomes.first().and_then(|o| o.report.noisy_agg.as_ref()) {
        table.push_str(&format!(
            "#noisy\t{:.6}\t{:.6}\t{:.6}\t-\n",
            noisy.mean.ssim, noisy.mean.rmse, noisy.mean.psnr_db
        ));
    }
    let table_path = args.out.join("sweep.tsv");
    std::fs::write(&table_path, &table)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", table_path.display())))?;
    print!("{table}");
    println!("sweep table: {}", table_path.display());
    Ok(())
}
