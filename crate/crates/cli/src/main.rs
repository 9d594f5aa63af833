use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use csformer::gradcheck::Coordinates;
use csformer::harness::checkpoint::Checkpoint;
use csformer::harness::synthetic::synthetic_corpus;
use csformer::harness::train::load_corpus;
use csformer::harness::{evaluate, load_grayscale, save_grayscale, RunConfig, Trainer};
use csformer::{CsFormer, ModelConfig};

/// Published trainable-parameter count of the default model.
const REFERENCE_PARAMS: f64 = 6.71e6;

#[derive(Parser)]
#[command(name = "csformer", version, about = "Learned block-based compressive sensing: train, reconstruct, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a folder of images.
    Train(TrainArgs),
    /// Sample and reconstruct one image.
    Reconstruct(ReconstructArgs),
    /// Score a checkpoint on one or more dataset folders.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of the model.
    Gradcheck(GradcheckArgs),
    /// Report the trainable parameter count of a configuration.
    Paramcount(ParamcountArgs),
    /// Write procedurally generated training images.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat TOML file with model and training keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Sampling ratio, overriding the config file.
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the initial estimate and the residual (shifted by 0.5)
    /// next to the output.
    #[arg(long)]
    save_residual: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    datasets: Vec<PathBuf>,
    #[arg(long)]
    csv: PathBuf,
    /// Refuse to evaluate unless the checkpoint was trained at this ratio.
    #[arg(long)]
    ratio: Option<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check the default-size model (sampled coordinates; slow).
    #[arg(long, conflicts_with = "reduced")]
    full: bool,
    /// Check the reduced configuration (the default).
    #[arg(long)]
    reduced: bool,
    /// Coordinates probed per parameter tensor.
    #[arg(long, default_value_t = 6)]
    per_tensor: usize,
}

#[derive(Args)]
struct ParamcountArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sampling ratio; without a config file the reference setting 0.5 is used.
    #[arg(long)]
    ratio: Option<f64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    count: usize,
    #[arg(long, default_value_t = 160)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    Ok(cfg)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_else(|| "png".into());
    path.with_file_name(format!("{stem}{suffix}.{ext}"))
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_run_config(args.config.as_deref())?;
    if let Some(r) = args.ratio {
        cfg.model.ratio = r;
        cfg.model.validate()?;
    }
    let corpus = load_corpus(&args.data).with_context(|| format!("reading {}", args.data.display()))?;
    let mut trainer = match &args.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if ckpt.config != cfg.model {
                bail!("{} was trained with a different model configuration", p.display());
            }
            Trainer::resume(&ckpt, cfg.train.clone(), corpus)?
        }
        None => Trainer::new(CsFormer::new(cfg.model.clone(), cfg.train.seed)?, cfg.train.clone(), corpus)?,
    };
    eprintln!(
        "training {} parameters for {} iterations at ratio {} (seed {})",
        trainer.model.param_count(),
        cfg.train.iterations,
        cfg.model.ratio,
        cfg.train.seed
    );
    let out = args.out.clone();
    let (every, log) = (cfg.train.checkpoint_every, cfg.train.log_every.max(1));
    trainer.run(|t, loss| {
        let it = t.iteration();
        if it % log == 0 {
            eprintln!("iter {it:>7}  loss {loss:.6e}  lr {:.3e}", t.config().schedule().lr(it));
        }
        if every > 0 && it % every == 0 {
            t.checkpoint().save(&out)?;
        }
        Ok(())
    })?;
    trainer.checkpoint().save(&args.out)?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn reconstruct(args: ReconstructArgs) -> Result<()> {
    let model = Checkpoint::load(&args.ckpt)?.to_model()?;
    let image = load_grayscale(&args.input)?;
    let rec = model.reconstruct(&image)?;
    save_grayscale(&args.out, &rec.image)?;
    if args.save_residual {
        save_grayscale(with_suffix(&args.out, "_initial"), &rec.initial)?;
        save_grayscale(with_suffix(&args.out, "_residual"), &rec.residual.map(|v| v + 0.5))?;
    }
    let p = csformer::harness::psnr(&rec.image, &image, 1.0)?;
    println!("{}: PSNR {p:.2} dB, SSIM {:.4}", args.input.display(), csformer::harness::ssim(&rec.image, &image)?);
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let model = Checkpoint::load(&args.ckpt)?.to_model()?;
    let report = evaluate(&model, &args.datasets, args.ratio)?;
    report.save_csv(&args.csv)?;
    for d in &report.datasets {
        println!("{:<16} {:>4} images  PSNR {:>7.2}  SSIM {:.4}", d.name, d.count, d.psnr, d.ssim);
    }
    println!("direct average    PSNR {:>7.2}  SSIM {:.4}", report.direct.0, report.direct.1);
    println!("weighted average  PSNR {:>7.2}  SSIM {:.4}", report.weighted.0, report.weighted.1);
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let (cfg, crop) =
        if args.full { (ModelConfig { depth: 1, ..ModelConfig::default() }, 64) } else { (ModelConfig::reduced(), 16) };
    let model = CsFormer::new(cfg, 1)?;
    let crops = synthetic_corpus(1, crop, crop, 3).pop().unwrap().reshape(&[1, crop, crop, 1])?;
    let report = model.grad_check(&crops, Coordinates::Sample { per_tensor: args.per_tensor, seed: 7 }, 11)?;
    let store = model.store();
    let worst = report
        .worst
        .and_then(|(i, k)| store.params().nth(i).map(|(n, _)| format!("{n}[{k}]")))
        .unwrap_or_else(|| "-".into());
    println!(
        "{} config: {} coordinates, max relative error {:.3e} (worst at {worst})",
        if args.full { "full" } else { "reduced" },
        report.checked,
        report.max_rel_error
    );
    if report.max_rel_error >= 1e-3 {
        bail!("gradient check failed");
    }
    Ok(())
}

fn paramcount(args: ParamcountArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?.model,
        None => ModelConfig::default().with_ratio(0.5),
    };
    if let Some(r) = args.ratio {
        cfg.ratio = r;
        cfg.validate()?;
    }
    let model = CsFormer::new(cfg.clone(), 0)?;
    for (group, n) in model.param_breakdown() {
        println!("{group:<12} {n:>10}");
    }
    let total = model.param_count();
    println!("{:<12} {total:>10}", "total");
    let delta = (total as f64 - REFERENCE_PARAMS) / REFERENCE_PARAMS * 100.0;
    println!(
        "reference {:.2}M (C0=128, ratio 0.5); delta {delta:+.2}% at C0={}, ratio {}",
        REFERENCE_PARAMS / 1e6,
        cfg.base_channels,
        cfg.ratio
    );
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    for (i, img) in synthetic_corpus(args.count, args.size, args.size, args.seed).iter().enumerate() {
        save_grayscale(args.out.join(format!("synth_{i:04}.png")), img)?;
    }
    println!("wrote {} images to {}", args.count, args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Paramcount(a) => paramcount(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
