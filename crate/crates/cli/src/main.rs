mod config;
mod exit;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use duostream::checkpoint::Checkpoint;
use duostream::data::{load_image, load_mask, read_manifest, save_grid, RngState, Split};
use duostream::metrics::evaluate_dataset;
use duostream::model::Network;
use duostream::schedule::{diffuse_closed, NoiseSchedule};
use duostream::synthgen::{extract_objects, generate_dataset, generate_toy_dataset, DonorPair};
use duostream::trainer::{fine_tune, Dataset, TrainOutcome, Trainer};

use config::RunConfig;
use exit::{Failure, Kind};

#[derive(Parser)]
#[command(name = "duostream", version, about = "Dual-stream segmentation toolkit")]
struct Cli {
    /// Increase log detail (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// `dot.path=value` override, applied after the file. Repeatable.
    #[arg(short = 'o', long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed; beats the config file and DUOSTREAM_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Annotated manifest for the segmentation stream (data.seg_manifest).
    #[arg(long)]
    seg: Option<PathBuf>,
    /// Image manifest for the reconstruction stream (data.rec_manifest).
    #[arg(long)]
    rec: Option<PathBuf>,
    /// Validation manifest (data.val_manifest).
    #[arg(long)]
    val: Option<PathBuf>,
    /// Checkpoint directory (train.checkpoint_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Composite synthetic image-mask pairs from donors.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Donor directory: a manifest.txt, or images/ and masks/ with matching names.
        #[arg(long, required_unless_present = "toy")]
        donors: Option<PathBuf>,
        /// Generate procedural ellipse scenes instead of compositing donors.
        #[arg(long)]
        toy: bool,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from scratch.
    Train(TrainArgs),
    /// Continue training from a checkpoint with a fresh optimizer.
    Finetune {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score a checkpoint on a manifest.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Binarization threshold (train.threshold).
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Noise an image at chosen steps with the closed-form forward process.
    Diffuse {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        image: PathBuf,
        /// Comma-separated steps.
        #[arg(long = "t", value_delimiter = ',', required = true)]
        steps: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render CSV logs and reports as SVG charts.
    Report {
        /// train_log.csv, val.csv or report_summary.csv files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(args: &ConfigArgs, extra: &[String]) -> Result<RunConfig> {
    let mut overrides = args.overrides.clone();
    overrides.extend_from_slice(extra);
    let cfg = config::resolve(args.config.as_deref(), &overrides, args.seed)?;
    duostream::init_workers(cfg.workers).unwrap_or_else(|e| log::debug!("{e}"));
    Ok(cfg)
}

fn toml_path(p: &Path) -> String {
    format!("\"{}\"", p.display().to_string().replace('\\', "\\\\").replace('"', "\\\""))
}

fn load_donors(dir: &Path) -> Result<Vec<DonorPair>> {
    let manifest_path = dir.join("manifest.txt");
    let mut pairs: Vec<(String, PathBuf, PathBuf)> = Vec::new();
    if manifest_path.exists() {
        for r in read_manifest(&manifest_path)?.records {
            if let Some(m) = &r.mask {
                pairs.push((r.id(), r.image.clone(), m.clone()));
            }
        }
    } else {
        let images = dir.join("images");
        let entries = std::fs::read_dir(&images)
            .map_err(|e| Failure::new(Kind::Io, format!("cannot read donors in {}: {e}", images.display())))?;
        for entry in entries {
            let path = entry?.path();
            let Some(name) = path.file_name() else { continue };
            let mask = dir.join("masks").join(name);
            if mask.exists() {
                let tag = path.file_stem().and_then(|s| s.to_str()).unwrap_or("donor").to_string();
                pairs.push((tag, path, mask));
            }
        }
    }
    pairs.sort();
    if pairs.is_empty() {
        return Err(Failure::new(Kind::Io, format!("no annotated donors found in {}", dir.display())).into());
    }
    pairs
        .into_iter()
        .map(|(tag, img, mask)| {
            let image = load_image(&img)?;
            let mask = load_mask(&mask)?;
            extract_objects(tag, &image, &mask).with_context(|| format!("donor {}", img.display()))
        })
        .collect()
}

fn cmd_synth(cfg_args: &ConfigArgs, donors: Option<&Path>, toy: bool, count: Option<usize>, out: &Path) -> Result<()> {
    let extra: Vec<String> = count.map(|c| vec![format!("synth.count={c}")]).unwrap_or_default();
    let cfg = resolve(cfg_args, &extra)?;
    config::echo(&cfg);
    cfg.synth.validate()?;
    let seed = RngState::new(cfg.train.seed, 0x5e17);
    let manifest = if toy {
        generate_toy_dataset(
            cfg.synth.canvas_size,
            cfg.synth.objects_per_image,
            cfg.synth.count,
            "toy",
            Split::Train,
            out,
            seed,
        )?
    } else {
        let dir = donors.ok_or_else(|| Failure::new(Kind::Usage, "--donors is required without --toy"))?;
        let donors = load_donors(dir)?;
        generate_dataset(&donors, &cfg.synth, out, seed)?
    };
    println!("wrote {} records to {}", manifest.len(), out.join("manifest.txt").display());
    Ok(())
}

fn train_overrides(args: &TrainArgs) -> Vec<String> {
    let mut extra = Vec::new();
    for (key, value) in [
        ("data.seg_manifest", &args.seg),
        ("data.rec_manifest", &args.rec),
        ("data.val_manifest", &args.val),
        ("train.checkpoint_dir", &args.out),
    ] {
        if let Some(p) = value {
            extra.push(format!("{key}={}", toml_path(p)));
        }
    }
    extra
}

fn load_set(path: &Path, size: usize) -> Result<Dataset> {
    if !path.exists() {
        return Err(Failure::new(Kind::Usage, format!("manifest not found: {}", path.display())).into());
    }
    Ok(Dataset::from_manifest(&read_manifest(path)?, size)?)
}

type Streams = (Dataset, Dataset, Option<Dataset>);

fn prepare_training(args: &TrainArgs) -> Result<(RunConfig, Streams)> {
    let mut cfg = resolve(&args.cfg, &train_overrides(args))?;
    if cfg.train.checkpoint_dir.is_none() {
        cfg.train.checkpoint_dir = Some(PathBuf::from("checkpoints"));
    }
    config::echo(&cfg);
    cfg.model.validate()?;
    cfg.train.validate()?;
    let seg_path = cfg
        .data
        .seg_manifest
        .clone()
        .ok_or_else(|| Failure::new(Kind::Usage, "no segmentation manifest: set data.seg_manifest or --seg"))?;
    let size = cfg.model.image_size;
    let seg = load_set(&seg_path, size)?;
    let rec = match &cfg.data.rec_manifest {
        Some(p) => load_set(p, size)?,
        None => seg.clone(),
    };
    let val = cfg.data.val_manifest.as_deref().map(|p| load_set(p, size)).transpose()?;
    Ok((cfg, (seg, rec, val)))
}

fn report_outcome(out: &TrainOutcome) {
    match &out.best_checkpoint_path {
        Some(p) => println!("best checkpoint: {}", p.display()),
        None => println!("best checkpoint: (none written)"),
    }
    println!("best dice: {:.4}", out.best_val_dice);
    println!("steps: {}", out.log.len());
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let (cfg, (seg, rec, val)) = prepare_training(args)?;
    let net = Network::new(cfg.model, RngState::new(cfg.train.seed, 0))?;
    let outcome = Trainer::new(net, cfg.train, seg, rec, val)?.train()?;
    report_outcome(&outcome);
    Ok(())
}

fn cmd_finetune(args: &TrainArgs, checkpoint: &Path) -> Result<()> {
    let (cfg, (seg, rec, val)) = prepare_training(args)?;
    let outcome = fine_tune(checkpoint, &cfg.model, cfg.train, seg, rec, val)?;
    report_outcome(&outcome);
    Ok(())
}

fn cmd_eval(cfg_args: &ConfigArgs, checkpoint: &Path, manifest: &Path, out: &Path, threshold: Option<f64>) -> Result<()> {
    let extra: Vec<String> = threshold.map(|t| vec![format!("train.threshold={t:?}")]).unwrap_or_default();
    let cfg = resolve(cfg_args, &extra)?;
    config::echo(&cfg);
    let threshold = cfg.train.threshold;
    if !(0.0..1.0).contains(&threshold) {
        return Err(Failure::new(Kind::Usage, format!("threshold must lie in [0,1), got {threshold}")).into());
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let net = Network::from_checkpoint(&ckpt, None)?;
    let manifest = read_manifest(manifest)?;
    let report = evaluate_dataset(&net, &manifest, threshold)?;
    report.write(out)?;
    for d in &report.domains {
        println!("domain {}: n={} dice={:.4} iou={:.4}", d.domain, d.count, d.mean_dice, d.mean_iou);
    }
    println!("overall dice: {:.4}", report.mean_dice);
    println!("overall iou: {:.4}", report.mean_iou);
    println!("wrote {}", out.join("report_summary.csv").display());
    Ok(())
}

fn cmd_diffuse(cfg_args: &ConfigArgs, image: &Path, steps: &[usize], out: &Path) -> Result<()> {
    let cfg = resolve(cfg_args, &[])?;
    config::echo(&cfg);
    let d = &cfg.diffuse;
    let schedule = NoiseSchedule::new(d.kind, d.steps, d.beta_min, d.beta_max)?;
    for &t in steps {
        schedule.alpha_bar(t)?;
    }
    let x0 = load_image(image)?;
    std::fs::create_dir_all(out).map_err(|e| Failure::new(Kind::Io, format!("cannot create {}: {e}", out.display())))?;
    let mut grid = vec![x0.clone()];
    for &t in steps {
        let mut rng = RngState::new(cfg.train.seed, 0xd1ff).child(t as u64).rng();
        let xt = diffuse_closed(&x0, t, &schedule, &mut rng)?;
        let n = xt.data().len() as f64;
        let mean = xt.data().iter().sum::<f64>() / n;
        let std = (xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        println!(
            "t={t} alpha_bar={:.6e} mean={mean:.4} std={std:.4}",
            schedule.alpha_bar(t)?
        );
        grid.push(xt);
    }
    save_grid(&grid, out.join("grid.png"))?;
    schedule.write_csv(out.join("schedule.csv"))?;
    println!("wrote {} and {}", out.join("grid.png").display(), out.join("schedule.csv").display());
    Ok(())
}

fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<()> {
    println!("# effective arguments");
    for i in inputs {
        println!("#   input = {}", i.display());
    }
    println!("#   out = {}", out.display());
    for (file, rows) in report::render(inputs, out)? {
        println!("wrote {} ({rows} rows)", file.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth {
            cfg,
            donors,
            toy,
            count,
            out,
        } => cmd_synth(cfg, donors.as_deref(), *toy, *count, out),
        Command::Train(args) => cmd_train(args),
        Command::Finetune { train, checkpoint } => cmd_finetune(train, checkpoint),
        Command::Eval {
            cfg,
            checkpoint,
            manifest,
            out,
            threshold,
        } => cmd_eval(cfg, checkpoint, manifest, out, *threshold),
        Command::Diffuse { cfg, image, steps, out } => cmd_diffuse(cfg, image, steps, out),
        Command::Report { inputs, out } => cmd_report(inputs, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = exit::classify(&e);
            eprintln!("error: {e:#}");
            ExitCode::from(kind.code())
        }
    }
}
