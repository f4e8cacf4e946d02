//! `cellstyle`: batch front end for the style-transfer pipeline.
//!
//! Exit status is 0 on success, 2 for configuration errors (bad paths,
//! manifests, arguments) and 3 for failures during computation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cellstyle_core::diffusion::{load_checkpoint, save_checkpoint, ToyTrainConfig};
use cellstyle_core::imaging::{list_images, load_image, resize_image, save_image, save_mask, BitDepth, Image, Interpolation};
use cellstyle_core::metrics::{evaluate_dataset, DetWeights};
use cellstyle_core::size_match::{Detector, NaiveDetector, Threshold};
use cellstyle_core::stylize::{self, AlphaMode, BatchOptions, PairManifest};
use cellstyle_core::synthetic::{generate_family, TextureFamily};
use cellstyle_core::{Error, Result, ToyUNetF32};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cellstyle", version, about = "Style transfer for annotated cell microscopy datasets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy backbone on a directory of images.
    TrainToy(TrainArgs),
    /// Write a procedural image/mask dataset.
    Synth(SynthArgs),
    /// Compute the cell size ratio and store it in the manifest.
    Ratio(ManifestArgs),
    /// Estimate alpha and store it in the manifest.
    Alpha(AlphaArgs),
    /// Generate the styled dataset of a manifest.
    Stylize(StylizeArgs),
    /// Score predicted masks against ground truth.
    Evaluate(EvaluateArgs),
    /// Segment images with the threshold detector.
    Detect(DetectArgs),
}

#[derive(Args)]
struct OutArg {
    /// Output root.
    #[arg(long, env = "CELLSTYLE_OUT", default_value = "cellstyle_out")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    images: PathBuf,
    /// Checkpoint to write; defaults to `<out>/toy_unet.ckpt`.
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    SmoothBright,
    TexturedDim,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    family: Family,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Multiplies cell radii.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct ManifestArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Replaces the manifest seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AlphaArgs {
    #[command(flatten)]
    manifest: ManifestArgs,
    #[arg(long)]
    backbone: PathBuf,
}

#[derive(Args)]
struct StylizeArgs {
    #[command(flatten)]
    manifest: ManifestArgs,
    #[arg(long)]
    backbone: PathBuf,
    #[command(flatten)]
    out: OutArg,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// `adaptive` or `fixed:<value>`.
    #[arg(long)]
    alpha_mode: Option<AlphaMode>,
    /// Skip target rescaling (r = 1).
    #[arg(long)]
    no_size_match: bool,
    /// Rescale sources to the target cell size without style transfer.
    #[arg(long)]
    size_match_only: bool,
    #[arg(long)]
    replay_source_queries: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// Penalties as `w_split,w_fn,w_fp`.
    #[arg(long, value_parser = parse_weights)]
    weights: Option<DetWeights>,
    /// Directory for `metrics.json` and `metrics.csv`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    images: PathBuf,
    #[command(flatten)]
    out: OutArg,
    /// Fixed threshold in [0, 1]; Otsu when absent.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, default_value_t = NaiveDetector::default().min_area)]
    min_area: usize,
}

fn parse_weights(s: &str) -> std::result::Result<DetWeights, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    let [w_split, w_fn, w_fp] = v[..] else {
        return Err(format!("expected three comma-separated weights, got {}", v.len()));
    };
    let w = DetWeights { w_split, w_fn, w_fp };
    w.validate().map_err(|e| e.to_string())?;
    Ok(w)
}

fn load_manifest(args: &ManifestArgs) -> Result<PairManifest> {
    let mut m = PairManifest::load(&args.manifest)?;
    if let Some(seed) = args.seed {
        m.seed = seed;
    }
    Ok(m)
}

fn load_backbone(path: &Path) -> Result<ToyUNetF32> {
    Ok(load_checkpoint::<f32>(path)?.0)
}

fn train_toy(a: TrainArgs) -> Result<()> {
    let files = list_images(&a.images)?;
    if files.is_empty() {
        return Err(Error::EmptyDataset(format!("no images in {}", a.images.display())));
    }
    let data = files
        .iter()
        .map(|p| {
            let img = load_image::<f32>(p)?;
            let gray = Image::from_gray(img.luminance())?;
            if gray.dims() == (a.image_size, a.image_size) {
                Ok(gray)
            } else {
                resize_image(&gray, a.image_size, a.image_size, Interpolation::Bilinear)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cfg = ToyTrainConfig {
        image_size: a.image_size,
        seed: a.seed,
        ..ToyTrainConfig::default()
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let (model, report) = cellstyle_core::diffusion::train_toy_backbone(&data, &cfg, |epoch, loss| {
        println!("epoch {epoch} loss {loss:.5}");
    })?;
    let path = a.backbone.unwrap_or_else(|| a.out.out.join("toy_unet.ckpt"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_checkpoint(&model, &report.epoch_losses, &path)?;
    println!("checkpoint={}", path.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let family = match a.family {
        Family::SmoothBright => TextureFamily::smooth_bright(),
        Family::TexturedDim => TextureFamily::textured_dim(),
    }
    .scaled(a.scale);
    let (images, masks) = (a.out.out.join("images"), a.out.out.join("masks"));
    for d in [&images, &masks] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for (k, (img, mask)) in generate_family::<f32>(&family, a.size, a.count, a.seed)?.into_iter().enumerate() {
        save_image(&img, images.join(format!("{k:05}.tif")), BitDepth::Sixteen)?;
        save_mask(&mask, masks.join(format!("{k:05}.tif")))?;
    }
    println!("wrote {} samples to {}", a.count, a.out.out.display());
    Ok(())
}

fn ratio(a: ManifestArgs) -> Result<()> {
    let mut m = load_manifest(&a)?;
    stylize::resolve_size_ratio::<f32>(&mut m)?;
    m.save(&a.manifest)?;
    println!("{}", m.summary_line());
    Ok(())
}

fn alpha(a: AlphaArgs) -> Result<()> {
    let mut m = load_manifest(&a.manifest)?;
    let backbone = load_backbone(&a.backbone)?;
    stylize::resolve_alpha(&mut m, &backbone)?;
    m.save(&a.manifest.manifest)?;
    println!("{}", m.summary_line());
    Ok(())
}

fn run_stylize(a: StylizeArgs) -> Result<()> {
    let mut m = load_manifest(&a.manifest)?;
    if let Some(mode) = a.alpha_mode {
        m.ablation.alpha_mode = mode;
    }
    if a.no_size_match {
        m.ablation.use_size_match = false;
    }
    if a.size_match_only {
        m.ablation.style_transfer = false;
    }
    if a.replay_source_queries {
        m.replay_source_queries = true;
    }
    let backbone = load_backbone(&a.backbone)?;
    let report = stylize::generate_dataset(&m, &backbone, &a.out.out, &BatchOptions { workers: a.workers })?;
    println!("{}", m.summary_line());
    println!(
        "generated={} skipped={} failed={} dir={}",
        report.generated,
        report.skipped,
        report.failed,
        report.pair_dir.display()
    );
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let report = evaluate_dataset(&a.gt, &a.pred, a.weights.unwrap_or_default())?;
    if let Some(dir) = &a.report {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("metrics.json", report.to_json()), ("metrics.csv", report.to_csv())] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
    }
    for ex in &report.excluded {
        log::warn!("excluded {}: {}", ex.frame, ex.reason);
    }
    println!("{}", report.summary_line());
    Ok(())
}

fn detect(a: DetectArgs) -> Result<()> {
    let detector = NaiveDetector {
        threshold: a.threshold.map_or(Threshold::Otsu, Threshold::Fixed),
        min_area: a.min_area,
    };
    std::fs::create_dir_all(&a.out.out).map_err(|e| Error::io(&a.out.out, e))?;
    let files = list_images(&a.images)?;
    for p in &files {
        let mask = Detector::<f32>::detect(&detector, &load_image::<f32>(p)?)?;
        let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("mask");
        save_mask(&mask, a.out.out.join(format!("{name}.tif")))?;
    }
    println!("segmented {} images into {}", files.len(), a.out.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainToy(a) => train_toy(a),
        Command::Synth(a) => synth(a),
        Command::Ratio(a) => ratio(a),
        Command::Alpha(a) => alpha(a),
        Command::Stylize(a) => run_stylize(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Detect(a) => detect(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
