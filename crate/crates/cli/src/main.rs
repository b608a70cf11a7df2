//! Command-line front end for the simulation pipeline.
//!
//! Every subcommand reads declarative inputs (TOML configs, images, kernel
//! stacks, tensors), writes its artifacts to the paths given on the command
//! line, and prints exactly one JSON summary line on stdout. Human-readable
//! progress goes to stderr behind `--verbose`. Runs are bit-reproducible
//! given identical flags and seed; `--threads` never changes output bytes.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use aberray::datagen::{generate_dataset, perturb_isp, perturb_prescription, DatasetConfig};
use aberray::degrade::{simulate_aberrated, Padding};
use aberray::image_buf::{read_auto, write_auto};
use aberray::metrics::measure_pair;
use aberray::psf::{build_psf_grid, load_psf_stack, save_psf_stack, PsfBuildParams};
use aberray::qdmr::{codebook_loss, quantize, Codebook, FeatureMap, DEFAULT_COMMIT_WEIGHT};
use aberray::rng::derive_seed;
use aberray::{DegradeConfig, Error, IspParams, LensPrescription, Result};

#[derive(Parser)]
#[command(name = "aberray", version, about = "Ray-traced optical degradation pipeline")]
struct Cli {
    /// Root seed; subcommands needing randomness without an explicit seed
    /// flag derive a labeled stream from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Cap on worker threads (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Progress logs on stderr.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Trace a lens into a per-patch PSF kernel stack.
    Psf(PsfArgs),
    /// Apply a kernel stack to an image, optionally through the sensor chain.
    Degrade(DegradeArgs),
    /// Randomly jitter a lens or sensor config within a bounded range.
    Perturb(PerturbArgs),
    /// Render a paired dataset plus manifest from a ground-truth corpus.
    Dataset(DatasetArgs),
    /// Compare two images (PSNR/SSIM).
    Metrics(MetricsArgs),
    /// Vector-quantization utilities over tensor files.
    #[command(subcommand)]
    Vq(VqCommand),
}

#[derive(Args)]
struct PsfArgs {
    /// Lens prescription TOML.
    #[arg(long)]
    lens: PathBuf,
    /// Sensor size as HxW, e.g. 1024x2048.
    #[arg(long, value_parser = parse_dims)]
    dims: (usize, usize),
    /// Patch edge length, px (power of two).
    #[arg(long, default_value_t = 16)]
    patch: usize,
    /// Pixel pitch, µm.
    #[arg(long = "pitch-um", default_value_t = 11.43)]
    pitch_um: f64,
    /// Rays per pupil bundle.
    #[arg(long, default_value_t = 1024)]
    rays: usize,
    /// Kernel window edge length, px (odd).
    #[arg(long, default_value_t = 25)]
    kernel: usize,
    /// Output stack path (binary + JSON sidecar).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DegradeArgs {
    /// Input image (PNG or PFP float).
    #[arg(long)]
    input: PathBuf,
    /// PSF kernel stack from `psf`.
    #[arg(long)]
    psf: PathBuf,
    /// Patch edge length, px; must match the stack.
    #[arg(long, default_value_t = 16)]
    patch: usize,
    /// Sensor chain parameters; enables linearize → convolve → re-develop.
    #[arg(long)]
    isp: Option<PathBuf>,
    /// Inject sensor noise with this seed (needs --isp).
    #[arg(long = "noise-seed", requires = "isp")]
    noise_seed: Option<u64>,
    /// Output image path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PerturbArgs {
    /// Lens prescription to jitter.
    #[arg(long, conflicts_with = "isp", required_unless_present = "isp")]
    lens: Option<PathBuf>,
    /// Sensor config to jitter.
    #[arg(long)]
    isp: Option<PathBuf>,
    /// Multiplicative jitter half-range (each factor in 1 ± range), at most 0.2.
    #[arg(long)]
    range: f64,
    /// Output TOML path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DatasetArgs {
    /// Dataset description TOML.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    /// Reference image.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Image under test.
    #[arg(long)]
    test: PathBuf,
}

#[derive(Subcommand)]
enum VqCommand {
    /// Snap a feature tensor to its nearest codebook entries.
    Quantize(VqQuantizeArgs),
    /// Codebook + commitment loss of a feature tensor.
    Loss(VqLossArgs),
}

#[derive(Args)]
struct VqQuantizeArgs {
    /// Feature tensor file, shape [h, w, dim].
    #[arg(long)]
    features: PathBuf,
    /// Codebook tensor file, shape [count, dim].
    #[arg(long)]
    codebook: PathBuf,
    /// Optional output path for the quantized tensor.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VqLossArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    codebook: PathBuf,
    /// Weight of the commitment term.
    #[arg(long = "commit-weight", default_value_t = DEFAULT_COMMIT_WEIGHT)]
    commit_weight: f64,
}

fn parse_dims(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|e| format!("bad dimension {v:?}: {e}"))
    };
    Ok((parse(h)?, parse(w)?))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        // Ignore the error from a pool that is already initialized: the
        // cap is best-effort and never affects output bytes.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn log(cli: &Cli, msg: &str) {
    if cli.verbose {
        eprintln!("[aberray] {msg}");
    }
}

fn run(cli: &Cli) -> Result<String> {
    let started = Instant::now();
    let out = match &cli.command {
        Command::Psf(a) => cmd_psf(cli, a)?,
        Command::Degrade(a) => cmd_degrade(cli, a)?,
        Command::Perturb(a) => cmd_perturb(cli, a)?,
        Command::Dataset(a) => cmd_dataset(cli, a)?,
        Command::Metrics(a) => cmd_metrics(a)?,
        Command::Vq(VqCommand::Quantize(a)) => cmd_vq_quantize(a)?,
        Command::Vq(VqCommand::Loss(a)) => cmd_vq_loss(a)?,
    };
    log(cli, &format!("done in {:.3}s", started.elapsed().as_secs_f64()));
    Ok(out)
}

fn cmd_psf(cli: &Cli, a: &PsfArgs) -> Result<String> {
    let lens = LensPrescription::load_toml(&a.lens)?;
    let params = PsfBuildParams {
        patch_size_px: a.patch,
        pixel_pitch_um: a.pitch_um,
        rays_per_bundle: a.rays,
        kernel_size_px: a.kernel,
        ..PsfBuildParams::default()
    };
    log(cli, &format!("tracing {} onto {}x{}", a.lens.display(), a.dims.0, a.dims.1));
    let grid = build_psf_grid(&lens, a.dims, &params)?;
    save_psf_stack(&a.out, &grid)?;
    Ok(json!({
        "grid_h": grid.grid_h,
        "grid_w": grid.grid_w,
        "wavelengths": grid.n_wavelengths(),
        "kernels": grid.kernels.len(),
        "out_of_field": grid.out_of_field.len(),
        "out": a.out,
    })
    .to_string())
}

fn cmd_degrade(cli: &Cli, a: &DegradeArgs) -> Result<String> {
    let image = read_auto(&a.input)?;
    let grid = load_psf_stack(&a.psf)?;
    let config = DegradeConfig {
        patch_size: a.patch,
        padding: Padding::Reflect,
        apply_isp: a.isp.is_some(),
        noise_seed: a.noise_seed,
        chain_isp: a.isp.as_deref().map(IspParams::load_toml).transpose()?,
        centroid_shift: true,
    };
    log(cli, &format!("degrading {}x{}x{}", image.height, image.width, image.channels));
    let out = simulate_aberrated(&image, &grid, &config)?;
    write_auto(&a.out, &out, 16)?;
    Ok(json!({
        "height": out.height,
        "width": out.width,
        "channels": out.channels,
        "sensor_chain": a.isp.is_some(),
        "out": a.out,
    })
    .to_string())
}

fn cmd_perturb(cli: &Cli, a: &PerturbArgs) -> Result<String> {
    if !(0.0..=0.2).contains(&a.range) {
        return Err(Error::Config(format!(
            "perturbation range must lie in [0, 0.2], got {}",
            a.range
        )));
    }
    if let Some(lens_path) = &a.lens {
        let lens = LensPrescription::load_toml(lens_path)?;
        let seed = derive_seed(cli.seed, "perturb-lens", 0);
        let jittered = perturb_prescription(&lens, a.range, seed)?;
        jittered.save_toml(&a.out)?;
        Ok(json!({
            "kind": "lens",
            "range": a.range,
            "content_hash": jittered.content_hash(),
            "out": a.out,
        })
        .to_string())
    } else {
        let isp_path = a.isp.as_ref().expect("clap enforces lens xor isp");
        let params = IspParams::load_toml(isp_path)?;
        let seed = derive_seed(cli.seed, "perturb-isp", 0);
        let jittered = perturb_isp(&params, a.range, seed)?;
        jittered.save_toml(&a.out)?;
        log(cli, "wrote jittered sensor config");
        Ok(json!({
            "kind": "isp",
            "range": a.range,
            "content_hash": jittered.content_hash(),
            "out": a.out,
        })
        .to_string())
    }
}

fn cmd_dataset(cli: &Cli, a: &DatasetArgs) -> Result<String> {
    let mut config = DatasetConfig::load_toml(&a.config)?;
    if let Some(out) = &a.out {
        config.output_dir = out.clone();
    }
    log(cli, &format!("rendering dataset into {}", config.output_dir.display()));
    let records = generate_dataset(&config)?;
    let count = |tag: &str| records.iter().filter(|r| r.domain == tag).count();
    Ok(json!({
        "records": records.len(),
        "syn": count("syn"),
        "train": count("real-sim-train"),
        "test": count("real-sim-test"),
        "manifest": config.output_dir.join("manifest.jsonl"),
    })
    .to_string())
}

fn cmd_metrics(a: &MetricsArgs) -> Result<String> {
    let reference = read_auto(&a.reference)?;
    let test = read_auto(&a.test)?;
    let pair = measure_pair(&reference, &test)?;
    serde_json::to_string(&pair).map_err(|e| Error::Parse(format!("metrics JSON: {e}")))
}

fn load_vq_inputs(features: &Path, codebook: &Path) -> Result<(FeatureMap, Codebook)> {
    let (features, _) = FeatureMap::load(features)?;
    let (codebook, _) = Codebook::load(codebook)?;
    Ok((features, codebook))
}

fn cmd_vq_quantize(a: &VqQuantizeArgs) -> Result<String> {
    let (features, codebook) = load_vq_inputs(&a.features, &a.codebook)?;
    let (quantized, indices) = quantize(&features, &codebook)?;
    if let Some(out) = &a.out {
        quantized.save(out, "quantized-features")?;
    }
    Ok(json!({
        "height": features.height,
        "width": features.width,
        "dim": features.dim,
        "indices": indices,
    })
    .to_string())
}

fn cmd_vq_loss(a: &VqLossArgs) -> Result<String> {
    let (features, codebook) = load_vq_inputs(&a.features, &a.codebook)?;
    let (quantized, _) = quantize(&features, &codebook)?;
    let loss = codebook_loss(&features, &quantized, a.commit_weight)?;
    Ok(json!({
        "codebook_loss": loss,
        "commit_weight": a.commit_weight,
        "positions": features.height * features.width,
    })
    .to_string())
}
