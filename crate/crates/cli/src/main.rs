//! Command-line entry points for the axial super-resolution pipeline.
//!
//! Subcommands mirror the pipeline stages: `phantom` and `degrade` produce
//! inputs, `train-diffusion` / `recover` / `train-vsr` / `infer` run the
//! three stages plus final inference, and `eval` scores a prediction against
//! ground truth. All randomness comes from explicit seeds in the JSON run
//! config; reruns with identical config and inputs are byte-identical.
//!
//! Exit codes: 0 success, 2 validation error, 3 runtime failure. With
//! `--json-errors` a machine-parseable error object is printed on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use d2r_core::degradation::{
    add_poisson_gaussian_noise_volume, downsample_discard, DegradationConfig,
};
use d2r_core::dgean::{infer_axial, load_dgean_checkpoint, DGEANConfig, DGEANTrainConfig};
use d2r_core::irsde::{load_diffusion_checkpoint, DiffusionTrainConfig, UNetConfig};
use d2r_core::losses::LossWeights;
use d2r_core::metrics::{evaluate, write_fsc_csv, write_report, EvaluateOptions, FSCCurve};
use d2r_core::pipeline::{
    stage1, stage2, stage3, volume_digest, PipelineConfig, PipelineSeeds, SDEParams,
};
use d2r_core::volume::{generate_phantom, load_volume, save_volume_f64};
use d2r_core::{D2rError, Result, Volume};

// ---- run configuration ----

fn default_workers() -> usize {
    1
}

/// Training section of the run config: network sizes and optimizer budgets
/// for stage I (diffusion) and stage III (interpolation network).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    unet: UNetConfig,
    stage1_pairs: usize,
    stage1_patch: usize,
    stage1: DiffusionTrainConfig,
    stage3: DGEANTrainConfig,
    #[serde(default = "default_workers")]
    workers: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalSection {
    #[serde(default)]
    with_fsc: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PathsSection {
    /// Default workspace directory; overridden by `--workspace` and falling
    /// back to the `D2R_WORKSPACE` environment variable.
    #[serde(default)]
    workspace: Option<PathBuf>,
}

/// The full JSON run configuration. Unknown keys are rejected and every
/// random choice is driven by the explicit `seeds` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    degrade: DegradationConfig,
    sde: SDEParams,
    dgean: DGEANConfig,
    losses: LossWeights,
    train: TrainSection,
    #[serde(default)]
    eval: EvalSection,
    seeds: PipelineSeeds,
    #[serde(default)]
    paths: PathsSection,
}

impl RunConfig {
    fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| D2rError::invalid(format!("bad run config {}: {e}", path.display())))?;
        cfg.to_pipeline()?.validate()?;
        Ok(cfg)
    }

    fn to_pipeline(&self) -> Result<PipelineConfig> {
        Ok(PipelineConfig {
            r: self.degrade.r,
            sde: self.sde.clone(),
            unet: self.train.unet.clone(),
            dgean: self.dgean.clone(),
            losses: self.losses.clone(),
            degradation: self.degrade.clone(),
            stage1_pairs: self.train.stage1_pairs,
            stage1_patch: self.train.stage1_patch,
            stage1_train: self.train.stage1.clone(),
            stage3_train: self.train.stage3.clone(),
            seeds: self.seeds,
            workers: self.train.workers,
        })
    }
}

// ---- argument parsing ----

#[derive(Parser)]
#[command(name = "d2r", about = "Axial super-resolution of anisotropic 3D volumes")]
struct Cli {
    /// Emit errors as a JSON object on stderr.
    #[arg(long, global = true)]
    json_errors: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct WorkspaceArgs {
    /// Run configuration JSON.
    #[arg(long)]
    config: PathBuf,
    /// Workspace directory for checkpoints and stage artifacts
    /// (overrides config `paths.workspace` and `D2R_WORKSPACE`).
    #[arg(long)]
    workspace: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural phantom volume.
    Phantom {
        #[arg(long)]
        seed: u64,
        /// Volume shape as Z,Y,X (each >= 16).
        #[arg(long, value_delimiter = ',')]
        shape: Vec<usize>,
        /// Number of embedded structures.
        #[arg(long, default_value_t = 6)]
        structures: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Axially degrade a volume: keep every r-th slice, add noise per config.
    Degrade {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's degradation factor.
        #[arg(long)]
        factor: Option<usize>,
    },
    /// Stage I: train the 2D diffusion restorer on the input volume.
    TrainDiffusion {
        #[command(flatten)]
        ws: WorkspaceArgs,
        /// Low-resolution training volume.
        #[arg(long)]
        input: PathBuf,
    },
    /// Stage II: restore all lateral slices into the recovered volume.
    Recover {
        #[command(flatten)]
        ws: WorkspaceArgs,
        #[arg(long)]
        input: PathBuf,
        /// Worker threads for per-slice restoration (overrides config).
        #[arg(long)]
        workers: Option<usize>,
        /// Optional copy of the recovered volume outside the workspace.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage III: train the 3D interpolation network on the recovered volume.
    TrainVsr {
        #[command(flatten)]
        ws: WorkspaceArgs,
        /// Training volume; defaults to the workspace's recovered volume.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Axial inference with the trained interpolation network.
    Infer {
        #[command(flatten)]
        ws: WorkspaceArgs,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Upsampling factor; any k >= 2, independent of the training factor.
        #[arg(long)]
        factor: Option<usize>,
    },
    /// Score a prediction against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Output path of the metrics report JSON.
        #[arg(long)]
        report: PathBuf,
        /// Also compute FSC and write the curve to this CSV path.
        #[arg(long)]
        fsc: Option<PathBuf>,
        /// Render the FSC curve to a PPM image (requires --fsc).
        #[arg(long)]
        plot: Option<PathBuf>,
    },
}

// ---- helpers ----

fn resolve_workspace(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    if let Some(w) = flag {
        return Ok(w.clone());
    }
    if let Some(w) = &cfg.paths.workspace {
        return Ok(w.clone());
    }
    if let Ok(w) = std::env::var("D2R_WORKSPACE") {
        return Ok(PathBuf::from(w));
    }
    Err(D2rError::invalid(
        "no workspace: pass --workspace, set paths.workspace in the config, \
         or set D2R_WORKSPACE",
    ))
}

/// Small manifest written next to generated volumes so reruns can be checked
/// by digest.
#[derive(Serialize)]
struct FileManifest {
    command: String,
    config_hash: String,
    input_digest: Option<String>,
    output_digest: String,
}

fn write_file_manifest(m: &FileManifest, out: &Path) -> Result<()> {
    let path = out.with_extension("manifest.json");
    std::fs::write(path, serde_json::to_string_pretty(m)?)?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn load_diffusion(workspace: &Path) -> Result<d2r_core::irsde::NoisePredictor> {
    let prefix = workspace.join("stage1").join("diffusion");
    if !prefix.with_extension("bin").exists() {
        return Err(D2rError::Untrained(format!(
            "no diffusion checkpoint at {}; run `d2r train-diffusion` first",
            prefix.with_extension("bin").display()
        )));
    }
    let (predictor, _) = load_diffusion_checkpoint(&prefix)?;
    Ok(predictor)
}

fn load_dgean(workspace: &Path) -> Result<(d2r_core::dgean::DGEANModel, usize)> {
    let prefix = workspace.join("stage3").join("dgean");
    if !prefix.with_extension("bin").exists() {
        return Err(D2rError::Untrained(format!(
            "no interpolation checkpoint at {}; run `d2r train-vsr` first",
            prefix.with_extension("bin").display()
        )));
    }
    load_dgean_checkpoint(&prefix)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

/// Renders the FSC curve as a plain PPM line plot with a horizontal marker
/// at correlation 0.5 (results display only).
fn render_fsc_plot(curve: &FSCCurve, path: &Path) -> Result<()> {
    const W: usize = 400;
    const H: usize = 300;
    let mut px = vec![255u8; W * H * 3];
    let mut put = |x: usize, y: usize, rgb: [u8; 3]| {
        if x < W && y < H {
            let i = (y * W + x) * 3;
            px[i..i + 3].copy_from_slice(&rgb);
        }
    };
    let n = curve.shell_freq.len();
    if n == 0 {
        return Err(D2rError::invalid("cannot plot an empty FSC curve"));
    }
    let fmax = *curve.shell_freq.last().unwrap();
    // Map correlation in [-1, 1] to pixel rows, frequency to columns.
    let to_xy = |f: f64, c: f64| -> (usize, usize) {
        let x = (f / fmax * (W - 1) as f64).round() as usize;
        let y = ((1.0 - c) / 2.0 * (H - 1) as f64).round() as usize;
        (x, y)
    };
    for x in 0..W {
        let (_, y_half) = to_xy(0.0, 0.5);
        put(x, y_half, [180, 180, 180]);
        let (_, y_zero) = to_xy(0.0, 0.0);
        put(x, y_zero, [220, 220, 220]);
    }
    for i in 1..n {
        let (x0, y0) = to_xy(curve.shell_freq[i - 1], curve.correlation[i - 1]);
        let (x1, y1) = to_xy(curve.shell_freq[i], curve.correlation[i]);
        // Bresenham-free segment raster: step along the longer axis.
        let steps = x1.abs_diff(x0).max(y1.abs_diff(y0)).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = (x0 as f64 + t * (x1 as f64 - x0 as f64)).round() as usize;
            let y = (y0 as f64 + t * (y1 as f64 - y0 as f64)).round() as usize;
            put(x, y, [0, 0, 0]);
        }
    }
    ensure_parent(path)?;
    let mut out = format!("P6\n{W} {H}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    std::fs::write(path, out)?;
    Ok(())
}

// ---- command implementations ----

fn cmd_phantom(seed: u64, shape: &[usize], structures: usize, out: &Path) -> Result<()> {
    let shape: [usize; 3] = shape
        .try_into()
        .map_err(|_| D2rError::invalid("--shape needs exactly three values Z,Y,X"))?;
    let v = generate_phantom(seed, shape, structures)?;
    ensure_parent(out)?;
    save_volume_f64(&v, out)?;
    write_file_manifest(
        &FileManifest {
            command: "phantom".into(),
            config_hash: sha256_hex(format!("{seed}/{shape:?}/{structures}").as_bytes()),
            input_digest: None,
            output_digest: volume_digest(&v),
        },
        out,
    )?;
    println!("phantom {:?} -> {}", v.shape(), out.display());
    Ok(())
}

fn cmd_degrade(config: &Path, input: &Path, out: &Path, factor: Option<usize>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let mut deg = cfg.degrade.clone();
    if let Some(r) = factor {
        deg.r = r;
        deg.keep_phase = deg.keep_phase.min(r.saturating_sub(1));
    }
    deg.validate()?;
    let v = load_volume(input)?;
    let low = downsample_discard(&v, &deg)?;
    let low = if deg.noise.is_zero() {
        low
    } else {
        add_poisson_gaussian_noise_volume(&low, &deg.noise)?
    };
    ensure_parent(out)?;
    save_volume_f64(&low, out)?;
    write_file_manifest(
        &FileManifest {
            command: "degrade".into(),
            config_hash: sha256_hex(serde_json::to_string(&deg)?.as_bytes()),
            input_digest: Some(volume_digest(&v)),
            output_digest: volume_digest(&low),
        },
        out,
    )?;
    println!(
        "degraded {:?} -> {:?} (r={}) at {}",
        v.shape(),
        low.shape(),
        deg.r,
        out.display()
    );
    Ok(())
}

fn cmd_train_diffusion(ws: &WorkspaceArgs, input: &Path) -> Result<()> {
    let cfg = RunConfig::load(&ws.config)?;
    let workspace = resolve_workspace(&ws.workspace, &cfg)?;
    let v = load_volume(input)?;
    let pipeline = cfg.to_pipeline()?;
    stage1(&[v], &pipeline, &workspace)?;
    println!(
        "diffusion checkpoint at {}",
        workspace.join("stage1/diffusion.bin").display()
    );
    Ok(())
}

fn cmd_recover(
    ws: &WorkspaceArgs,
    input: &Path,
    workers: Option<usize>,
    out: &Option<PathBuf>,
) -> Result<()> {
    let cfg = RunConfig::load(&ws.config)?;
    let workspace = resolve_workspace(&ws.workspace, &cfg)?;
    let mut pipeline = cfg.to_pipeline()?;
    if let Some(w) = workers {
        pipeline.workers = w;
    }
    let predictor = load_diffusion(&workspace)?;
    let v_low = load_volume(input)?;
    let recovered = stage2(&predictor, &v_low, &pipeline, &workspace)?;
    if let Some(out) = out {
        ensure_parent(out)?;
        save_volume_f64(&recovered, out)?;
    }
    println!(
        "recovered {:?} at {}",
        recovered.shape(),
        workspace.join("stage2/recovered.raw").display()
    );
    Ok(())
}

fn cmd_train_vsr(ws: &WorkspaceArgs, input: &Option<PathBuf>) -> Result<()> {
    let cfg = RunConfig::load(&ws.config)?;
    let workspace = resolve_workspace(&ws.workspace, &cfg)?;
    let pipeline = cfg.to_pipeline()?;
    let train_path = match input {
        Some(p) => p.clone(),
        None => workspace.join("stage2/recovered.raw"),
    };
    if !train_path.exists() {
        return Err(D2rError::Untrained(format!(
            "no recovered volume at {}; run `d2r recover` first or pass --input",
            train_path.display()
        )));
    }
    let recovered = load_volume(&train_path)?;
    stage3(&recovered, &pipeline, &workspace)?;
    println!(
        "interpolation checkpoint at {}",
        workspace.join("stage3/dgean.bin").display()
    );
    Ok(())
}

fn cmd_infer(ws: &WorkspaceArgs, input: &Path, out: &Path, factor: Option<usize>) -> Result<()> {
    let cfg = RunConfig::load(&ws.config)?;
    let workspace = resolve_workspace(&ws.workspace, &cfg)?;
    let r = factor.unwrap_or(cfg.degrade.r);
    if r < 2 {
        return Err(D2rError::invalid("--factor must be >= 2"));
    }
    let (model, train_r) = load_dgean(&workspace)?;
    let v_low = load_volume(input)?;
    let restored = infer_axial(&model, &v_low, r)?;
    ensure_parent(out)?;
    save_volume_f64(&restored, out)?;
    write_file_manifest(
        &FileManifest {
            command: "infer".into(),
            config_hash: cfg.to_pipeline()?.hash()?,
            input_digest: Some(volume_digest(&v_low)),
            output_digest: volume_digest(&restored),
        },
        out,
    )?;
    println!(
        "restored {:?} (factor {r}, trained at {train_r}) at {}",
        restored.shape(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(
    pred: &Path,
    gt: &Path,
    report_path: &Path,
    fsc_path: &Option<PathBuf>,
    plot_path: &Option<PathBuf>,
) -> Result<()> {
    if plot_path.is_some() && fsc_path.is_none() {
        return Err(D2rError::invalid("--plot requires --fsc"));
    }
    let pred: Volume = load_volume(pred)?;
    let gt: Volume = load_volume(gt)?;
    let opts = EvaluateOptions {
        with_fsc: fsc_path.is_some(),
        masks: None,
    };
    let (report, curve) = evaluate(&pred, &gt, &opts)?;
    ensure_parent(report_path)?;
    write_report(&report, report_path)?;
    if let (Some(csv), Some(curve)) = (fsc_path, &curve) {
        ensure_parent(csv)?;
        write_fsc_csv(curve, csv)?;
        if let Some(plot) = plot_path {
            render_fsc_plot(curve, plot)?;
        }
    }
    println!(
        "psnr_xz mean {:.3} dB, ssim_xz mean {:.4}{} -> {}",
        report.psnr_xz.mean,
        report.ssim_xz.mean,
        report
            .resolution_nm
            .map(|r| format!(", resolution {r:.2} nm"))
            .unwrap_or_default(),
        report_path.display()
    );
    Ok(())
}

// ---- dispatch / error mapping ----

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Phantom {
            seed,
            shape,
            structures,
            out,
        } => cmd_phantom(*seed, shape, *structures, out),
        Command::Degrade {
            config,
            input,
            out,
            factor,
        } => cmd_degrade(config, input, out, *factor),
        Command::TrainDiffusion { ws, input } => cmd_train_diffusion(ws, input),
        Command::Recover {
            ws,
            input,
            workers,
            out,
        } => cmd_recover(ws, input, *workers, out),
        Command::TrainVsr { ws, input } => cmd_train_vsr(ws, input),
        Command::Infer {
            ws,
            input,
            out,
            factor,
        } => cmd_infer(ws, input, out, *factor),
        Command::Eval {
            pred,
            gt,
            report,
            fsc,
            plot,
        } => cmd_eval(pred, gt, report, fsc, plot),
    }
}

fn exit_code(err: &D2rError) -> u8 {
    match err {
        D2rError::Invalid(_) | D2rError::Shape(_) | D2rError::Index(_) => 2,
        D2rError::Io(_) | D2rError::Json(_) | D2rError::Untrained(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            if cli.json_errors {
                let kind = if code == 2 { "validation" } else { "runtime" };
                eprintln!(
                    "{}",
                    serde_json::json!({ "error": err.to_string(), "kind": kind })
                );
            } else {
                eprintln!("error: {err}");
            }
            ExitCode::from(code)
        }
    }
}
