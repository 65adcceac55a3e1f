//! Orchestration of the three D2R stages.
//!
//! Stage I trains the 2D diffusion restorer on pairs synthesized from the
//! lateral (XY) slices of the anisotropic input. Stage II restores every XZ
//! and YZ slice and averages the two recovered stacks into the training
//! volume. Stage III trains the 3D interpolation network on that volume in
//! lateral directions; axial inference then produces the final output.
//!
//! Each stage persists its artifacts plus a JSON manifest (config hash,
//! seeds, input/output digests) under its own workspace subdirectory;
//! reruns with an unchanged config and input reuse the stored artifacts.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degradation::{make_stage1_pairs, DegradationConfig};
use crate::dgean::{
    build_model, infer_axial, load_dgean_checkpoint, save_dgean_checkpoint,
    train_dgean_sources, DGEANConfig, DGEANModel, DGEANTrainConfig,
};
use crate::error::{D2rError, Result};
use crate::irsde::{
    load_diffusion_checkpoint, restore_slice, save_diffusion_checkpoint, train_diffusion,
    DiffusionTrainConfig, NoisePredictor, SDESchedule, UNetConfig,
};
use crate::losses::LossWeights;
use crate::volume::{load_volume, save_volume_f64, Plane, SliceImage, Volume};

// ---- configuration ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SDEParams {
    pub t_steps: usize,
    pub delta: f64,
}

impl SDEParams {
    pub fn schedule(&self) -> Result<SDESchedule> {
        SDESchedule::cosine(self.t_steps, self.delta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSeeds {
    pub stage1: u64,
    pub stage2: u64,
    pub stage3: u64,
    pub infer: u64,
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Axial upsampling factor; must match the degradation that produced the
    /// low-resolution input.
    pub r: usize,
    pub sde: SDEParams,
    pub unet: UNetConfig,
    pub dgean: DGEANConfig,
    pub losses: LossWeights,
    /// Degradation model used to synthesize Stage-I training pairs.
    pub degradation: DegradationConfig,
    pub stage1_pairs: usize,
    pub stage1_patch: usize,
    pub stage1_train: DiffusionTrainConfig,
    pub stage3_train: DGEANTrainConfig,
    pub seeds: PipelineSeeds,
    /// Worker threads for the embarrassingly parallel Stage-II restorations.
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r < 2 {
            return Err(D2rError::invalid("pipeline factor r must be >= 2"));
        }
        self.sde.schedule()?;
        self.unet.validate()?;
        self.dgean.validate()?;
        self.losses.validate()?;
        self.degradation.validate()?;
        if self.degradation.r != self.r {
            return Err(D2rError::invalid(format!(
                "degradation factor {} must match pipeline r {}",
                self.degradation.r, self.r
            )));
        }
        if self.stage1_pairs == 0 {
            return Err(D2rError::invalid("stage1_pairs must be positive"));
        }
        let m = self.unet.spatial_multiple();
        if self.stage1_patch == 0 || self.stage1_patch % m != 0 {
            return Err(D2rError::invalid(format!(
                "stage1_patch must be a positive multiple of {m}"
            )));
        }
        if self.workers == 0 {
            return Err(D2rError::invalid("workers must be >= 1"));
        }
        Ok(())
    }

    /// Content hash of the configuration, used for stage-skip decisions.
    pub fn hash(&self) -> Result<String> {
        Ok(hex_digest(serde_json::to_string(self)?.as_bytes()))
    }
}

// ---- manifests / digests ----

fn hex_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of a volume's shape, voxel size, and raw f64 intensities.
pub fn volume_digest(v: &Volume) -> String {
    let mut h = Sha256::new();
    for d in v.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for s in v.voxel_size_nm {
        h.update(s.to_le_bytes());
    }
    for x in v.data.iter() {
        h.update(x.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    pub seeds: PipelineSeeds,
    pub input_digest: String,
    pub output_digest: String,
}

fn write_manifest(m: &StageManifest, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(m)?)?;
    Ok(())
}

fn read_manifest(path: &Path) -> Option<StageManifest> {
    let text = std::fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

/// A stage is reusable when its manifest matches the current config hash,
/// stage name, and input digest.
fn stage_reusable(dir: &Path, stage: &str, config_hash: &str, input_digest: &str) -> bool {
    read_manifest(&dir.join("manifest.json")).is_some_and(|m| {
        m.stage == stage && m.config_hash == config_hash && m.input_digest == input_digest
    })
}

fn stage_dir(workspace: &Path, stage: &str) -> Result<PathBuf> {
    let dir = workspace.join(stage);
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

// ---- stage I ----

/// Trains the diffusion restorer on pairs synthesized from the XY slices of
/// the training volumes. Persists `diffusion.{bin,json}` plus a manifest
/// under `<workspace>/stage1/`; reuses them when config and inputs match.
pub fn stage1(
    train_volumes: &[Volume],
    config: &PipelineConfig,
    workspace: &Path,
) -> Result<NoisePredictor> {
    config.validate()?;
    if train_volumes.is_empty() {
        return Err(D2rError::invalid("stage1 needs at least one training volume"));
    }
    let dir = stage_dir(workspace, "stage1")?;
    let config_hash = config.hash()?;
    let input_digest = hex_digest(
        train_volumes
            .iter()
            .map(volume_digest)
            .collect::<String>()
            .as_bytes(),
    );
    let ckpt = dir.join("diffusion");
    if stage_reusable(&dir, "stage1", &config_hash, &input_digest) {
        if let Ok((predictor, _)) = load_diffusion_checkpoint(&ckpt) {
            return Ok(predictor);
        }
    }

    let sched = config.sde.schedule()?;
    let per_volume = config.stage1_pairs.div_ceil(train_volumes.len());
    let mut pairs = Vec::with_capacity(config.stage1_pairs);
    for (i, v) in train_volumes.iter().enumerate() {
        let n = per_volume.min(config.stage1_pairs - pairs.len());
        if n == 0 {
            break;
        }
        pairs.extend(make_stage1_pairs(
            v,
            &config.degradation,
            n,
            config.stage1_patch,
            config.seeds.stage1.wrapping_add(i as u64),
        )?);
    }
    let mut predictor = train_diffusion(
        &pairs,
        &sched,
        &config.unet,
        &config.stage1_train,
        config.seeds.stage1,
    )?;

    save_diffusion_checkpoint(&mut predictor, &sched, config.seeds.stage1, &ckpt)?;
    write_manifest(
        &StageManifest {
            stage: "stage1".into(),
            config_hash,
            seeds: config.seeds,
            input_digest,
            output_digest: hex_digest(&std::fs::read(ckpt.with_extension("bin"))?),
        },
        &dir.join("manifest.json"),
    )?;
    Ok(predictor)
}

// ---- stage II ----

/// Deterministic per-slice restoration seed: base + plane_id * 10^6 + index,
/// with plane_id the index of the plane's normal axis in (Z, Y, X) order.
pub fn stage2_slice_seed(base: u64, plane: Plane, index: usize) -> u64 {
    base.wrapping_add(plane.normal_axis() as u64 * 1_000_000)
        .wrapping_add(index as u64)
}

/// Restores every slice of `v_low` in `plane`, optionally across worker
/// threads. Output order matches slice index regardless of scheduling.
fn restore_stack(
    predictor: &NoisePredictor,
    v_low: &Volume,
    plane: Plane,
    sched: &SDESchedule,
    r: usize,
    base_seed: u64,
    workers: usize,
) -> Result<Vec<SliceImage>> {
    let extent = v_low.shape()[plane.normal_axis()];
    let indices: Vec<usize> = (0..extent).collect();
    if workers <= 1 {
        return indices
            .iter()
            .map(|&i| {
                let deg = v_low.get_slice(plane, i)?;
                restore_slice(predictor, &deg, sched, r, stage2_slice_seed(base_seed, plane, i))
            })
            .collect();
    }
    let chunk = extent.div_ceil(workers);
    let mut results: Vec<Option<SliceImage>> = (0..extent).map(|_| None).collect();
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for ids in indices.chunks(chunk) {
            handles.push(scope.spawn(move || -> Result<Vec<(usize, SliceImage)>> {
                ids.iter()
                    .map(|&i| {
                        let deg = v_low.get_slice(plane, i)?;
                        let s = restore_slice(
                            predictor,
                            &deg,
                            sched,
                            r,
                            stage2_slice_seed(base_seed, plane, i),
                        )?;
                        Ok((i, s))
                    })
                    .collect()
            }));
        }
        for h in handles {
            for (i, s) in h.join().expect("stage2 worker panicked")? {
                results[i] = Some(s);
            }
        }
        Ok(())
    })?;
    Ok(results.into_iter().map(|s| s.expect("slice restored")).collect())
}

/// Restores every XZ slice (indexed over Y) and every YZ slice (indexed over
/// X), assembles the two stacks, and averages them into the recovered
/// training volume of shape (r (Z_L - 1) + 1, Y, X). Persists the volume and
/// manifest under `<workspace>/stage2/`.
pub fn stage2(
    predictor: &NoisePredictor,
    v_low: &Volume,
    config: &PipelineConfig,
    workspace: &Path,
) -> Result<Volume> {
    config.validate()?;
    let dir = stage_dir(workspace, "stage2")?;
    let config_hash = config.hash()?;
    let input_digest = volume_digest(v_low);
    let out_path = dir.join("recovered.raw");
    if stage_reusable(&dir, "stage2", &config_hash, &input_digest)
        && dir.join("stack_xz.raw").is_file()
        && dir.join("stack_yz.raw").is_file()
    {
        if let Ok(v) = load_volume(&out_path) {
            return Ok(v);
        }
    }

    let sched = config.sde.schedule()?;
    let r = config.r;
    let base = config.seeds.stage2;
    let xz = restore_stack(predictor, v_low, Plane::XZ, &sched, r, base, config.workers)?;
    let yz = restore_stack(predictor, v_low, Plane::YZ, &sched, r, base, config.workers)?;

    let mut voxel = v_low.voxel_size_nm;
    voxel[0] /= r as f64;
    let v_xz = Volume::concat_slices(Plane::XZ, &xz, voxel)?;
    let v_yz = Volume::concat_slices(Plane::YZ, &yz, voxel)?;
    if v_xz.shape() != v_yz.shape() {
        return Err(D2rError::shape(format!(
            "recovered stacks disagree: XZ {:?} vs YZ {:?}",
            v_xz.shape(),
            v_yz.shape()
        )));
    }
    let avg: Array3<f64> = (&v_xz.data + &v_yz.data).mapv(|v| (0.5 * v).clamp(0.0, 1.0));
    let recovered = Volume::new(avg, voxel)?;

    // The individual stacks are kept alongside the average: stage III samples
    // each lateral window axis from the stack whose slices were restored
    // independently along that axis, so the restoration error is uncorrelated
    // across a window's positions (the average mixes in-plane error from the
    // other stack, which is coherent along the window axis).
    save_volume_f64(&v_xz, &dir.join("stack_xz.raw"))?;
    save_volume_f64(&v_yz, &dir.join("stack_yz.raw"))?;
    save_volume_f64(&recovered, &out_path)?;
    write_manifest(
        &StageManifest {
            stage: "stage2".into(),
            config_hash,
            seeds: config.seeds,
            input_digest,
            output_digest: volume_digest(&recovered),
        },
        &dir.join("manifest.json"),
    )?;
    Ok(recovered)
}

// ---- stage III ----

fn train_stage3_like(
    sources: &[(Plane, &Volume)],
    config: &PipelineConfig,
    workspace: &Path,
    stage: &str,
    seed: u64,
) -> Result<DGEANModel> {
    config.validate()?;
    let dir = stage_dir(workspace, stage)?;
    let config_hash = config.hash()?;
    let input_digest = hex_digest(
        sources
            .iter()
            .map(|(p, v)| format!("{p}:{}", volume_digest(v)))
            .collect::<Vec<_>>()
            .join(",")
            .as_bytes(),
    );
    let ckpt = dir.join("dgean");
    if stage_reusable(&dir, stage, &config_hash, &input_digest) {
        if let Ok((model, _)) = load_dgean_checkpoint(&ckpt) {
            return Ok(model);
        }
    }

    let model = build_model(&config.dgean, seed)?;
    let mut model = train_dgean_sources(
        model,
        sources,
        config.r,
        &config.losses,
        &config.stage3_train,
        seed,
    )?;

    save_dgean_checkpoint(&mut model, seed, config.r, &config.losses, &ckpt)?;
    write_manifest(
        &StageManifest {
            stage: stage.into(),
            config_hash,
            seeds: config.seeds,
            input_digest,
            output_digest: hex_digest(&std::fs::read(ckpt.with_extension("bin"))?),
        },
        &dir.join("manifest.json"),
    )?;
    Ok(model)
}

/// Trains the interpolation network on the recovered volume along the
/// lateral (X and Y) axes only. Persists `dgean.{bin,json}` plus a manifest
/// under `<workspace>/stage3/`.
///
/// When the workspace's stage-II stacks belong to `recovered` (their average
/// reproduces it exactly), each window axis is sampled from its own stack:
/// X-axis windows from the YZ-restored stack and Y-axis windows from the
/// XZ-restored stack. A window then consists of independently restored
/// slices, so its per-slice restoration errors are uncorrelated and the
/// lateral self-supervision stays unbiased. Otherwise (e.g. an externally
/// supplied training volume) both axes are sampled from `recovered` itself.
pub fn stage3(
    recovered: &Volume,
    config: &PipelineConfig,
    workspace: &Path,
) -> Result<DGEANModel> {
    let seed = config.seeds.stage3;
    if let Some((xz, yz)) = load_matching_stacks(workspace, recovered) {
        return train_stage3_like(
            &[(Plane::YZ, &yz), (Plane::XZ, &xz)],
            config,
            workspace,
            "stage3",
            seed,
        );
    }
    train_stage3_like(
        &[(Plane::YZ, recovered), (Plane::XZ, recovered)],
        config,
        workspace,
        "stage3",
        seed,
    )
}

/// Loads `stage2/stack_{xz,yz}.raw` if present and checks that their clamped
/// average is byte-identical to `recovered`; returns None otherwise.
fn load_matching_stacks(workspace: &Path, recovered: &Volume) -> Option<(Volume, Volume)> {
    let dir = workspace.join("stage2");
    let xz = load_volume(&dir.join("stack_xz.raw")).ok()?;
    let yz = load_volume(&dir.join("stack_yz.raw")).ok()?;
    if xz.shape() != recovered.shape() || yz.shape() != recovered.shape() {
        return None;
    }
    let avg: Array3<f64> = (&xz.data + &yz.data).mapv(|v| (0.5 * v).clamp(0.0, 1.0));
    if avg
        .iter()
        .zip(recovered.data.iter())
        .all(|(a, b)| a.to_bits() == b.to_bits())
    {
        Some((xz, yz))
    } else {
        None
    }
}

// ---- end-to-end runs ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub mode: String,
    pub config_hash: String,
    pub seeds: PipelineSeeds,
    pub input_digest: String,
    pub output_digest: String,
    pub stage_manifests: Vec<String>,
}

fn finish_run(
    mode: &str,
    config: &PipelineConfig,
    workspace: &Path,
    input_digest: String,
    output: &Volume,
    stages: &[&str],
) -> Result<()> {
    let dir = stage_dir(workspace, "output")?;
    save_volume_f64(output, &dir.join("output.raw"))?;
    let manifest = RunManifest {
        mode: mode.into(),
        config_hash: config.hash()?,
        seeds: config.seeds,
        input_digest,
        output_digest: volume_digest(output),
        stage_manifests: stages
            .iter()
            .map(|s| format!("{s}/manifest.json"))
            .collect(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// The full D2R pipeline: stage I -> stage II -> stage III -> axial
/// inference. A deterministic function of (input, config, seeds); stages
/// with matching manifests are reused on reruns.
pub fn run_d2r(v_low: &Volume, config: &PipelineConfig, workspace: &Path) -> Result<Volume> {
    config.validate()?;
    let predictor = stage1(std::slice::from_ref(v_low), config, workspace)?;
    let recovered = stage2(&predictor, v_low, config, workspace)?;
    let model = stage3(&recovered, config, workspace)?;
    let out = infer_axial(&model, v_low, config.r)?;
    finish_run(
        "d2r",
        config,
        workspace,
        volume_digest(v_low),
        &out,
        &["stage1", "stage2", "stage3"],
    )?;
    Ok(out)
}

/// Oracle-supervision comparator: skips stages I-II and trains the
/// interpolation network directly on the high-resolution volume with
/// axial-gap (Z-axis) sampling, then restores `v_low` axially.
pub fn run_supervised(
    v_low: &Volume,
    v_high: &Volume,
    config: &PipelineConfig,
    workspace: &Path,
) -> Result<Volume> {
    config.validate()?;
    let model = train_stage3_like(
        &[(Plane::XY, v_high)],
        config,
        workspace,
        "supervised",
        config.seeds.stage3,
    )?;
    let out = infer_axial(&model, v_low, config.r)?;
    finish_run(
        "supervised",
        config,
        workspace,
        hex_digest(format!("{}{}", volume_digest(v_low), volume_digest(v_high)).as_bytes()),
        &out,
        &["supervised"],
    )?;
    Ok(out)
}
