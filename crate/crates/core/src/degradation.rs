//! Acquisition-noise simulation and axial downsampling, plus synthesis of
//! the (degraded, clean) XY slice pairs used to train the 2D restorer.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{D2rError, Result};
use crate::resample::upsample_rows_by_factor;
use crate::volume::{Plane, SliceImage, Volume};

/// Poisson-Gaussian noise parameters: observation is
/// `alpha * Poisson(x / alpha) + N(0, sigma^2)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseParams {
    pub alpha: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.sigma < 0.0 {
            return Err(D2rError::invalid("noise alpha and sigma must be >= 0"));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.alpha == 0.0 && self.sigma == 0.0
    }
}

/// Axial degradation: keep every r-th slice starting at `keep_phase`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationConfig {
    pub r: usize,
    pub keep_phase: usize,
    pub noise: NoiseParams,
    /// Whether stage-I degraded inputs also receive synthetic noise on top
    /// of downsampling (interpretation toggle, default on).
    #[serde(default = "default_true")]
    pub noise_inputs: bool,
}

fn default_true() -> bool {
    true
}

impl DegradationConfig {
    pub fn new(r: usize, keep_phase: usize, noise: NoiseParams) -> Result<Self> {
        if r < 2 {
            return Err(D2rError::invalid(format!("scale factor r must be >= 2, got {r}")));
        }
        if keep_phase >= r {
            return Err(D2rError::invalid(format!(
                "keep_phase must lie in [0, r), got {keep_phase} with r={r}"
            )));
        }
        noise.validate()?;
        Ok(DegradationConfig {
            r,
            keep_phase,
            noise,
            noise_inputs: true,
        })
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.r, self.keep_phase, self.noise).map(|_| ())
    }
}

fn noise_values<F>(values: &mut [f64], p: &NoiseParams, mut sample: F) -> Result<()>
where
    F: FnMut(f64, &mut ChaCha8Rng) -> f64,
{
    p.validate()?;
    if p.is_zero() {
        return Err(D2rError::invalid(
            "noise requested with alpha = sigma = 0; use the input unchanged instead",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    for v in values.iter_mut() {
        *v = sample(*v, &mut rng).clamp(0.0, 1.0);
    }
    Ok(())
}

fn full_pg_sample(x: f64, p: &NoiseParams, rng: &mut ChaCha8Rng) -> f64 {
    let mut y = x;
    if p.alpha > 0.0 {
        let lambda = (x / p.alpha).max(1e-12);
        let counts: f64 = Poisson::new(lambda).expect("positive lambda").sample(rng);
        y = p.alpha * counts;
    }
    if p.sigma > 0.0 {
        let z: f64 = StandardNormal.sample(rng);
        y += p.sigma * z;
    }
    y
}

fn approx_sample(x: f64, p: &NoiseParams, rng: &mut ChaCha8Rng) -> f64 {
    let var = p.alpha * x + p.sigma * p.sigma;
    let z: f64 = StandardNormal.sample(rng);
    x + var.sqrt() * z
}

/// Full Poisson-Gaussian observation model, clamped to [0, 1].
pub fn add_poisson_gaussian_noise_volume(v: &Volume, p: &NoiseParams) -> Result<Volume> {
    let mut data = v.data.clone();
    noise_values(data.as_slice_mut().unwrap(), p, |x, rng| {
        full_pg_sample(x, p, rng)
    })?;
    Volume::new(data, v.voxel_size_nm)
}

pub fn add_poisson_gaussian_noise_slice(img: &SliceImage, p: &NoiseParams) -> Result<SliceImage> {
    let mut data = img.data.clone();
    noise_values(data.as_slice_mut().unwrap(), p, |x, rng| {
        full_pg_sample(x, p, rng)
    })?;
    SliceImage::new(data, img.source_plane, img.source_index)
}

/// Full Poisson-Gaussian observation model on a bare 2D array, clamped to
/// [0, 1]. The draw is seeded by `p.seed` like the volume/slice variants.
pub fn add_poisson_gaussian_noise_image(
    img: &ndarray::Array2<f64>,
    p: &NoiseParams,
) -> Result<ndarray::Array2<f64>> {
    let mut data = img.as_standard_layout().into_owned();
    noise_values(data.as_slice_mut().unwrap(), p, |x, rng| {
        full_pg_sample(x, p, rng)
    })?;
    Ok(data)
}

/// Signal-dependent Gaussian approximation: x + N(0, alpha*x + sigma^2).
pub fn approx_gaussian_noise_volume(v: &Volume, p: &NoiseParams) -> Result<Volume> {
    let mut data = v.data.clone();
    noise_values(data.as_slice_mut().unwrap(), p, |x, rng| {
        approx_sample(x, p, rng)
    })?;
    Volume::new(data, v.voxel_size_nm)
}

pub fn approx_gaussian_noise_slice(img: &SliceImage, p: &NoiseParams) -> Result<SliceImage> {
    let mut data = img.data.clone();
    noise_values(data.as_slice_mut().unwrap(), p, |x, rng| {
        approx_sample(x, p, rng)
    })?;
    SliceImage::new(data, img.source_plane, img.source_index)
}

/// Keeps axial slices at `keep_phase + k*r`; z voxel size grows by r.
pub fn downsample_discard(v: &Volume, cfg: &DegradationConfig) -> Result<Volume> {
    cfg.validate()?;
    let [z, y, x] = v.shape();
    let kept: Vec<usize> = (cfg.keep_phase..z).step_by(cfg.r).collect();
    if kept.len() < 2 {
        return Err(D2rError::invalid(format!(
            "axial extent {z} admits only {} kept slices with r={}, phase={}",
            kept.len(),
            cfg.r,
            cfg.keep_phase
        )));
    }
    let mut data = Array3::<f64>::zeros((kept.len(), y, x));
    for (i, &k) in kept.iter().enumerate() {
        data.index_axis_mut(ndarray::Axis(0), i)
            .assign(&v.data.index_axis(ndarray::Axis(0), k));
    }
    let mut voxel = v.voxel_size_nm;
    voxel[0] *= cfg.r as f64;
    Volume::new(data, voxel)
}

/// Group-mean axial downsampling: output slice i averages slices [i*r, (i+1)*r).
pub fn downsample_mean(v: &Volume, r: usize) -> Result<Volume> {
    if r < 1 {
        return Err(D2rError::invalid("r must be >= 1"));
    }
    let [z, y, x] = v.shape();
    if z % r != 0 {
        return Err(D2rError::invalid(format!(
            "axial extent {z} not divisible by r={r}"
        )));
    }
    let zo = z / r;
    let mut data = Array3::<f64>::zeros((zo, y, x));
    for i in 0..zo {
        let mut acc = v.data.index_axis(ndarray::Axis(0), i * r).to_owned();
        for k in 1..r {
            acc += &v.data.index_axis(ndarray::Axis(0), i * r + k);
        }
        acc /= r as f64;
        data.index_axis_mut(ndarray::Axis(0), i).assign(&acc);
    }
    let mut voxel = v.voxel_size_nm;
    voxel[0] *= r as f64;
    Volume::new(data, voxel)
}

/// 2D analogue of discard downsampling along the row axis.
pub fn degrade_slice_rows(img: &SliceImage, r: usize, phase: usize) -> Result<SliceImage> {
    if r < 2 || phase >= r {
        return Err(D2rError::invalid(format!(
            "need r >= 2 and phase < r, got r={r}, phase={phase}"
        )));
    }
    let h = img.height();
    let kept: Vec<usize> = (phase..h).step_by(r).collect();
    if kept.len() < 2 {
        return Err(D2rError::invalid(format!(
            "{h} rows admit only {} kept rows with r={r}",
            kept.len()
        )));
    }
    let mut data = Array2::<f64>::zeros((kept.len(), img.width()));
    for (i, &k) in kept.iter().enumerate() {
        data.row_mut(i).assign(&img.data.row(k));
    }
    SliceImage::new(data, img.source_plane, img.source_index)
}

/// One stage-I training pair: degraded input (at target resolution) and
/// clean target, both `patch_hw` square.
pub type Stage1Pair = (SliceImage, SliceImage);

/// Synthesizes (degraded, clean) XY patch pairs.
///
/// Degradation per pair: optional signal-dependent noise, row discard by r,
/// then bicubic row re-upsampling back to the patch height, so the diffusion
/// model always operates at target resolution.
pub fn make_stage1_pairs(
    v: &Volume,
    cfg: &DegradationConfig,
    n_pairs: usize,
    patch_hw: usize,
    seed: u64,
) -> Result<Vec<Stage1Pair>> {
    cfg.validate()?;
    let [z, y, x] = v.shape();
    if patch_hw > y || patch_hw > x {
        return Err(D2rError::invalid(format!(
            "patch {patch_hw} exceeds XY extent ({y}, {x})"
        )));
    }
    if (patch_hw - 1) / cfg.r + 1 < 2 {
        return Err(D2rError::invalid("patch too small for the scale factor"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let zi = rng.gen_range(0..z);
        let oy = rng.gen_range(0..=y - patch_hw);
        let ox = rng.gen_range(0..=x - patch_hw);
        let slice = v.get_slice(Plane::XY, zi)?;
        let clean = slice
            .data
            .slice(ndarray::s![oy..oy + patch_hw, ox..ox + patch_hw])
            .to_owned();
        let clean = SliceImage::new(clean, Plane::XY, zi)?;

        let mut source = clean.clone();
        if cfg.noise_inputs && !cfg.noise.is_zero() {
            let p = NoiseParams {
                seed: seed
                    .wrapping_mul(0x9e3779b97f4a7c15)
                    .wrapping_add(i as u64),
                ..cfg.noise
            };
            source = approx_gaussian_noise_slice(&source, &p)?;
        }
        let low = degrade_slice_rows(&source, cfg.r, 0)?;
        let degraded = upsample_rows_by_factor(&low.data, cfg.r, 0, patch_hw)
            .mapv(|v| v.clamp(0.0, 1.0));
        let degraded = SliceImage::new(degraded, Plane::XY, zi)?;
        pairs.push((degraded, clean));
    }
    Ok(pairs)
}
