//! Evaluation suite: per-plane PSNR/SSIM, Fourier Shell Correlation with
//! FSC-0.5 resolution estimation, and IoU/Dice over externally produced
//! segmentation masks.

use std::path::Path;

use ndarray::{Array3, Axis};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{D2rError, Result};
use crate::losses::ssim_index;
use crate::volume::{Plane, Volume};

// ---- per-plane slice metrics ----

fn check_same_shape(pred: &Volume, gt: &Volume) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(D2rError::shape(format!(
            "volume shapes differ: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Zero-MSE slices contribute this capped value so aggregation stays finite.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Per-slice PSNR = 10 log10(1 / MSE) along `plane`, aggregated as
/// (mean, std); identical slices are capped at [`PSNR_CAP_DB`].
pub fn psnr_plane(pred: &Volume, gt: &Volume, plane: Plane) -> Result<(f64, f64)> {
    check_same_shape(pred, gt)?;
    let extent = pred.shape()[plane.normal_axis()];
    let mut vals = Vec::with_capacity(extent);
    for i in 0..extent {
        let a = pred.get_slice(plane, i)?;
        let b = gt.get_slice(plane, i)?;
        let mse = (&a.data - &b.data).mapv(|v| v * v).mean().unwrap_or(0.0);
        let psnr = if mse > 0.0 {
            (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
        } else {
            PSNR_CAP_DB
        };
        vals.push(psnr);
    }
    Ok(mean_std(&vals))
}

/// Per-slice SSIM along `plane` (same kernel as the SSIM loss), aggregated
/// as (mean, std).
pub fn ssim_plane(pred: &Volume, gt: &Volume, plane: Plane) -> Result<(f64, f64)> {
    check_same_shape(pred, gt)?;
    let extent = pred.shape()[plane.normal_axis()];
    let mut vals = Vec::with_capacity(extent);
    for i in 0..extent {
        let a = pred.get_slice(plane, i)?;
        let b = gt.get_slice(plane, i)?;
        vals.push(ssim_index(&a.data, &b.data)?);
    }
    Ok(mean_std(&vals))
}

// ---- Fourier shell correlation ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FSCCurve {
    /// Shell center frequencies in cycles per voxel, ascending, in (0, 0.5].
    pub shell_freq: Vec<f64>,
    /// Normalized correlation per shell, in [-1, 1].
    pub correlation: Vec<f64>,
    /// Frequency samples contributing to each shell.
    pub n_samples: Vec<usize>,
    /// Isotropic sampling period the frequencies refer to.
    pub voxel_size_nm: f64,
}

/// In-place 3D FFT via 1D transforms along each axis.
fn fft3(data: &Array3<f64>) -> Array3<Complex<f64>> {
    let (nz, ny, nx) = data.dim();
    let mut c = data.mapv(|v| Complex::new(v, 0.0));
    let mut planner = FftPlanner::<f64>::new();
    for (axis, len) in [(0usize, nz), (1, ny), (2, nx)] {
        let fft = planner.plan_fft_forward(len);
        let mut line = vec![Complex::new(0.0, 0.0); len];
        for mut lane in c.lanes_mut(Axis(axis)) {
            for (i, v) in lane.iter().enumerate() {
                line[i] = *v;
            }
            fft.process(&mut line);
            for (i, v) in lane.iter_mut().enumerate() {
                *v = line[i];
            }
        }
    }
    c
}

/// Signed frequency index for DFT bin k of n samples.
fn signed_freq(k: usize, n: usize) -> isize {
    let k = k as isize;
    let n = n as isize;
    if k > n / 2 {
        k - n
    } else {
        k
    }
}

/// Fourier Shell Correlation over integer-radius shells (width one frequency
/// sample, DC excluded):
/// `corr_i = Re(sum F_gt conj(F_pred)) / sqrt(sum |F_gt|^2 sum |F_pred|^2)`.
/// Zero-energy shells get correlation 0. Inputs must be cubic; non-cubic
/// volumes are center-cropped upstream (see [`evaluate`]).
pub fn fsc(v_gt: &Volume, v_pred: &Volume) -> Result<FSCCurve> {
    check_same_shape(v_pred, v_gt)?;
    let [nz, ny, nx] = v_gt.shape();
    if nz != ny || ny != nx {
        return Err(D2rError::shape(format!(
            "FSC needs a cubic volume, got ({nz}, {ny}, {nx})"
        )));
    }
    let n = nz;
    if n < 4 {
        return Err(D2rError::invalid("FSC needs an extent of at least 4 voxels"));
    }
    let fg = fft3(&v_gt.data);
    let fp = fft3(&v_pred.data);

    let n_shells = n / 2;
    let mut num = vec![0.0f64; n_shells + 1];
    let mut den_g = vec![0.0f64; n_shells + 1];
    let mut den_p = vec![0.0f64; n_shells + 1];
    let mut counts = vec![0usize; n_shells + 1];
    for kz in 0..n {
        let fz = signed_freq(kz, n) as f64;
        for ky in 0..n {
            let fy = signed_freq(ky, n) as f64;
            for kx in 0..n {
                let fx = signed_freq(kx, n) as f64;
                let shell = (fz * fz + fy * fy + fx * fx).sqrt().round() as usize;
                if shell == 0 || shell > n_shells {
                    continue;
                }
                let a = fg[[kz, ky, kx]];
                let b = fp[[kz, ky, kx]];
                num[shell] += (a * b.conj()).re;
                den_g[shell] += a.norm_sqr();
                den_p[shell] += b.norm_sqr();
                counts[shell] += 1;
            }
        }
    }

    let mut shell_freq = Vec::with_capacity(n_shells);
    let mut correlation = Vec::with_capacity(n_shells);
    let mut n_samples = Vec::with_capacity(n_shells);
    for i in 1..=n_shells {
        shell_freq.push(i as f64 / n as f64);
        let d = den_g[i] * den_p[i];
        let c = if d > 0.0 {
            (num[i] / d.sqrt()).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        correlation.push(c);
        n_samples.push(counts[i]);
    }

    // The frequency axis is in cycles per voxel; an anisotropic voxel has no
    // single period, so the mean sampling period is used for nm conversion.
    let voxel = v_gt.voxel_size_nm.iter().sum::<f64>() / 3.0;
    Ok(FSCCurve {
        shell_freq,
        correlation,
        n_samples,
        voxel_size_nm: voxel,
    })
}

/// FSC-0.5 resolution: period of the first 0.5-crossing, found by linear
/// interpolation between shells (with an implicit (q=0, corr=1) anchor
/// before the first shell). A curve that never drops below 0.5 resolves to
/// the Nyquist floor `2 * voxel_size_nm`.
pub fn resolution_at_half(curve: &FSCCurve) -> Result<f64> {
    if curve.shell_freq.len() != curve.correlation.len() || curve.shell_freq.is_empty() {
        return Err(D2rError::invalid("FSC curve is empty or inconsistent"));
    }
    let mut prev_q = 0.0;
    let mut prev_c = 1.0;
    for (&q, &c) in curve.shell_freq.iter().zip(curve.correlation.iter()) {
        if c < 0.5 {
            let t = (prev_c - 0.5) / (prev_c - c);
            let q_cross = prev_q + t * (q - prev_q);
            return Ok(curve.voxel_size_nm / q_cross);
        }
        prev_q = q;
        prev_c = c;
    }
    Ok(2.0 * curve.voxel_size_nm)
}

// ---- segmentation overlap ----

fn check_mask_shapes(a: &Array3<bool>, b: &Array3<bool>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(D2rError::shape("mask shapes differ"));
    }
    Ok(())
}

/// Intersection over union; the empty-union case is defined as 1.0.
pub fn iou(mask_gt: &Array3<bool>, mask_pred: &Array3<bool>) -> Result<f64> {
    check_mask_shapes(mask_gt, mask_pred)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (a, b) in mask_gt.iter().zip(mask_pred.iter()) {
        inter += (*a && *b) as usize;
        union += (*a || *b) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Dice coefficient 2|∩|/(|gt|+|pred|); both-empty is defined as 1.0.
pub fn dice(mask_gt: &Array3<bool>, mask_pred: &Array3<bool>) -> Result<f64> {
    check_mask_shapes(mask_gt, mask_pred)?;
    let mut inter = 0usize;
    let mut total = 0usize;
    for (a, b) in mask_gt.iter().zip(mask_pred.iter()) {
        inter += (*a && *b) as usize;
        total += *a as usize + *b as usize;
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

// ---- aggregated report ----

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub psnr_xy: Stat,
    pub psnr_xz: Stat,
    pub psnr_yz: Stat,
    pub ssim_xy: Stat,
    pub ssim_xz: Stat,
    pub ssim_yz: Stat,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub resolution_nm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dice: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct EvaluateOptions {
    /// Compute the FSC curve and the FSC-0.5 resolution.
    pub with_fsc: bool,
    /// Externally produced segmentation masks (gt, pred) for IoU/Dice.
    pub masks: Option<(Array3<bool>, Array3<bool>)>,
}

/// Center-crops a volume to the largest cube (FSC preprocessing).
fn center_cube(v: &Volume) -> Result<Volume> {
    let [z, y, x] = v.shape();
    let n = z.min(y).min(x);
    if z == n && y == n && x == n {
        return Ok(v.clone());
    }
    let (oz, oy, ox) = ((z - n) / 2, (y - n) / 2, (x - n) / 2);
    Volume::new(
        v.data
            .slice(ndarray::s![oz..oz + n, oy..oy + n, ox..ox + n])
            .to_owned(),
        v.voxel_size_nm,
    )
}

/// Full evaluation of a prediction against ground truth. When the prediction
/// is axially shorter (the r(Z_L-1)+1 convention drops the trailing
/// extrapolation range), the ground truth is cropped to match before
/// comparison. Returns the report plus the FSC curve when requested.
pub fn evaluate(
    pred: &Volume,
    gt: &Volume,
    opts: &EvaluateOptions,
) -> Result<(MetricsReport, Option<FSCCurve>)> {
    let [pz, py, px] = pred.shape();
    let [gz, gy, gx] = gt.shape();
    if (py, px) != (gy, gx) || pz > gz {
        return Err(D2rError::shape(format!(
            "prediction shape ({pz}, {py}, {px}) incompatible with ground truth ({gz}, {gy}, {gx})"
        )));
    }
    let gt = if gz > pz {
        Volume::new(
            gt.data.slice(ndarray::s![0..pz, .., ..]).to_owned(),
            gt.voxel_size_nm,
        )?
    } else {
        gt.clone()
    };

    let (stat, sstat) = (
        |p: (f64, f64)| Stat {
            mean: p.0,
            std: p.1,
        },
        |p: (f64, f64)| Stat {
            mean: p.0,
            std: p.1,
        },
    );
    let mut report = MetricsReport {
        psnr_xy: stat(psnr_plane(pred, &gt, Plane::XY)?),
        psnr_xz: stat(psnr_plane(pred, &gt, Plane::XZ)?),
        psnr_yz: stat(psnr_plane(pred, &gt, Plane::YZ)?),
        ssim_xy: sstat(ssim_plane(pred, &gt, Plane::XY)?),
        ssim_xz: sstat(ssim_plane(pred, &gt, Plane::XZ)?),
        ssim_yz: sstat(ssim_plane(pred, &gt, Plane::YZ)?),
        resolution_nm: None,
        iou: None,
        dice: None,
    };

    let curve = if opts.with_fsc {
        let c = fsc(&center_cube(&gt)?, &center_cube(pred)?)?;
        report.resolution_nm = Some(resolution_at_half(&c)?);
        Some(c)
    } else {
        None
    };

    if let Some((mg, mp)) = &opts.masks {
        report.iou = Some(iou(mg, mp)?);
        report.dice = Some(dice(mg, mp)?);
    }
    Ok((report, curve))
}

/// Writes the report as pretty JSON.
pub fn write_report(report: &MetricsReport, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

/// Writes the FSC curve as CSV with per-shell resolution in nm.
pub fn write_fsc_csv(curve: &FSCCurve, path: &Path) -> Result<()> {
    let mut out = String::from("shell_freq,correlation,resolution_nm_at_this_freq\n");
    for (&q, &c) in curve.shell_freq.iter().zip(curve.correlation.iter()) {
        out.push_str(&format!("{q},{c},{}\n", curve.voxel_size_nm / q));
    }
    std::fs::write(path, out)?;
    Ok(())
}
