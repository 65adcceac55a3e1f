//! Cubic (Catmull-Rom, a = -0.5) resampling with edge clamping.
//!
//! Used everywhere the pipeline needs an "upsample" primitive: row-axis
//! bicubic re-upsampling of degraded slices, the axial interpolation
//! baseline, and the classical anchor under the 3D network's residual.

use ndarray::{Array2, Array3};

use crate::error::Result;
use crate::volume::Volume;

/// Catmull-Rom interpolation of the segment (p1, p2) at t in [0, 1].
/// Reproduces affine signals exactly; passes through p1 at t=0, p2 at t=1.
pub fn catmull_rom(p0: f64, p1: f64, p2: f64, p3: f64, t: f64) -> f64 {
    0.5 * (2.0 * p1
        + (-p0 + p2) * t
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t * t
        + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t * t * t)
}

/// Samples a 1-d signal at fractional coordinate `s` with clamped edges.
pub fn cubic_sample(samples: &[f64], s: f64) -> f64 {
    let n = samples.len() as isize;
    let i = s.floor() as isize;
    let t = s - i as f64;
    let at = |j: isize| samples[j.clamp(0, n - 1) as usize];
    catmull_rom(at(i - 1), at(i), at(i + 1), at(i + 2), t)
}

/// Upsamples image rows so that output row `i` samples source coordinate
/// `(i - phase) / r`, i.e. rows at `phase + k*r` are reproduced from sample
/// `k` and intermediate rows are cubic-interpolated.
pub fn upsample_rows_by_factor(
    img: &Array2<f64>,
    r: usize,
    phase: usize,
    target_h: usize,
) -> Array2<f64> {
    let w = img.ncols();
    let mut out = Array2::<f64>::zeros((target_h, w));
    let mut col = vec![0.0; img.nrows()];
    for c in 0..w {
        for (k, v) in col.iter_mut().enumerate() {
            *v = img[[k, c]];
        }
        for i in 0..target_h {
            let s = (i as f64 - phase as f64) / r as f64;
            out[[i, c]] = cubic_sample(&col, s);
        }
    }
    out
}

/// Cubic axial upsampling of a whole volume to depth `r*(Z-1)+1`.
///
/// Kept input slices land verbatim at indices `k*r`; this is the classical
/// interpolation baseline the learned pipeline is benchmarked against.
pub fn upsample_axial_cubic(v: &Volume, r: usize) -> Result<Volume> {
    let [z, y, x] = v.shape();
    let zh = r * (z - 1) + 1;
    let mut data = Array3::<f64>::zeros((zh, y, x));
    let mut col = vec![0.0; z];
    for yi in 0..y {
        for xi in 0..x {
            for (k, cv) in col.iter_mut().enumerate() {
                *cv = v.data[[k, yi, xi]];
            }
            for zi in 0..zh {
                if zi % r == 0 {
                    data[[zi, yi, xi]] = col[zi / r];
                } else {
                    data[[zi, yi, xi]] = cubic_sample(&col, zi as f64 / r as f64).clamp(0.0, 1.0);
                }
            }
        }
    }
    let mut voxel = v.voxel_size_nm;
    voxel[0] /= r as f64;
    Volume::new(data, voxel)
}
