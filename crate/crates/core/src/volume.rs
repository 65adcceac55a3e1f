//! Volume representation, tri-plane slicing/assembly, raw file I/O and
//! procedural phantom generation.
//!
//! Volumes are stored C-order `(Z, Y, X)` with Z slowest, so XY slices are
//! contiguous. Intensities are normalized to `[0, 1]` at load time.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{D2rError, Result};

/// One of the three orthogonal slicing planes.
///
/// XY indexes along Z, XZ along Y, YZ along X. Lateral slices (XZ, YZ)
/// always carry the degraded axis (Z) as the row axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Plane {
    XY,
    XZ,
    YZ,
}

impl Plane {
    /// Index of the axis normal to this plane in (Z, Y, X) order.
    pub fn normal_axis(self) -> usize {
        match self {
            Plane::XY => 0,
            Plane::XZ => 1,
            Plane::YZ => 2,
        }
    }

    pub fn all() -> [Plane; 3] {
        [Plane::XY, Plane::XZ, Plane::YZ]
    }
}

impl std::fmt::Display for Plane {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Plane::XY => write!(f, "XY"),
            Plane::XZ => write!(f, "XZ"),
            Plane::YZ => write!(f, "YZ"),
        }
    }
}

/// A single 2D slice extracted from a volume.
#[derive(Debug, Clone)]
pub struct SliceImage {
    /// Row-major intensity data in `[0, 1]`.
    pub data: Array2<f64>,
    pub source_plane: Plane,
    pub source_index: usize,
}

impl SliceImage {
    pub fn new(data: Array2<f64>, source_plane: Plane, source_index: usize) -> Result<Self> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(D2rError::invalid("slice contains non-finite intensities"));
        }
        Ok(SliceImage {
            data,
            source_plane,
            source_index,
        })
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }
}

/// A 3D intensity grid with per-axis voxel size.
///
/// Immutable after construction; shared freely across readers.
#[derive(Debug, Clone)]
pub struct Volume {
    /// Intensities in `[0, 1]`, C-order `(Z, Y, X)`.
    pub data: Array3<f64>,
    /// Physical voxel size in nanometres, `(z, y, x)` order.
    pub voxel_size_nm: [f64; 3],
}

/// JSON sidecar describing a raw volume file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeSidecar {
    pub shape: [usize; 3],
    pub voxel_size_nm: [f64; 3],
    pub dtype: String,
}

impl Volume {
    pub fn new(data: Array3<f64>, voxel_size_nm: [f64; 3]) -> Result<Self> {
        if data.is_empty() {
            return Err(D2rError::invalid("volume must be non-empty"));
        }
        if !voxel_size_nm.iter().all(|v| *v > 0.0 && v.is_finite()) {
            return Err(D2rError::invalid(format!(
                "voxel sizes must be strictly positive, got {voxel_size_nm:?}"
            )));
        }
        if !data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(D2rError::invalid(
                "volume intensities must be finite and within [0, 1]",
            ));
        }
        Ok(Volume {
            data,
            voxel_size_nm,
        })
    }

    /// Shape in `(Z, Y, X)` order.
    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    /// Extracts one slice. XZ slices are (Z rows, X cols), YZ slices are
    /// (Z rows, Y cols), so the degraded axis is always the row axis.
    pub fn get_slice(&self, plane: Plane, index: usize) -> Result<SliceImage> {
        let extent = self.shape()[plane.normal_axis()];
        if index >= extent {
            return Err(D2rError::index(format!(
                "slice index {index} out of range for plane {plane} (extent {extent})"
            )));
        }
        let data = match plane {
            Plane::XY => self.data.index_axis(Axis(0), index).to_owned(),
            Plane::XZ => self.data.index_axis(Axis(1), index).to_owned(),
            Plane::YZ => self.data.index_axis(Axis(2), index).to_owned(),
        };
        SliceImage::new(data, plane, index)
    }

    /// Assembles a volume from an ordered stack of same-plane slices.
    ///
    /// Inverse of [`Volume::get_slice`]: slice `i` of the result equals the
    /// `i`-th input slice.
    pub fn concat_slices(
        plane: Plane,
        slices: &[SliceImage],
        voxel_size_nm: [f64; 3],
    ) -> Result<Volume> {
        if slices.is_empty() {
            return Err(D2rError::invalid("cannot assemble a volume from zero slices"));
        }
        let (h, w) = (slices[0].height(), slices[0].width());
        for (i, s) in slices.iter().enumerate() {
            if s.height() != h || s.width() != w {
                return Err(D2rError::shape(format!(
                    "slice {i} is {}x{}, expected {h}x{w}",
                    s.height(),
                    s.width()
                )));
            }
        }
        let n = slices.len();
        let shape = match plane {
            Plane::XY => [n, h, w], // rows=Y, cols=X
            Plane::XZ => [h, n, w], // rows=Z, cols=X
            Plane::YZ => [h, w, n], // rows=Z, cols=Y
        };
        let mut data = Array3::<f64>::zeros(shape);
        for (i, s) in slices.iter().enumerate() {
            match plane {
                Plane::XY => data.index_axis_mut(Axis(0), i).assign(&s.data),
                Plane::XZ => data.index_axis_mut(Axis(1), i).assign(&s.data),
                Plane::YZ => data.index_axis_mut(Axis(2), i).assign(&s.data),
            }
        }
        Volume::new(data, voxel_size_nm)
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Loads a raw little-endian volume (f32 or u8) with its JSON sidecar.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let sidecar: VolumeSidecar = serde_json::from_str(
        &fs::read_to_string(sidecar_path(path)).map_err(|e| {
            D2rError::invalid(format!(
                "missing or unreadable sidecar {}: {e}",
                sidecar_path(path).display()
            ))
        })?,
    )
    .map_err(|e| D2rError::invalid(format!("corrupt sidecar: {e}")))?;

    let [z, y, x] = sidecar.shape;
    let n = z
        .checked_mul(y)
        .and_then(|v| v.checked_mul(x))
        .ok_or_else(|| D2rError::invalid("sidecar shape overflows"))?;
    if n == 0 {
        return Err(D2rError::invalid("sidecar shape has a zero extent"));
    }

    let mut file = fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;

    let values: Vec<f64> = match sidecar.dtype.as_str() {
        "f32" => {
            if bytes.len() != n * 4 {
                return Err(D2rError::shape(format!(
                    "file holds {} bytes but sidecar shape {:?} (f32) needs {}",
                    bytes.len(),
                    sidecar.shape,
                    n * 4
                )));
            }
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect()
        }
        "f64" => {
            if bytes.len() != n * 8 {
                return Err(D2rError::shape(format!(
                    "file holds {} bytes but sidecar shape {:?} (f64) needs {}",
                    bytes.len(),
                    sidecar.shape,
                    n * 8
                )));
            }
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        }
        "u8" => {
            if bytes.len() != n {
                return Err(D2rError::shape(format!(
                    "file holds {} bytes but sidecar shape {:?} (u8) needs {}",
                    bytes.len(),
                    sidecar.shape,
                    n
                )));
            }
            bytes.iter().map(|b| *b as f64 / 255.0).collect()
        }
        other => return Err(D2rError::invalid(format!("unsupported dtype {other:?}"))),
    };

    let data = Array3::from_shape_vec((z, y, x), values)
        .map_err(|e| D2rError::shape(e.to_string()))?;
    Volume::new(data, sidecar.voxel_size_nm)
}

/// Writes a volume as raw little-endian f32 plus its JSON sidecar.
///
/// `load_volume(save_volume(v))` reproduces `v` bit-exactly for volumes
/// whose intensities are representable in f32.
pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    let sidecar = VolumeSidecar {
        shape: v.shape(),
        voxel_size_nm: v.voxel_size_nm,
        dtype: "f32".to_string(),
    };
    let mut bytes = Vec::with_capacity(v.data.len() * 4);
    for val in v.data.iter() {
        bytes.extend_from_slice(&(*val as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

/// Lossless variant of [`save_volume`]: raw little-endian f64. Used for
/// intermediate pipeline artifacts where bit-exact reruns matter.
pub fn save_volume_f64(v: &Volume, path: &Path) -> Result<()> {
    let sidecar = VolumeSidecar {
        shape: v.shape(),
        voxel_size_nm: v.voxel_size_nm,
        dtype: "f64".to_string(),
    };
    let mut bytes = Vec::with_capacity(v.data.len() * 8);
    for val in v.data.iter() {
        bytes.extend_from_slice(&val.to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

/// Procedural test volume: Gaussian-blurred ellipsoids and curved tubes with
/// random 3D orientations over a smooth base texture. Deterministic per seed
/// and isotropic in structure distribution across axes.
pub fn generate_phantom(seed: u64, shape: [usize; 3], n_structures: usize) -> Result<Volume> {
    if shape.iter().any(|&s| s < 16) {
        return Err(D2rError::invalid(format!(
            "phantom shape must be at least (16,16,16), got {shape:?}"
        )));
    }
    if n_structures == 0 {
        return Err(D2rError::invalid("phantom needs at least one structure"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [nz, ny, nx] = shape;
    let min_ext = *shape.iter().min().unwrap() as f64;

    // Smooth low-frequency base texture around mid grey.
    let mut vol = Array3::<f64>::zeros(shape);
    let mut texture = Array3::<f64>::zeros(shape);
    for v in texture.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let texture = gaussian_blur_3d(&texture, 2.0);
    let tex_amp = 0.08;
    let tex_max = texture
        .iter()
        .fold(0.0_f64, |a, b| a.max(b.abs()))
        .max(0.1);
    for (v, t) in vol.iter_mut().zip(texture.iter()) {
        *v = 0.5 + tex_amp * t / tex_max;
    }

    for _ in 0..n_structures {
        let bright = rng.gen_bool(0.5);
        let intensity: f64 = if bright {
            rng.gen_range(0.75..0.95)
        } else {
            rng.gen_range(0.05..0.25)
        };
        let center = [
            rng.gen_range(0.15..0.85) * nz as f64,
            rng.gen_range(0.15..0.85) * ny as f64,
            rng.gen_range(0.15..0.85) * nx as f64,
        ];
        let rot = random_rotation(&mut rng);
        if rng.gen_bool(0.5) {
            // Ellipsoid with random semi-axes and orientation.
            let semi = [
                rng.gen_range(0.06..0.22) * min_ext,
                rng.gen_range(0.06..0.22) * min_ext,
                rng.gen_range(0.06..0.22) * min_ext,
            ];
            rasterize_ellipsoid(&mut vol, center, semi, &rot, intensity);
        } else {
            // Curved tube: quadratic arc along a random direction.
            let radius = rng.gen_range(0.02..0.06) * min_ext;
            let length = rng.gen_range(0.4..0.9) * min_ext;
            let bend = rng.gen_range(0.0..0.25) * length;
            rasterize_tube(&mut vol, center, &rot, length, bend, radius, intensity);
        }
    }

    let vol = gaussian_blur_3d(&vol, 1.0);

    // Rescale so intensities span at least [0.1, 0.9].
    let lo = vol.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vol.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let data = vol.mapv(|v| 0.05 + 0.9 * (v - lo) / span);
    Volume::new(data, [10.0, 10.0, 10.0])
}

/// Uniform random rotation matrix (rows are the rotated basis vectors).
fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    // Gram-Schmidt on Gaussian vectors gives a uniform orientation.
    let mut g = [[0.0; 3]; 3];
    loop {
        for row in g.iter_mut() {
            for v in row.iter_mut() {
                *v = gauss(rng);
            }
        }
        let a = normalize(g[0]);
        let mut b = sub(g[1], scale(a, dot(g[1], a)));
        if norm(b) < 1e-6 {
            continue;
        }
        b = normalize(b);
        let c = cross(a, b);
        return [a, b, c];
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(rng)
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}
fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}
fn normalize(a: [f64; 3]) -> [f64; 3] {
    scale(a, 1.0 / norm(a))
}
fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn rasterize_ellipsoid(
    vol: &mut Array3<f64>,
    center: [f64; 3],
    semi: [f64; 3],
    rot: &[[f64; 3]; 3],
    intensity: f64,
) {
    let bound = semi.iter().cloned().fold(0.0, f64::max) + 1.0;
    let (nz, ny, nx) = vol.dim();
    let z0 = ((center[0] - bound).floor().max(0.0)) as usize;
    let z1 = ((center[0] + bound).ceil().min(nz as f64 - 1.0)) as usize;
    let y0 = ((center[1] - bound).floor().max(0.0)) as usize;
    let y1 = ((center[1] + bound).ceil().min(ny as f64 - 1.0)) as usize;
    let x0 = ((center[2] - bound).floor().max(0.0)) as usize;
    let x1 = ((center[2] + bound).ceil().min(nx as f64 - 1.0)) as usize;
    for z in z0..=z1 {
        for y in y0..=y1 {
            for x in x0..=x1 {
                let p = [
                    z as f64 - center[0],
                    y as f64 - center[1],
                    x as f64 - center[2],
                ];
                let local = [dot(rot[0], p), dot(rot[1], p), dot(rot[2], p)];
                let r2 = (local[0] / semi[0]).powi(2)
                    + (local[1] / semi[1]).powi(2)
                    + (local[2] / semi[2]).powi(2);
                if r2 <= 1.0 {
                    vol[[z, y, x]] = intensity;
                }
            }
        }
    }
}

fn rasterize_tube(
    vol: &mut Array3<f64>,
    center: [f64; 3],
    rot: &[[f64; 3]; 3],
    length: f64,
    bend: f64,
    radius: f64,
    intensity: f64,
) {
    // Quadratic arc: axis along rot[0], bend along rot[1].
    let n_steps = (2.0 * length).ceil() as usize + 2;
    let (nz, ny, nx) = vol.dim();
    let ir = radius.ceil() as i64 + 1;
    for step in 0..=n_steps {
        let s = step as f64 / n_steps as f64 - 0.5; // [-0.5, 0.5]
        let along = scale(rot[0], s * length);
        let off = scale(rot[1], bend * (4.0 * s * s - 1.0));
        let p = [
            center[0] + along[0] + off[0],
            center[1] + along[1] + off[1],
            center[2] + along[2] + off[2],
        ];
        let pz = p[0].round() as i64;
        let py = p[1].round() as i64;
        let px = p[2].round() as i64;
        for dz in -ir..=ir {
            for dy in -ir..=ir {
                for dx in -ir..=ir {
                    let (z, y, x) = (pz + dz, py + dy, px + dx);
                    if z < 0 || y < 0 || x < 0 || z >= nz as i64 || y >= ny as i64 || x >= nx as i64
                    {
                        continue;
                    }
                    let d2 = (z as f64 - p[0]).powi(2)
                        + (y as f64 - p[1]).powi(2)
                        + (x as f64 - p[2]).powi(2);
                    if d2 <= radius * radius {
                        vol[[z as usize, y as usize, x as usize]] = intensity;
                    }
                }
            }
        }
    }
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur_3d(vol: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|v| v / ksum).collect();

    let mut out = vol.clone();
    for axis in 0..3 {
        let shape = out.dim();
        let extents = [shape.0, shape.1, shape.2];
        let n = extents[axis] as i64;
        let mut next = out.clone();
        for z in 0..extents[0] {
            for y in 0..extents[1] {
                for x in 0..extents[2] {
                    let mut acc = 0.0;
                    let pos = [z as i64, y as i64, x as i64];
                    for (ki, kv) in kernel.iter().enumerate() {
                        let off = ki as i64 - radius;
                        let mut q = pos;
                        q[axis] = (q[axis] + off).clamp(0, n - 1);
                        acc += kv * out[[q[0] as usize, q[1] as usize, q[2] as usize]];
                    }
                    next[[z, y, x]] = acc;
                }
            }
        }
        out = next;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    fn ramp_volume(shape: [usize; 3]) -> Volume {
        let n = shape.iter().product::<usize>();
        let data =
            Array3::from_shape_vec(shape, (0..n).map(|i| i as f64 / n as f64).collect()).unwrap();
        Volume::new(data, [1.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn slice_dims_follow_plane_convention() {
        let v = ramp_volume([8, 16, 32]);
        let xy = v.get_slice(Plane::XY, 3).unwrap();
        assert_eq!((xy.height(), xy.width()), (16, 32));
        let xz = v.get_slice(Plane::XZ, 5).unwrap();
        assert_eq!((xz.height(), xz.width()), (8, 32));
        let yz = v.get_slice(Plane::YZ, 7).unwrap();
        assert_eq!((yz.height(), yz.width()), (8, 16));
    }

    #[test]
    fn slice_index_out_of_range() {
        let v = ramp_volume([8, 16, 32]);
        assert!(v.get_slice(Plane::YZ, 40).is_err());
    }

    #[test]
    fn concat_inverts_get_slice_for_every_plane() {
        let v = ramp_volume([8, 10, 12]);
        for plane in Plane::all() {
            let extent = v.shape()[plane.normal_axis()];
            let slices: Vec<_> = (0..extent)
                .map(|i| v.get_slice(plane, i).unwrap())
                .collect();
            let rebuilt = Volume::concat_slices(plane, &slices, v.voxel_size_nm).unwrap();
            assert_eq!(rebuilt.data, v.data, "round-trip failed for plane {plane}");
        }
    }

    #[test]
    fn concat_rejects_mixed_dims_and_empty() {
        let a = SliceImage::new(Array2::zeros((8, 8)), Plane::XY, 0).unwrap();
        let b = SliceImage::new(Array2::zeros((8, 9)), Plane::XY, 1).unwrap();
        assert!(Volume::concat_slices(Plane::XY, &[a.clone(), b], [1.0; 3]).is_err());
        assert!(Volume::concat_slices(Plane::XY, &[], [1.0; 3]).is_err());
        assert!(Volume::concat_slices(Plane::XY, &[a], [0.0; 3]).is_err());
    }

    #[test]
    fn save_load_roundtrip_is_bit_exact_for_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.raw");
        let v = ramp_volume([16, 16, 16]);
        // Quantize through f32 so the reference itself is representable.
        let v = Volume::new(v.data.mapv(|x| x as f32 as f64), [10.0, 10.0, 10.0]).unwrap();
        save_volume(&v, &path).unwrap();
        let loaded = load_volume(&path).unwrap();
        assert_eq!(loaded.data, v.data);
        assert_eq!(loaded.voxel_size_nm, [10.0, 10.0, 10.0]);
    }

    #[test]
    fn sidecar_shape_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.raw");
        let bytes: Vec<u8> = (0..65).flat_map(|_| 0.5f32.to_le_bytes()).collect();
        std::fs::write(&path, bytes).unwrap();
        std::fs::write(
            dir.path().join("vol.json"),
            r#"{"shape":[4,4,4],"voxel_size_nm":[1,1,1],"dtype":"f32"}"#,
        )
        .unwrap();
        assert!(matches!(load_volume(&path), Err(D2rError::Shape(_))));
    }

    #[test]
    fn u8_volume_scales_by_255() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.raw");
        let mut bytes = vec![0u8; 64];
        bytes[10] = 255;
        std::fs::write(&path, &bytes).unwrap();
        std::fs::write(
            dir.path().join("vol.json"),
            r#"{"shape":[4,4,4],"voxel_size_nm":[1,1,1],"dtype":"u8"}"#,
        )
        .unwrap();
        let v = load_volume(&path).unwrap();
        let max = v.data.iter().cloned().fold(0.0, f64::max);
        assert_abs_diff_eq!(max, 1.0);
    }

    #[test]
    fn missing_sidecar_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.raw");
        std::fs::write(&path, [0u8; 4]).unwrap();
        assert!(load_volume(&path).is_err());
    }

    #[test]
    fn phantom_is_deterministic_and_spans_range() {
        let a = generate_phantom(1, [24, 24, 24], 6).unwrap();
        let b = generate_phantom(1, [24, 24, 24], 6).unwrap();
        assert_eq!(a.data, b.data);
        let c = generate_phantom(2, [24, 24, 24], 6).unwrap();
        assert_ne!(a.data, c.data);
        let lo = a.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = a.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo <= 0.1 && hi >= 0.9, "span [{lo}, {hi}]");
    }

    #[test]
    fn phantom_rejects_degenerate_input() {
        assert!(generate_phantom(1, [8, 24, 24], 3).is_err());
        assert!(generate_phantom(1, [24, 24, 24], 0).is_err());
    }

    #[test]
    fn phantom_gradient_histograms_are_isotropic() {
        // Per-plane gradient-magnitude histograms for XY vs XZ slices agree
        // within 10% in each bin (structures isotropic in distribution).
        let v = generate_phantom(7, [48, 48, 48], 40).unwrap();
        let grad_rows = |plane: Plane| -> Vec<f64> {
            let extent = v.shape()[plane.normal_axis()];
            let mut mags = Vec::new();
            for i in 0..extent {
                let s = v.get_slice(plane, i).unwrap();
                for r in 0..s.height() - 1 {
                    for c in 0..s.width() - 1 {
                        let gx = s.data[[r, c + 1]] - s.data[[r, c]];
                        let gy = s.data[[r + 1, c]] - s.data[[r, c]];
                        mags.push((gx * gx + gy * gy).sqrt());
                    }
                }
            }
            mags
        };
        let hist = |mags: &[f64]| -> Vec<f64> {
            let max = 0.3;
            let bins = 6;
            let mut h = vec![0.0; bins];
            for m in mags {
                let b = ((m / max) * bins as f64).min(bins as f64 - 1.0) as usize;
                h[b] += 1.0;
            }
            let total: f64 = h.iter().sum();
            h.iter().map(|v| v / total).collect()
        };
        let hxy = hist(&grad_rows(Plane::XY));
        let hxz = hist(&grad_rows(Plane::XZ));
        for (bin, (a, b)) in hxy.iter().zip(hxz.iter()).enumerate() {
            if *a < 0.01 && *b < 0.01 {
                continue; // nearly empty bin, relative comparison meaningless
            }
            let rel = (a - b).abs() / a.max(*b);
            assert!(rel < 0.10, "bin {bin}: XY {a:.4} vs XZ {b:.4} (rel {rel:.3})");
        }
    }
}
