//! The 3D interpolation network: maps a window of 2n equally spaced slices
//! plus a relative depth d in (0, 1) to the intermediate slice at that depth.
//!
//! The prediction is a learned residual over a classical per-pixel cubic
//! (Catmull-Rom) interpolation baseline, so an untrained model (zero-init
//! head) degenerates to cubic interpolation. The backbone is five encoder
//! stages of Gaussian-embedding attention blocks (GEAB) — residual 3D conv
//! pairs with FiLM depth conditioning and squeeze-excitation channel
//! attention — followed by a transposed-conv decoder with skip connections
//! and a 7x7 2D head over a learned softmax depth collapse. Depth is
//! supplied only through the conditioning, which is what makes
//! arbitrary-scale inference (any r >= 2 at test time) possible.

use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degradation::NoiseParams;
use crate::error::{D2rError, Result};
use crate::losses::{build_extractor, total_loss_t, ExtractorConfig, LossWeights};
use crate::nn::graph::{Graph, T};
use crate::nn::layers::{init_normal, Conv2d, Conv3d, ConvT3d, Linear};
use crate::nn::{Adam, AdamConfig};
use crate::resample::cubic_sample;
use crate::volume::{Plane, SliceImage, Volume};

// ---- configuration ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DGEANConfig {
    /// Total number of input slices per window (2n); even and >= 2.
    pub n_context: usize,
    /// Output channels of the five encoder stages.
    pub encoder_channels: Vec<usize>,
    /// Number of Gaussian random-Fourier frequencies (feature dim is twice
    /// this: cos and sin per frequency).
    pub gaussian_embed_dim: usize,
    /// Std-dev of the frozen Gaussian frequency draws.
    pub gaussian_sigma: f64,
    /// Width of the sinusoidal relative-depth embedding.
    pub depth_embed_dim: usize,
    /// Channel bottleneck factor of the squeeze-excitation attention.
    pub attention_reduction: usize,
}

impl Default for DGEANConfig {
    fn default() -> Self {
        DGEANConfig {
            n_context: 4,
            encoder_channels: vec![32, 64, 128, 256, 256],
            gaussian_embed_dim: 8,
            gaussian_sigma: 10.0,
            depth_embed_dim: 16,
            attention_reduction: 8,
        }
    }
}

/// Stages 1-3 stride the lateral axes by 2; the depth axis is never strided.
const STRIDED_STAGES: [bool; 5] = [false, true, true, true, false];

impl DGEANConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_context < 2 || self.n_context % 2 != 0 {
            return Err(D2rError::invalid(format!(
                "n_context must be even and >= 2, got {}",
                self.n_context
            )));
        }
        if self.encoder_channels.len() != 5 {
            return Err(D2rError::invalid(format!(
                "exactly 5 encoder stages required, got {}",
                self.encoder_channels.len()
            )));
        }
        if self.encoder_channels.iter().any(|&c| c == 0) {
            return Err(D2rError::invalid("encoder channels must be positive"));
        }
        if self.gaussian_embed_dim == 0 || self.depth_embed_dim == 0 {
            return Err(D2rError::invalid("embedding dims must be positive"));
        }
        if !(self.gaussian_sigma > 0.0 && self.gaussian_sigma.is_finite()) {
            return Err(D2rError::invalid("gaussian_sigma must be positive"));
        }
        if self.attention_reduction == 0 {
            return Err(D2rError::invalid("attention_reduction must be positive"));
        }
        Ok(())
    }

    /// Lateral dims of any input must be divisible by this (3 strided stages).
    pub fn spatial_multiple(&self) -> usize {
        8
    }
}

// ---- window ----

/// A window of 2n equally spaced slices plus the relative depth of the
/// target between the middle pair (slice n-1 and slice n, zero-indexed).
#[derive(Debug, Clone)]
pub struct SliceWindow {
    pub slices: Vec<SliceImage>,
    pub d: f64,
}

impl SliceWindow {
    pub fn new(slices: Vec<SliceImage>, d: f64) -> Result<Self> {
        if slices.len() < 2 || slices.len() % 2 != 0 {
            return Err(D2rError::invalid(format!(
                "window needs an even number (>= 2) of slices, got {}",
                slices.len()
            )));
        }
        let (h, w) = (slices[0].height(), slices[0].width());
        for (i, s) in slices.iter().enumerate() {
            if s.height() != h || s.width() != w {
                return Err(D2rError::shape(format!(
                    "window slice {i} is {}x{}, expected {h}x{w}",
                    s.height(),
                    s.width()
                )));
            }
            if !s.data.iter().all(|v| v.is_finite()) {
                return Err(D2rError::invalid("window slice contains non-finite values"));
            }
        }
        if !(d > 0.0 && d < 1.0) {
            return Err(D2rError::invalid(format!(
                "relative depth must lie strictly in (0, 1), got {d}"
            )));
        }
        Ok(SliceWindow { slices, d })
    }

    pub fn height(&self) -> usize {
        self.slices[0].height()
    }

    pub fn width(&self) -> usize {
        self.slices[0].width()
    }
}

/// Per-pixel Catmull-Rom interpolation across the window at depth d:
/// the classical anchor the network's residual is added to. Exact on
/// per-pixel affine ramps; reproduces the middle pair at d -> 0 / 1.
pub fn baseline_interp(window: &SliceWindow) -> Result<SliceImage> {
    let (h, w) = (window.height(), window.width());
    let n = window.slices.len() / 2;
    // The target sits between zero-indexed slices n-1 and n.
    let s = (n - 1) as f64 + window.d;
    let mut col = vec![0.0; window.slices.len()];
    let mut out = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            for (k, c) in col.iter_mut().enumerate() {
                *c = window.slices[k].data[[i, j]];
            }
            out[[i, j]] = cubic_sample(&col, s);
        }
    }
    let anchor = &window.slices[n - 1];
    SliceImage::new(out, anchor.source_plane, anchor.source_index)
}

// ---- model ----

struct Geab {
    conv1: Conv3d,
    conv2: Conv3d,
    /// 1x1x1 shortcut projection when channels or resolution change.
    proj: Option<Conv3d>,
    film_scale: Linear,
    film_shift: Linear,
    se1: Linear,
    se2: Linear,
}

struct DecBlock {
    up: ConvT3d,
    conv: Conv3d,
}

pub struct DGEANModel {
    pub cfg: DGEANConfig,
    /// Frozen Gaussian random-Fourier frequencies, [m, 3] over (z, y, x).
    freqs: Array2<f64>,
    stem: Conv3d,
    /// Linear projection (1x1x1 conv) of the position features.
    pos_proj: Conv3d,
    depth_mlp: Linear,
    enc: Vec<Geab>,
    dec: Vec<DecBlock>,
    /// Logits of the learned softmax depth collapse, [n_context].
    collapse: ArrayD<f64>,
    head: Conv2d,
}

pub fn build_model(cfg: &DGEANConfig, seed: u64) -> Result<DGEANModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ch = &cfg.encoder_channels;
    let m = cfg.gaussian_embed_dim;
    let e = cfg.depth_embed_dim;

    // Drawn once and frozen; not part of the trainable parameter set.
    let freqs = init_normal(&mut rng, &[m, 3], cfg.gaussian_sigma)
        .into_dimensionality()
        .expect("freqs are 2D");

    let stem = Conv3d::new(&mut rng, 1, ch[0], [3, 3, 3], [1, 1, 1], [1, 1, 1]);
    let pos_proj = Conv3d::new(&mut rng, 2 * m, ch[0], [1, 1, 1], [1, 1, 1], [0, 0, 0]);
    let depth_mlp = Linear::new(&mut rng, e, e);

    let mut enc = Vec::with_capacity(5);
    for s in 0..5 {
        let cin = if s == 0 { ch[0] } else { ch[s - 1] };
        let cout = ch[s];
        let sp = if STRIDED_STAGES[s] { 2 } else { 1 };
        let proj = if cin != cout || sp != 1 {
            Some(Conv3d::new(
                &mut rng,
                cin,
                cout,
                [1, 1, 1],
                [1, sp, sp],
                [0, 0, 0],
            ))
        } else {
            None
        };
        let bottleneck = (cout / cfg.attention_reduction).max(1);
        enc.push(Geab {
            conv1: Conv3d::new(&mut rng, cin, cout, [3, 3, 3], [1, sp, sp], [1, 1, 1]),
            conv2: Conv3d::new(&mut rng, cout, cout, [3, 3, 3], [1, 1, 1], [1, 1, 1]),
            proj,
            film_scale: Linear::new(&mut rng, e, cout),
            film_shift: Linear::new(&mut rng, e, cout),
            se1: Linear::new(&mut rng, cout, bottleneck),
            se2: Linear::new(&mut rng, bottleneck, cout),
        });
    }

    // Decoder mirrors the three strided stages; each block upsamples, fuses
    // the matching encoder skip, and refines.
    let mut dec = Vec::with_capacity(3);
    let mut cin = ch[4];
    for s in (0..3).rev() {
        let cout = ch[s];
        dec.push(DecBlock {
            up: ConvT3d::new(&mut rng, cin, cout, [1, 2, 2], [1, 2, 2], [0, 0, 0]),
            conv: Conv3d::new(&mut rng, 2 * cout, cout, [3, 3, 3], [1, 1, 1], [1, 1, 1]),
        });
        cin = cout;
    }

    // Zero logits -> uniform depth averaging; zero head -> zero residual, so
    // a freshly built model reproduces the cubic baseline exactly.
    let collapse = ArrayD::zeros(IxDyn(&[cfg.n_context]));
    let head = Conv2d::zeroed(ch[0], 1, 7, 1, 3);

    Ok(DGEANModel {
        cfg: cfg.clone(),
        freqs,
        stem,
        pos_proj,
        depth_mlp,
        enc,
        dec,
        collapse,
        head,
    })
}

fn depth_embedding(d: f64, e: usize) -> ArrayD<f64> {
    let half = e / 2;
    let mut v = vec![0.0; e];
    for k in 0..half {
        let ang = d * std::f64::consts::PI * (1 << k.min(52)) as f64;
        v[2 * k] = ang.sin();
        v[2 * k + 1] = ang.cos();
    }
    ArrayD::from_shape_vec(IxDyn(&[1, e]), v).unwrap()
}

impl DGEANModel {
    /// Position features over normalized (z, y, x) coordinates:
    /// [1, 2m, D, H, W] with channels (cos f_i . p, sin f_i . p).
    fn position_features(&self, dep: usize, h: usize, w: usize) -> ArrayD<f64> {
        let m = self.cfg.gaussian_embed_dim;
        let norm = |i: usize, n: usize| {
            if n > 1 {
                i as f64 / (n - 1) as f64
            } else {
                0.0
            }
        };
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[1, 2 * m, dep, h, w]));
        for f in 0..m {
            let (fz, fy, fx) = (self.freqs[[f, 0]], self.freqs[[f, 1]], self.freqs[[f, 2]]);
            for z in 0..dep {
                for y in 0..h {
                    for x in 0..w {
                        let ang = fz * norm(z, dep) + fy * norm(y, h) + fx * norm(x, w);
                        out[[0, 2 * f, z, y, x]] = ang.cos();
                        out[[0, 2 * f + 1, z, y, x]] = ang.sin();
                    }
                }
            }
        }
        out
    }

    /// Builds the graph for the residual branch on pre-padded slices whose
    /// lateral dims are multiples of [`DGEANConfig::spatial_multiple`].
    /// Returns the residual node [h, w] and parameter ids in
    /// [`DGEANModel::params_mut`] order.
    pub fn forward_t(
        &self,
        g: &mut Graph,
        slices: &[Array2<f64>],
        d: f64,
    ) -> Result<(T, Vec<T>)> {
        if slices.len() != self.cfg.n_context {
            return Err(D2rError::shape(format!(
                "model expects {} slices, got {}",
                self.cfg.n_context,
                slices.len()
            )));
        }
        if !(d > 0.0 && d < 1.0) {
            return Err(D2rError::invalid("relative depth must lie in (0, 1)"));
        }
        let (h, w) = slices[0].dim();
        let m = self.cfg.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(D2rError::shape(format!(
                "lateral dims ({h}, {w}) must be divisible by {m}"
            )));
        }
        let dep = slices.len();
        let mut ids = Vec::new();

        // Stack the window along the depth axis: [1, 1, D, H, W].
        let planes: Vec<T> = slices
            .iter()
            .map(|s| {
                if s.dim() != (h, w) {
                    return Err(D2rError::shape("window slices must share dims"));
                }
                let c = g.constant(s.clone().into_dyn());
                Ok(g.reshape(c, &[1, 1, 1, h, w]))
            })
            .collect::<Result<_>>()?;
        let x = g.concat(2, &planes);

        // Depth conditioning: sinusoidal embedding -> shared MLP.
        let demb = g.constant(depth_embedding(d, self.cfg.depth_embed_dim));
        let mlp = self.depth_mlp.bind(g, &mut ids);
        let demb = mlp.fwd(g, demb);
        let demb = g.silu(demb);

        let stem = self.stem.bind(g, &mut ids);
        let mut cur = stem.fwd(g, x);
        let pos = g.constant(self.position_features(dep, h, w));
        let pp = self.pos_proj.bind(g, &mut ids);
        let pos = pp.fwd(g, pos);
        cur = g.add(cur, pos);
        cur = g.relu(cur);

        let mut skips = Vec::new();
        for (s, blk) in self.enc.iter().enumerate() {
            let c1 = blk.conv1.bind(g, &mut ids);
            let c2 = blk.conv2.bind(g, &mut ids);
            let proj = blk.proj.as_ref().map(|p| p.bind(g, &mut ids));
            let fs = blk.film_scale.bind(g, &mut ids);
            let fsh = blk.film_shift.bind(g, &mut ids);
            let se1 = blk.se1.bind(g, &mut ids);
            let se2 = blk.se2.bind(g, &mut ids);

            let inp = cur;
            let mut hcur = c1.fwd(g, inp);
            // FiLM: per-channel (1 + scale) and shift from the depth code.
            let sc = fs.fwd(g, demb);
            let sc = g.add_scalar(sc, 1.0);
            let sh = fsh.fwd(g, demb);
            hcur = g.bc_mul_channel(hcur, sc);
            hcur = g.bc_add_channel(hcur, sh);
            hcur = g.relu(hcur);
            hcur = c2.fwd(g, hcur);
            let short = match proj {
                Some(p) => p.fwd(g, inp),
                None => inp,
            };
            hcur = g.add(hcur, short);
            hcur = g.relu(hcur);
            // Squeeze-excitation channel attention.
            let pooled = g.mean_channels(hcur);
            let a = se1.fwd(g, pooled);
            let a = g.silu(a);
            let a = se2.fwd(g, a);
            let a = g.sigmoid(a);
            hcur = g.bc_mul_channel(hcur, a);

            // Skips feed the decoder from the pre-stride resolutions.
            if matches!(s, 0 | 1 | 2) {
                skips.push(hcur);
            }
            cur = hcur;
        }

        for blk in &self.dec {
            let up = blk.up.bind(g, &mut ids);
            let cv = blk.conv.bind(g, &mut ids);
            cur = up.fwd(g, cur);
            let skip = skips.pop().expect("skip stack");
            cur = g.concat(1, &[cur, skip]);
            cur = cv.fwd(g, cur);
            cur = g.relu(cur);
        }

        // Learned softmax depth collapse, then the 7x7 2D head.
        let logits = g.leaf(self.collapse.clone());
        ids.push(logits);
        let wsoft = g.softmax1d(logits);
        cur = g.collapse_depth(cur, wsoft);
        let head = self.head.bind(g, &mut ids);
        cur = head.fwd(g, cur);
        let out = g.reshape(cur, &[h, w]);
        Ok((out, ids))
    }

    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        let mut v: Vec<&mut ArrayD<f64>> = Vec::new();
        v.push(&mut self.depth_mlp.w);
        v.push(&mut self.depth_mlp.b);
        v.push(&mut self.stem.w);
        v.push(&mut self.stem.b);
        v.push(&mut self.pos_proj.w);
        v.push(&mut self.pos_proj.b);
        for blk in &mut self.enc {
            v.push(&mut blk.conv1.w);
            v.push(&mut blk.conv1.b);
            v.push(&mut blk.conv2.w);
            v.push(&mut blk.conv2.b);
            if let Some(p) = blk.proj.as_mut() {
                v.push(&mut p.w);
                v.push(&mut p.b);
            }
            v.push(&mut blk.film_scale.w);
            v.push(&mut blk.film_scale.b);
            v.push(&mut blk.film_shift.w);
            v.push(&mut blk.film_shift.b);
            v.push(&mut blk.se1.w);
            v.push(&mut blk.se1.b);
            v.push(&mut blk.se2.w);
            v.push(&mut blk.se2.b);
        }
        for blk in &mut self.dec {
            v.push(&mut blk.up.w);
            v.push(&mut blk.up.b);
            v.push(&mut blk.conv.w);
            v.push(&mut blk.conv.b);
        }
        v.push(&mut self.collapse);
        v.push(&mut self.head.w);
        v.push(&mut self.head.b);
        v
    }

    pub fn params_vec(&mut self) -> Vec<ArrayD<f64>> {
        self.params_mut().into_iter().map(|p| p.clone()).collect()
    }

    pub fn set_params(&mut self, params: &[ArrayD<f64>]) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != params.len() {
            return Err(D2rError::invalid(format!(
                "checkpoint holds {} tensors, model needs {}",
                params.len(),
                slots.len()
            )));
        }
        for (slot, p) in slots.iter_mut().zip(params.iter()) {
            if slot.shape() != p.shape() {
                return Err(D2rError::shape("checkpoint tensor shape mismatch"));
            }
            **slot = p.clone();
        }
        Ok(())
    }
}

fn pad_to_multiple(img: &Array2<f64>, m: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    let hp = h.div_ceil(m) * m;
    let wp = w.div_ceil(m) * m;
    if hp == h && wp == w {
        return img.clone();
    }
    Array2::from_shape_fn((hp, wp), |(i, j)| img[[i.min(h - 1), j.min(w - 1)]])
}

/// Inference forward pass: cubic baseline plus the network residual.
/// Arbitrary lateral dims (edge-replication padded internally, cropped back).
pub fn forward(model: &DGEANModel, window: &SliceWindow) -> Result<SliceImage> {
    if window.slices.len() != model.cfg.n_context {
        return Err(D2rError::shape(format!(
            "model expects {} slices, got {}",
            model.cfg.n_context,
            window.slices.len()
        )));
    }
    let baseline = baseline_interp(window)?;
    let m = model.cfg.spatial_multiple();
    let padded: Vec<Array2<f64>> = window
        .slices
        .iter()
        .map(|s| pad_to_multiple(&s.data, m))
        .collect();
    let mut g = Graph::inference();
    let (resid, _) = model.forward_t(&mut g, &padded, window.d)?;
    let rv: Array2<f64> = g
        .value(resid)
        .clone()
        .into_dimensionality()
        .expect("residual is 2D");
    let (h, w) = baseline.data.dim();
    let out = Array2::from_shape_fn((h, w), |(i, j)| baseline.data[[i, j]] + rv[[i, j]]);
    SliceImage::new(out, baseline.source_plane, baseline.source_index)
}

/// Generates the r-1 intermediate slices between the middle pair of the
/// window, at depths d = j/r. Works for any r >= 2 regardless of the factor
/// the model was trained with (arbitrary-scale inference).
pub fn predict_gap(
    model: &DGEANModel,
    window_slices: &[SliceImage],
    r: usize,
) -> Result<Vec<SliceImage>> {
    if r < 2 {
        return Err(D2rError::invalid("interpolation factor r must be >= 2"));
    }
    let mut out = Vec::with_capacity(r - 1);
    for j in 1..r {
        let window = SliceWindow::new(window_slices.to_vec(), j as f64 / r as f64)?;
        out.push(forward(model, &window)?);
    }
    Ok(out)
}

// ---- training ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DGEANTrainConfig {
    pub steps: usize,
    pub val_every: usize,
    /// Number of held-out windows used for best-checkpoint selection.
    pub val_windows: usize,
    /// Lateral crop size of training windows; multiple of 8.
    pub patch: usize,
    pub adam: AdamConfig,
    /// Optional observation-noise augmentation of the *input* slices of each
    /// sampled window (targets untouched). At inference the context slices
    /// come from the raw acquisition, so when the training volume has been
    /// denoised by the recovery stage, re-noising the inputs with the known
    /// acquisition model matches the training and inference distributions
    /// (and turns training into denoised-target supervision). The `seed`
    /// inside is ignored; draws come from the training RNG stream.
    #[serde(default)]
    pub input_noise: Option<NoiseParams>,
}

impl Default for DGEANTrainConfig {
    fn default() -> Self {
        DGEANTrainConfig {
            steps: 800,
            val_every: 50,
            val_windows: 4,
            patch: 32,
            adam: AdamConfig {
                lr: 1e-3,
                ..Default::default()
            },
            input_noise: None,
        }
    }
}

/// Mirror reflection of an out-of-range index into [0, n).
fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// One sampled training window: input slice patches, target patch, anchors.
struct TrainSample {
    inputs: Vec<Array2<f64>>,
    target: Array2<f64>,
    d: f64,
}

/// Draws a window along the X or Y axis: anchor index i, inputs at
/// i + (k - (n-1)) r for k = 0..2n (reflected at borders), target at i + j
/// with j uniform in [1, r-1], d = j/r. All patches share one lateral crop.
fn sample_window(
    sources: &[(Plane, &Volume)],
    r: usize,
    n_context: usize,
    patch: usize,
    input_noise: Option<&NoiseParams>,
    rng: &mut ChaCha8Rng,
) -> Result<TrainSample> {
    let (plane, v) = sources[rng.gen_range(0..sources.len())];
    let extent = v.shape()[plane.normal_axis()];
    let n = n_context / 2;
    let i = rng.gen_range(0..=(extent - 1 - r)) as isize;
    let j = if r == 2 { 1 } else { rng.gen_range(1..r) };
    let d = j as f64 / r as f64;

    let probe = v.get_slice(plane, 0)?;
    let (sh, sw) = probe.data.dim();
    let ph = patch.min(sh / 8 * 8);
    let pw = patch.min(sw / 8 * 8);
    if ph < 8 || pw < 8 {
        return Err(D2rError::invalid(
            "training slices must be at least 8 voxels laterally",
        ));
    }
    let oy = rng.gen_range(0..=(sh - ph));
    let ox = rng.gen_range(0..=(sw - pw));
    let crop = |s: &SliceImage| {
        s.data
            .slice(ndarray::s![oy..oy + ph, ox..ox + pw])
            .to_owned()
    };

    let mut inputs = Vec::with_capacity(n_context);
    for k in 0..n_context {
        let idx = i + (k as isize - (n as isize - 1)) * r as isize;
        let idx = reflect_index(idx, extent);
        let mut input = crop(&v.get_slice(plane, idx)?);
        if let Some(p) = input_noise {
            if !p.is_zero() {
                let p = NoiseParams { seed: rng.gen(), ..*p };
                input = crate::degradation::add_poisson_gaussian_noise_image(&input, &p)?;
            }
        }
        inputs.push(input);
    }
    let target = crop(&v.get_slice(plane, (i + j as isize) as usize)?);
    Ok(TrainSample { inputs, target, d })
}

fn sample_loss_t(
    g: &mut Graph,
    model: &DGEANModel,
    sample: &TrainSample,
    weights: &LossWeights,
    extractor: &crate::losses::PerceptualExtractor,
) -> Result<(T, Vec<T>)> {
    let (resid, ids) = model.forward_t(g, &sample.inputs, sample.d)?;
    let n = sample.inputs.len() / 2;
    let baseline_window = SliceWindow {
        slices: sample
            .inputs
            .iter()
            .map(|a| SliceImage::new(a.clone(), Plane::XY, 0))
            .collect::<Result<_>>()?,
        d: sample.d,
    };
    let baseline = baseline_interp(&baseline_window)?;
    let base = g.constant(baseline.data.into_dyn());
    let pred = g.add(base, resid);
    let target = g.constant(sample.target.clone().into_dyn());
    let a0 = g.constant(sample.inputs[n - 1].clone().into_dyn());
    let a1 = g.constant(sample.inputs[n].clone().into_dyn());
    let loss = total_loss_t(g, &[pred], &[target], (a0, a1), weights, extractor, None)?;
    Ok((loss, ids))
}

fn validation_loss(
    model: &DGEANModel,
    samples: &[TrainSample],
    weights: &LossWeights,
    extractor: &crate::losses::PerceptualExtractor,
) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let mut g = Graph::inference();
        let (l, _) = sample_loss_t(&mut g, model, s, weights, extractor)?;
        total += g.scalar_value(l);
    }
    Ok(total / samples.len() as f64)
}

/// Trains the interpolation network on lateral windows of `training_volume`
/// (sampled equally from X- and Y-axis sequences); returns the parameter
/// state with the best validation loss. Deterministic per seed.
pub fn train_dgean(
    model: DGEANModel,
    training_volume: &Volume,
    r: usize,
    losses_config: &LossWeights,
    optimizer_config: &DGEANTrainConfig,
    seed: u64,
) -> Result<DGEANModel> {
    train_dgean_on_planes(
        model,
        training_volume,
        r,
        &[Plane::YZ, Plane::XZ],
        losses_config,
        optimizer_config,
        seed,
    )
}

/// [`train_dgean`] with an explicit set of sampling planes (the plane's
/// normal is the window axis). The axial variant (`Plane::XY`, windows along
/// Z) trains the supervised comparator directly on a high-resolution volume.
pub fn train_dgean_on_planes(
    model: DGEANModel,
    training_volume: &Volume,
    r: usize,
    planes: &[Plane],
    losses_config: &LossWeights,
    optimizer_config: &DGEANTrainConfig,
    seed: u64,
) -> Result<DGEANModel> {
    let sources: Vec<(Plane, &Volume)> = planes.iter().map(|p| (*p, training_volume)).collect();
    train_dgean_sources(model, &sources, r, losses_config, optimizer_config, seed)
}

/// Fully general trainer: each sampling plane is paired with its own source
/// volume, so windows along different axes can come from different volumes
/// (all sources must share the factor `r` and lateral patch budget).
pub fn train_dgean_sources(
    mut model: DGEANModel,
    sources: &[(Plane, &Volume)],
    r: usize,
    losses_config: &LossWeights,
    optimizer_config: &DGEANTrainConfig,
    seed: u64,
) -> Result<DGEANModel> {
    losses_config.validate()?;
    if r < 2 {
        return Err(D2rError::invalid("training factor r must be >= 2"));
    }
    if sources.is_empty() {
        return Err(D2rError::invalid("at least one sampling plane required"));
    }
    if optimizer_config.steps == 0 || optimizer_config.val_every == 0 {
        return Err(D2rError::invalid("steps and val_every must be positive"));
    }
    let need = (model.cfg.n_context - 1) * r + 1;
    for (plane, v) in sources {
        if v.shape()[plane.normal_axis()] < need {
            return Err(D2rError::invalid(format!(
                "training volume extent along the {plane} window axis must be >= {need} for r={r}"
            )));
        }
    }

    let extractor = build_extractor(&ExtractorConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd6ea_11);
    let val: Vec<TrainSample> = (0..optimizer_config.val_windows.max(1))
        .map(|_| {
            sample_window(
                sources,
                r,
                model.cfg.n_context,
                optimizer_config.patch,
                optimizer_config.input_noise.as_ref(),
                &mut rng,
            )
        })
        .collect::<Result<_>>()?;

    let mut adam = Adam::new(optimizer_config.adam.clone());
    let mut best_loss = validation_loss(&model, &val, losses_config, &extractor)?;
    let mut best_params = model.params_vec();

    for step in 0..optimizer_config.steps {
        let sample = sample_window(
            sources,
            r,
            model.cfg.n_context,
            optimizer_config.patch,
            optimizer_config.input_noise.as_ref(),
            &mut rng,
        )?;
        let mut g = Graph::new();
        let (loss, ids) = sample_loss_t(&mut g, &model, &sample, losses_config, &extractor)?;
        let grads = g.backward(loss);
        let grad_arrays: Vec<ArrayD<f64>> = ids
            .iter()
            .map(|id| {
                grads[id.0]
                    .clone()
                    .unwrap_or_else(|| ArrayD::zeros(g.value(*id).raw_dim()))
            })
            .collect();
        if std::env::var("D2R_DEBUG_VAL").is_ok() && (step % 50 == 0) {
            let gnorm: f64 = grad_arrays.iter().map(|a| a.mapv(|v| v * v).sum()).sum::<f64>().sqrt();
            let tl = g.scalar_value(loss);
            eprintln!("step {step} train_loss {tl:.6} grad_norm {gnorm:.3e}");
        }
        let mut params = model.params_mut();
        adam.step(&mut params, &grad_arrays);

        if (step + 1) % optimizer_config.val_every == 0 || step + 1 == optimizer_config.steps {
            let vl = validation_loss(&model, &val, losses_config, &extractor)?;
            if std::env::var("D2R_DEBUG_VAL").is_ok() {
                eprintln!("step {} val {vl:.6} best {best_loss:.6}", step + 1);
            }
            if vl < best_loss {
                best_loss = vl;
                best_params = model.params_vec();
            }
        }
    }
    model.set_params(&best_params)?;
    Ok(model)
}

// ---- axial inference ----

/// Axial super-resolution of a whole volume: output depth r (Z_L - 1) + 1,
/// kept input slices copied verbatim at k*r, gaps filled by [`predict_gap`]
/// with border windows reflected; the z voxel size is divided by r.
pub fn infer_axial(model: &DGEANModel, v_low: &Volume, r: usize) -> Result<Volume> {
    if r < 2 {
        return Err(D2rError::invalid("upsampling factor r must be >= 2"));
    }
    let [z, y, x] = v_low.shape();
    if z < model.cfg.n_context {
        return Err(D2rError::invalid(format!(
            "volume needs at least {} axial slices, got {z}",
            model.cfg.n_context
        )));
    }
    let n = model.cfg.n_context / 2;
    let zh = r * (z - 1) + 1;
    let mut data = ndarray::Array3::<f64>::zeros((zh, y, x));
    for k in 0..z {
        data.index_axis_mut(ndarray::Axis(0), k * r)
            .assign(&v_low.get_slice(Plane::XY, k)?.data);
    }
    for k in 0..z - 1 {
        let window: Vec<SliceImage> = (0..model.cfg.n_context)
            .map(|j| {
                let idx = reflect_index(k as isize + j as isize - (n as isize - 1), z);
                v_low.get_slice(Plane::XY, idx)
            })
            .collect::<Result<_>>()?;
        for (j, slice) in predict_gap(model, &window, r)?.into_iter().enumerate() {
            data.index_axis_mut(ndarray::Axis(0), k * r + j + 1)
                .assign(&slice.data.mapv(|v| v.clamp(0.0, 1.0)));
        }
    }
    let mut voxel = v_low.voxel_size_nm;
    voxel[0] /= r as f64;
    Volume::new(data, voxel)
}

// ---- checkpointing ----

#[derive(Serialize, Deserialize)]
struct DGEANManifest {
    config: DGEANConfig,
    seed: u64,
    train_r: usize,
    loss_weights: LossWeights,
}

/// Writes `<prefix>.bin` (parameters) and `<prefix>.json` (manifest).
pub fn save_dgean_checkpoint(
    model: &mut DGEANModel,
    seed: u64,
    train_r: usize,
    loss_weights: &LossWeights,
    prefix: &Path,
) -> Result<()> {
    let params = model.params_vec();
    let refs: Vec<&ArrayD<f64>> = params.iter().collect();
    std::fs::write(prefix.with_extension("bin"), crate::nn::blob::write_params(&refs))?;
    let manifest = DGEANManifest {
        config: model.cfg.clone(),
        seed,
        train_r,
        loss_weights: loss_weights.clone(),
    };
    std::fs::write(
        prefix.with_extension("json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Restores a model (including the frozen Gaussian frequencies, regenerated
/// from the recorded seed) plus the factor it was trained with.
pub fn load_dgean_checkpoint(prefix: &Path) -> Result<(DGEANModel, usize)> {
    let manifest: DGEANManifest =
        serde_json::from_str(&std::fs::read_to_string(prefix.with_extension("json"))?)?;
    let bytes = std::fs::read(prefix.with_extension("bin"))?;
    let params = crate::nn::blob::read_params(&bytes)?;
    let mut model = build_model(&manifest.config, manifest.seed)?;
    model.set_params(&params)?;
    Ok((model, manifest.train_r))
}
