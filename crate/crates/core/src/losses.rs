//! Stage-III loss terms: L1, SSIM, focal frequency, and the continuity pair
//! (adjacent-slice consistency + Gini smoothness), plus the pluggable
//! perceptual extractor the continuity terms are measured in.
//!
//! Every term has a graph-building variant (`*_t`, differentiable) and a
//! plain `f64` wrapper that evaluates on an inference graph.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{D2rError, Result};
use crate::nn::graph::{Graph, T};
use crate::nn::layers::Conv2d;

/// Weights of the composite objective:
/// `L1 + lambda_ssim * L_SSIM + lambda_ffl * L_FFL
///  + lambda_cont * (L_consist + L_smooth)`.
///
/// `lambda_ssim` defaults to 1 (plain `L1 + SSIM` supervision). When the
/// training targets themselves are noisy, SSIM rewards reproducing the
/// target's noise texture and fights the denoising that L1 drives toward;
/// lowering it (down to 0) makes the objective a pure noise2noise L1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "default_lambda_ssim")]
    pub lambda_ssim: f64,
    pub lambda_ffl: f64,
    pub lambda_cont: f64,
}

fn default_lambda_ssim() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ssim: 1.0,
            lambda_ffl: 100.0,
            lambda_cont: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_ssim < 0.0 || self.lambda_ffl < 0.0 || self.lambda_cont < 0.0 {
            return Err(D2rError::invalid("loss weights must be nonnegative"));
        }
        Ok(())
    }
}

fn check_same_2d(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b || a.len() != 2 {
        return Err(D2rError::shape(format!(
            "loss inputs must be equal-shape 2D images, got {a:?} vs {b:?}"
        )));
    }
    Ok(())
}

// ---- L1 ----

pub fn l1_loss_t(g: &mut Graph, a: T, b: T) -> Result<T> {
    check_same_2d(&g.shape(a), &g.shape(b))?;
    let d = g.sub(a, b);
    let d = g.abs(d);
    Ok(g.mean_all(d))
}

pub fn l1_loss(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    let mut g = Graph::inference();
    let (an, bn) = (g.constant(a.clone().into_dyn()), g.constant(b.clone().into_dyn()));
    let l = l1_loss_t(&mut g, an, bn)?;
    Ok(g.scalar_value(l))
}

// ---- SSIM ----

/// Gaussian SSIM window, sigma 1.5, side `min(11, largest odd <= min(h, w))`.
fn ssim_window(h: usize, w: usize) -> Result<ArrayD<f64>> {
    let mut k = 11usize.min(h).min(w);
    if k % 2 == 0 {
        k -= 1;
    }
    if k == 0 {
        return Err(D2rError::shape("image too small for an SSIM window"));
    }
    let sigma = 1.5;
    let c = (k as f64 - 1.0) / 2.0;
    let mut win = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        for j in 0..k {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            win[[i, j]] = (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    let s = win.sum();
    Ok((win / s).into_shape_with_order(IxDyn(&[1, 1, k, k])).unwrap())
}

const SSIM_C1: f64 = 0.01 * 0.01; // (k1 * dynamic range)^2
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean SSIM between two 2D images as a graph node.
pub fn ssim_index_t(g: &mut Graph, a: T, b: T) -> Result<T> {
    let sa = g.shape(a);
    check_same_2d(&sa, &g.shape(b))?;
    let (h, w) = (sa[0], sa[1]);
    let win = g.constant(ssim_window(h, w)?);
    let x = g.reshape(a, &[1, 1, h, w]);
    let y = g.reshape(b, &[1, 1, h, w]);
    let conv = |g: &mut Graph, v: T| g.conv2d(v, win, None, [1, 1], [0, 0]);

    let mu_x = conv(g, x);
    let mu_y = conv(g, y);
    let xx = g.mul(x, x);
    let yy = g.mul(y, y);
    let xy = g.mul(x, y);
    let exx = conv(g, xx);
    let eyy = conv(g, yy);
    let exy = conv(g, xy);
    let mu_xx = g.mul(mu_x, mu_x);
    let mu_yy = g.mul(mu_y, mu_y);
    let mu_xy = g.mul(mu_x, mu_y);
    let var_x = g.sub(exx, mu_xx);
    let var_y = g.sub(eyy, mu_yy);
    let cov = g.sub(exy, mu_xy);

    let n1 = g.scale(mu_xy, 2.0);
    let n1 = g.add_scalar(n1, SSIM_C1);
    let n2 = g.scale(cov, 2.0);
    let n2 = g.add_scalar(n2, SSIM_C2);
    let num = g.mul(n1, n2);
    let d1 = g.add(mu_xx, mu_yy);
    let d1 = g.add_scalar(d1, SSIM_C1);
    let d2 = g.add(var_x, var_y);
    let d2 = g.add_scalar(d2, SSIM_C2);
    let den = g.mul(d1, d2);
    let map = g.div(num, den);
    Ok(g.mean_all(map))
}

/// `1 - mean SSIM`.
pub fn ssim_loss_t(g: &mut Graph, a: T, b: T) -> Result<T> {
    let s = ssim_index_t(g, a, b)?;
    let n = g.neg(s);
    Ok(g.add_scalar(n, 1.0))
}

pub fn ssim_loss(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    let mut g = Graph::inference();
    let (an, bn) = (g.constant(a.clone().into_dyn()), g.constant(b.clone().into_dyn()));
    let l = ssim_loss_t(&mut g, an, bn)?;
    Ok(g.scalar_value(l))
}

pub fn ssim_index(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    Ok(1.0 - ssim_loss(a, b)?)
}

// ---- focal frequency ----

/// Orthonormal DFT matrix split into cosine and (negative) sine parts.
fn dft_mats(n: usize) -> (Array2<f64>, Array2<f64>) {
    let mut c = Array2::<f64>::zeros((n, n));
    let mut s = Array2::<f64>::zeros((n, n));
    let norm = 1.0 / (n as f64).sqrt();
    for u in 0..n {
        for k in 0..n {
            let ang = -2.0 * std::f64::consts::PI * (u * k) as f64 / n as f64;
            c[[u, k]] = ang.cos() * norm;
            s[[u, k]] = ang.sin() * norm;
        }
    }
    (c, s)
}

/// 2D orthonormal DFT of a [H, W] node via constant matrix products.
fn dft2_t(g: &mut Graph, x: T) -> (T, T) {
    let sh = g.shape(x);
    let (h, w) = (sh[0], sh[1]);
    let (ch, sh_) = dft_mats(h);
    let (cw, sw) = dft_mats(w); // symmetric, so D_W^T = D_W
    let ch = g.constant(ch.into_dyn());
    let sh_ = g.constant(sh_.into_dyn());
    let cw = g.constant(cw.into_dyn());
    let sw = g.constant(sw.into_dyn());
    let a_re = g.matmul(ch, x);
    let a_im = g.matmul(sh_, x);
    let rc = g.matmul(a_re, cw);
    let is = g.matmul(a_im, sw);
    let f_re = g.sub(rc, is);
    let rs = g.matmul(a_re, sw);
    let ic = g.matmul(a_im, cw);
    let f_im = g.add(rs, ic);
    (f_re, f_im)
}

/// Spectrum-max-normalized focal weights `|F_a - F_b| / max |F_a - F_b|`,
/// computed outside the gradient (the loss treats them as constants).
pub fn ffl_spectrum_weights(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let mut g = Graph::inference();
    let (an, bn) = (g.constant(a.clone().into_dyn()), g.constant(b.clone().into_dyn()));
    check_same_2d(&g.shape(an), &g.shape(bn))?;
    let (are, aim) = dft2_t(&mut g, an);
    let (bre, bim) = dft2_t(&mut g, bn);
    let dre = g.sub(are, bre);
    let dim = g.sub(aim, bim);
    let (h, w) = (a.nrows(), a.ncols());
    let mut mag = Array2::<f64>::zeros((h, w));
    let (vre, vim) = (g.value(dre), g.value(dim));
    for i in 0..h {
        for j in 0..w {
            mag[[i, j]] = (vre[[i, j]].powi(2) + vim[[i, j]].powi(2)).sqrt();
        }
    }
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        mag /= max;
    }
    Ok(mag)
}

/// Focal frequency loss: mean over frequencies of `w * |F_a - F_b|^2`.
/// `weights` pins the focal weights; `None` recomputes them from the current
/// values (detached, the standard formulation).
pub fn focal_frequency_loss_t(
    g: &mut Graph,
    a: T,
    b: T,
    weights: Option<&Array2<f64>>,
) -> Result<T> {
    check_same_2d(&g.shape(a), &g.shape(b))?;
    let (are, aim) = dft2_t(g, a);
    let (bre, bim) = dft2_t(g, b);
    let dre = g.sub(are, bre);
    let dim = g.sub(aim, bim);
    let w = match weights {
        Some(w) => w.clone(),
        None => {
            let (vre, vim) = (g.value(dre).clone(), g.value(dim).clone());
            let mut mag = ndarray::Zip::from(&vre)
                .and(&vim)
                .map_collect(|r, i| (r * r + i * i).sqrt());
            let max = mag.iter().cloned().fold(0.0, f64::max);
            if max > 0.0 {
                mag /= max;
            }
            mag.into_dimensionality().unwrap()
        }
    };
    let wc = g.constant(w.into_dyn());
    let re2 = g.square(dre);
    let im2 = g.square(dim);
    let mag2 = g.add(re2, im2);
    let focal = g.mul(wc, mag2);
    Ok(g.mean_all(focal))
}

pub fn focal_frequency_loss(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    let mut g = Graph::inference();
    let (an, bn) = (g.constant(a.clone().into_dyn()), g.constant(b.clone().into_dyn()));
    let l = focal_frequency_loss_t(&mut g, an, bn, None)?;
    Ok(g.scalar_value(l))
}

// ---- Gini / continuity ----

/// Gini coefficient of nonnegative reals:
/// `G = sum_i sum_j |x_i - x_j| / (2 r^2 mean)`, 0 for zero-mean input.
pub fn gini_coefficient(xs: &[f64]) -> Result<f64> {
    if xs.len() < 2 {
        return Err(D2rError::invalid("Gini needs at least two values"));
    }
    if xs.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(D2rError::invalid("Gini inputs must be finite and >= 0"));
    }
    let r = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / r;
    if mean <= 0.0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for a in xs {
        for b in xs {
            total += (a - b).abs();
        }
    }
    Ok(total / (2.0 * r * r * mean))
}

/// Gini over scalar graph nodes (each shape [1]).
pub fn gini_t(g: &mut Graph, xs: &[T]) -> Result<T> {
    if xs.len() < 2 {
        return Err(D2rError::invalid("Gini needs at least two values"));
    }
    let r = xs.len() as f64;
    let mean_val = xs.iter().map(|t| g.scalar_value(*t)).sum::<f64>() / r;
    if mean_val <= 0.0 {
        return Ok(g.scalar(0.0));
    }
    let mut pair_sum: Option<T> = None;
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            let d = g.sub(xs[i], xs[j]);
            let d = g.abs(d);
            pair_sum = Some(match pair_sum {
                Some(acc) => g.add(acc, d),
                None => d,
            });
        }
    }
    // Full double sum counts each unordered pair twice.
    let total = g.scale(pair_sum.unwrap(), 2.0);
    let mut sum = xs[0];
    for x in &xs[1..] {
        sum = g.add(sum, *x);
    }
    let denom = g.scale(sum, 2.0 * r); // 2 r^2 mean = 2 r sum
    Ok(g.div(total, denom))
}

/// Mean adjacent perceptual distance over a slice sequence.
pub fn consistency_loss_t(
    g: &mut Graph,
    seq: &[T],
    p: &PerceptualExtractor,
) -> Result<T> {
    let dists = adjacent_distances_t(g, seq, p)?;
    let mut sum = dists[0];
    for d in &dists[1..] {
        sum = g.add(sum, *d);
    }
    Ok(g.scale(sum, 1.0 / dists.len() as f64))
}

/// `1 - Gini` of the adjacent perceptual distances.
pub fn smoothness_loss_t(g: &mut Graph, seq: &[T], p: &PerceptualExtractor) -> Result<T> {
    let dists = adjacent_distances_t(g, seq, p)?;
    let gini = gini_t(g, &dists)?;
    let n = g.neg(gini);
    Ok(g.add_scalar(n, 1.0))
}

fn adjacent_distances_t(g: &mut Graph, seq: &[T], p: &PerceptualExtractor) -> Result<Vec<T>> {
    if seq.len() < 2 {
        return Err(D2rError::invalid(
            "continuity losses need at least two slices",
        ));
    }
    let mut dists = Vec::with_capacity(seq.len() - 1);
    for w in seq.windows(2) {
        dists.push(p.distance_t(g, w[0], w[1])?);
    }
    Ok(dists)
}

pub fn consistency_loss(seq: &[Array2<f64>], p: &PerceptualExtractor) -> Result<f64> {
    let mut g = Graph::inference();
    let nodes: Vec<T> = seq.iter().map(|s| g.constant(s.clone().into_dyn())).collect();
    let l = consistency_loss_t(&mut g, &nodes, p)?;
    Ok(g.scalar_value(l))
}

pub fn smoothness_loss(seq: &[Array2<f64>], p: &PerceptualExtractor) -> Result<f64> {
    let mut g = Graph::inference();
    let nodes: Vec<T> = seq.iter().map(|s| g.constant(s.clone().into_dyn())).collect();
    let l = smoothness_loss_t(&mut g, &nodes, p)?;
    Ok(g.scalar_value(l))
}

// ---- perceptual extractor ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    pub levels: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            levels: 3,
            channels: 16,
            seed: 0xd2f_ea7,
        }
    }
}

/// Fixed seeded multi-scale convolutional feature pyramid; distance is the
/// mean squared difference of channel-unit-normalized features, averaged
/// over levels. Deterministic, symmetric, zero on identical inputs.
pub struct PerceptualExtractor {
    convs: Vec<Conv2d>,
    channels: usize,
}

impl PerceptualExtractor {
    pub fn build(cfg: &ExtractorConfig) -> Result<Self> {
        if cfg.levels == 0 || cfg.channels == 0 {
            return Err(D2rError::invalid("extractor needs >= 1 level and channel"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut convs = Vec::with_capacity(cfg.levels);
        for level in 0..cfg.levels {
            let cin = if level == 0 { 1 } else { cfg.channels };
            let stride = if level == 0 { 1 } else { 2 };
            convs.push(Conv2d::new(&mut rng, cin, cfg.channels, 3, stride, 1));
        }
        Ok(PerceptualExtractor {
            convs,
            channels: cfg.channels,
        })
    }

    /// Per-pixel unit normalization across channels via constant 1x1 convs.
    fn unit_norm(&self, g: &mut Graph, x: T) -> T {
        let c = self.channels;
        let reduce = g.constant(ArrayD::from_elem(IxDyn(&[1, c, 1, 1]), 1.0));
        let spread = g.constant(ArrayD::from_elem(IxDyn(&[c, 1, 1, 1]), 1.0));
        let sq = g.square(x);
        let s = g.conv2d(sq, reduce, None, [1, 1], [0, 0]); // [1,1,H,W]
        let s = g.add_scalar(s, 1e-8);
        let sb = g.conv2d(s, spread, None, [1, 1], [0, 0]); // [1,C,H,W]
        let norm = g.sqrt(sb);
        g.div(x, norm)
    }

    /// Normalized feature maps of a [H, W] node at each pyramid level.
    fn features_t(&self, g: &mut Graph, x: T) -> Result<Vec<T>> {
        let sh = g.shape(x);
        check_same_2d(&sh, &sh)?;
        let mut cur = g.reshape(x, &[1, 1, sh[0], sh[1]]);
        let mut feats = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            // Constants: the extractor is frozen, gradients flow to x only.
            let wt = g.constant(conv.w.clone());
            let bt = g.constant(conv.b.clone());
            let y = g.conv2d(cur, wt, Some(bt), conv.stride, conv.pad);
            let y = g.relu(y);
            let y = self.unit_norm(g, y);
            feats.push(y);
            cur = y;
        }
        Ok(feats)
    }

    /// Perceptual distance between two [H, W] nodes.
    pub fn distance_t(&self, g: &mut Graph, a: T, b: T) -> Result<T> {
        check_same_2d(&g.shape(a), &g.shape(b))?;
        let fa = self.features_t(g, a)?;
        let fb = self.features_t(g, b)?;
        let mut acc: Option<T> = None;
        for (xa, xb) in fa.iter().zip(fb.iter()) {
            let d = g.sub(*xa, *xb);
            let d2 = g.square(d);
            let m = g.mean_all(d2);
            acc = Some(match acc {
                Some(t) => g.add(t, m),
                None => m,
            });
        }
        Ok(g.scale(acc.unwrap(), 1.0 / fa.len() as f64))
    }

    pub fn distance(&self, a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
        let mut g = Graph::inference();
        let (an, bn) = (g.constant(a.clone().into_dyn()), g.constant(b.clone().into_dyn()));
        let d = self.distance_t(&mut g, an, bn)?;
        Ok(g.scalar_value(d))
    }
}

pub fn build_extractor(cfg: &ExtractorConfig) -> Result<PerceptualExtractor> {
    PerceptualExtractor::build(cfg)
}

// ---- total loss ----

/// Composite objective over one predicted gap.
///
/// Supervised terms (L1 + SSIM + lambda_ffl * FFL) are averaged over the
/// predicted slices; continuity terms run over the anchored sequence
/// `[I_n, pred_1..pred_{r-1}, I_{n+1}]`. `ffl_weights`, when given (one per
/// predicted slice), pins the focal weights — used by gradient checks.
pub fn total_loss_t(
    g: &mut Graph,
    preds: &[T],
    targets: &[T],
    anchors: (T, T),
    w: &LossWeights,
    p: &PerceptualExtractor,
    ffl_weights: Option<&[Array2<f64>]>,
) -> Result<T> {
    w.validate()?;
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(D2rError::invalid(
            "total_loss needs equally many predictions and targets (>= 1)",
        ));
    }
    let mut sup: Option<T> = None;
    for (i, (pr, tg)) in preds.iter().zip(targets.iter()).enumerate() {
        let mut term = l1_loss_t(g, *pr, *tg)?;
        if w.lambda_ssim != 0.0 {
            let ssim = ssim_loss_t(g, *pr, *tg)?;
            let ssim = g.scale(ssim, w.lambda_ssim);
            term = g.add(term, ssim);
        }
        if w.lambda_ffl != 0.0 {
            let ffl = focal_frequency_loss_t(g, *pr, *tg, ffl_weights.map(|ws| &ws[i]))?;
            let ffl = g.scale(ffl, w.lambda_ffl);
            term = g.add(term, ffl);
        }
        sup = Some(match sup {
            Some(acc) => g.add(acc, term),
            None => term,
        });
    }
    let sup = g.scale(sup.unwrap(), 1.0 / preds.len() as f64);
    if w.lambda_cont == 0.0 {
        return Ok(sup);
    }

    let mut seq = Vec::with_capacity(preds.len() + 2);
    seq.push(anchors.0);
    seq.extend_from_slice(preds);
    seq.push(anchors.1);
    let consist = consistency_loss_t(g, &seq, p)?;
    let smooth = smoothness_loss_t(g, &seq, p)?;
    let cont = g.add(consist, smooth);
    let cont = g.scale(cont, w.lambda_cont);
    Ok(g.add(sup, cont))
}

pub fn total_loss(
    preds: &[Array2<f64>],
    targets: &[Array2<f64>],
    anchors: (&Array2<f64>, &Array2<f64>),
    w: &LossWeights,
    p: &PerceptualExtractor,
) -> Result<f64> {
    let mut g = Graph::inference();
    let pn: Vec<T> = preds.iter().map(|s| g.constant(s.clone().into_dyn())).collect();
    let tn: Vec<T> = targets.iter().map(|s| g.constant(s.clone().into_dyn())).collect();
    let a0 = g.constant(anchors.0.clone().into_dyn());
    let a1 = g.constant(anchors.1.clone().into_dyn());
    let l = total_loss_t(&mut g, &pn, &tn, (a0, a1), w, p, None)?;
    Ok(g.scalar_value(l))
}
