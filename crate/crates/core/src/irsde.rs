//! Mean-reverting SDE diffusion: forward statistics, the ideal-state
//! (posterior mean) recursion, maximum-likelihood training of the 2D noise
//! predictor, and reverse-time slice restoration.
//!
//! The process is `dx = lambda_t (mu - x) dt + phi_t dw` with the
//! stationarity constraint `phi_t^2 / (2 lambda_t) = delta^2` held across
//! all steps, so the terminal state is `mu + N(0, delta^2)`.

use std::path::Path;

use ndarray::{Array2, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::degradation::Stage1Pair;
use crate::error::{D2rError, Result};
use crate::nn::graph::{Graph, T as Tn};
use crate::nn::layers::{Conv2d, Linear};
use crate::nn::{Adam, AdamConfig};
use crate::resample::upsample_rows_by_factor;
use crate::volume::SliceImage;

// ---- schedule ----

/// Discretized schedule of the mean-reverting SDE. `lambda_bar[t]` is the
/// prefix integral of `lambda` up to step t (unit step), `lambda_bar[0] = 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SDESchedule {
    pub t_steps: usize,
    pub lambda_t: Vec<f64>,
    pub phi_t: Vec<f64>,
    pub lambda_bar: Vec<f64>,
    pub delta_sq: f64,
    pub gamma_t: Vec<f64>,
}

impl SDESchedule {
    /// Cosine ramp of lambda from 0.005 to 0.1 (at the reference 100 steps),
    /// rescaled by 100/T so the total reversion `lambda_bar[T]` is
    /// independent of the step count.
    pub fn cosine(t_steps: usize, delta: f64) -> Result<Self> {
        if t_steps < 2 {
            return Err(D2rError::invalid("schedule needs at least 2 steps"));
        }
        let (lo, hi) = (0.005, 0.1);
        let scale = 100.0 / t_steps as f64;
        let lambdas: Vec<f64> = (0..t_steps)
            .map(|i| {
                let u = i as f64 / (t_steps - 1) as f64;
                let ramp = 0.5 * (1.0 - (std::f64::consts::PI * u).cos());
                scale * (lo + (hi - lo) * ramp)
            })
            .collect();
        Self::from_lambdas(lambdas, delta)
    }

    /// Constant lambda; `lambda * t_steps` must exceed 4.7 for a valid
    /// near-stationary terminal state.
    pub fn constant(t_steps: usize, lambda: f64, delta: f64) -> Result<Self> {
        Self::from_lambdas(vec![lambda; t_steps], delta)
    }

    fn from_lambdas(lambda_t: Vec<f64>, delta: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(D2rError::invalid("delta must be positive"));
        }
        let delta_sq = delta * delta;
        let mut lambda_bar = Vec::with_capacity(lambda_t.len() + 1);
        lambda_bar.push(0.0);
        for l in &lambda_t {
            lambda_bar.push(lambda_bar.last().unwrap() + l);
        }
        let phi_t = lambda_t.iter().map(|l| (2.0 * l * delta_sq).sqrt()).collect();
        let sched = SDESchedule {
            t_steps: lambda_t.len(),
            gamma_t: vec![1.0; lambda_t.len()],
            lambda_t,
            phi_t,
            lambda_bar,
            delta_sq,
        };
        sched.validate()?;
        Ok(sched)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.t_steps;
        if t == 0
            || self.lambda_t.len() != t
            || self.phi_t.len() != t
            || self.gamma_t.len() != t
            || self.lambda_bar.len() != t + 1
        {
            return Err(D2rError::invalid("schedule array lengths inconsistent"));
        }
        if !(self.delta_sq > 0.0) {
            return Err(D2rError::invalid("delta_sq must be positive"));
        }
        if self.lambda_bar[0] != 0.0 {
            return Err(D2rError::invalid("lambda_bar[0] must be 0"));
        }
        for i in 0..t {
            if !(self.lambda_t[i] > 0.0) || !(self.gamma_t[i] > 0.0) {
                return Err(D2rError::invalid("lambda_t and gamma_t must be positive"));
            }
            let stat = self.phi_t[i] * self.phi_t[i] / (2.0 * self.lambda_t[i]);
            if (stat - self.delta_sq).abs() > 1e-9 * self.delta_sq.max(1e-12) {
                return Err(D2rError::invalid(format!(
                    "stationarity violated at step {i}: phi^2/(2 lambda) = {stat} != {}",
                    self.delta_sq
                )));
            }
            if self.lambda_bar[i + 1] <= self.lambda_bar[i] {
                return Err(D2rError::invalid("lambda_bar must be strictly increasing"));
            }
        }
        let tail = (-self.lambda_bar[t]).exp();
        if tail >= 0.01 {
            return Err(D2rError::invalid(format!(
                "terminal state not near-stationary: exp(-lambda_bar[T]) = {tail:.4} >= 0.01"
            )));
        }
        Ok(())
    }

    fn check_t(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.t_steps {
            return Err(D2rError::index(format!(
                "step {t} outside [{min}, {}]",
                self.t_steps
            )));
        }
        Ok(())
    }
}

// ---- forward statistics ----

/// `m_t = mu + (x0 - mu) exp(-lambda_bar_t)`.
pub fn state_mean(
    x0: &Array2<f64>,
    mu: &Array2<f64>,
    sched: &SDESchedule,
    t: usize,
) -> Result<Array2<f64>> {
    sched.check_t(t, 0)?;
    if x0.dim() != mu.dim() {
        return Err(D2rError::shape("x0 and mu must share a shape"));
    }
    let e = (-sched.lambda_bar[t]).exp();
    Ok(mu + &((x0 - mu) * e))
}

/// `n_t = delta^2 (1 - exp(-2 lambda_bar_t))`.
pub fn state_var(sched: &SDESchedule, t: usize) -> Result<f64> {
    sched.check_t(t, 0)?;
    Ok(sched.delta_sq * (1.0 - (-2.0 * sched.lambda_bar[t]).exp()))
}

fn standard_normal_like(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| StandardNormal.sample(rng))
}

/// Samples `x_t = m_t + sqrt(n_t) sigma_t`; returns both the state and the
/// exact standard-normal draw (the training target).
pub fn forward_sample(
    x0: &Array2<f64>,
    mu: &Array2<f64>,
    sched: &SDESchedule,
    t: usize,
    seed: u64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    sched.check_t(t, 1)?;
    let m = state_mean(x0, mu, sched, t)?;
    let n = state_var(sched, t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = standard_normal_like(x0.dim(), &mut rng);
    Ok((&m + &(&sigma * n.sqrt()), sigma))
}

/// `x_T ~ mu + N(0, delta^2)` — the reverse-process start.
pub fn terminal_state(mu: &Array2<f64>, sched: &SDESchedule, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = standard_normal_like(mu.dim(), &mut rng);
    mu + &(&noise * sched.delta_sq.sqrt())
}

fn posterior_coeffs(sched: &SDESchedule, t: usize) -> (f64, f64) {
    // lambda_hat_t = (1 - e^{-2 lb_{t-1}}) / (1 - e^{-2 lb_t});
    // lambda_prime_t = lb_t - lb_{t-1}.
    let lb_prev = sched.lambda_bar[t - 1];
    let lb = sched.lambda_bar[t];
    let lhat = (1.0 - (-2.0 * lb_prev).exp()) / (1.0 - (-2.0 * lb).exp());
    let lprime = lb - lb_prev;
    (lhat, lprime)
}

/// Posterior mean `E[x_{t-1} | x_t, x0]` of the Gauss-Markov process:
/// `mu + lhat e^{-lprime} (x_t - mu) + e^{-lb_{t-1}} (1 - lhat e^{-2 lprime}) (x0 - mu)`.
pub fn ideal_prev_state(
    x_t: &Array2<f64>,
    x0: &Array2<f64>,
    mu: &Array2<f64>,
    sched: &SDESchedule,
    t: usize,
) -> Result<Array2<f64>> {
    sched.check_t(t, 1)?;
    if x_t.dim() != x0.dim() || x0.dim() != mu.dim() {
        return Err(D2rError::shape("ideal_prev_state inputs must share a shape"));
    }
    let (lhat, lprime) = posterior_coeffs(sched, t);
    let a = lhat * (-lprime).exp();
    let b = (-sched.lambda_bar[t - 1]).exp() * (1.0 - lhat * (-2.0 * lprime).exp());
    Ok(mu + &((x_t - mu) * a) + &((x0 - mu) * b))
}

/// Posterior variance `Var[x_{t-1} | x_t, x0] = n_{t-1} (1 - lhat e^{-2 lprime})`.
pub fn posterior_var(sched: &SDESchedule, t: usize) -> Result<f64> {
    sched.check_t(t, 1)?;
    let (lhat, lprime) = posterior_coeffs(sched, t);
    Ok(state_var(sched, t - 1)? * (1.0 - lhat * (-2.0 * lprime).exp()))
}

// ---- noise predictor ----

/// Anything that estimates the standard-normal noise in `x_t`.
pub trait NoiseModel {
    fn predict(
        &self,
        x_t: &Array2<f64>,
        mu: &Array2<f64>,
        t: usize,
        sched: &SDESchedule,
    ) -> Result<Array2<f64>>;
}

/// Conditional U-Net size parameters. The default (base 32, 4 scales) is the
/// full-size model; tests and desk-scale runs shrink it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub scales: usize,
    pub time_embed_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            base_channels: 32,
            scales: 4,
            time_embed_dim: 32,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.scales == 0 {
            return Err(D2rError::invalid("U-Net needs >= 1 channel and scale"));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(D2rError::invalid("time_embed_dim must be even and >= 2"));
        }
        Ok(())
    }

    /// Spatial dims must be divisible by this for the down/up path to close.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.scales - 1)
    }
}

struct EncBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    time: Linear,
}

struct DecBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    time: Linear,
}

/// Small conditional U-Net over `concat(x_t, mu)` with sinusoidal step
/// embeddings injected per stage as channel biases.
pub struct UNet2d {
    pub cfg: UNetConfig,
    stem: Conv2d,
    enc: Vec<EncBlock>,
    dec: Vec<DecBlock>,
    head: Conv2d,
}

fn channels(cfg: &UNetConfig, s: usize) -> usize {
    cfg.base_channels << s
}

impl UNet2d {
    pub fn new(cfg: &UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Conv2d::new(&mut rng, 2, channels(cfg, 0), 3, 1, 1);
        let mut enc = Vec::with_capacity(cfg.scales);
        for s in 0..cfg.scales {
            let cin = if s == 0 {
                channels(cfg, 0)
            } else {
                channels(cfg, s - 1)
            };
            let c = channels(cfg, s);
            enc.push(EncBlock {
                conv1: Conv2d::new(&mut rng, cin, c, 3, 1, 1),
                conv2: Conv2d::new(&mut rng, c, c, 3, 1, 1),
                time: Linear::new(&mut rng, cfg.time_embed_dim, c),
            });
        }
        let mut dec = Vec::with_capacity(cfg.scales.saturating_sub(1));
        for s in (0..cfg.scales - 1).rev() {
            let c = channels(cfg, s);
            let cin = channels(cfg, s + 1) + c; // upsampled + skip
            dec.push(DecBlock {
                conv1: Conv2d::new(&mut rng, cin, c, 3, 1, 1),
                conv2: Conv2d::new(&mut rng, c, c, 3, 1, 1),
                time: Linear::new(&mut rng, cfg.time_embed_dim, c),
            });
        }
        // Zero-initialized head: an untrained model predicts zero noise.
        let head = Conv2d::zeroed(channels(cfg, 0), 1, 3, 1, 1);
        Ok(UNet2d {
            cfg: cfg.clone(),
            stem,
            enc,
            dec,
            head,
        })
    }

    fn time_embedding(&self, t: usize) -> ArrayD<f64> {
        let e = self.cfg.time_embed_dim;
        let half = e / 2;
        let mut v = vec![0.0; e];
        for k in 0..half {
            let freq = (10_000f64).powf(-(k as f64) / half.max(1) as f64);
            let ang = t as f64 * freq;
            v[2 * k] = ang.sin();
            v[2 * k + 1] = ang.cos();
        }
        ArrayD::from_shape_vec(ndarray::IxDyn(&[1, e]), v).unwrap()
    }

    /// Builds the graph forward pass; returns the output node (the predicted
    /// clean-image residual `r`, so `xhat0 = mu + r`) and the bound parameter
    /// ids in [`UNet2d::params_mut`] order. `noise_scale` (`sqrt(n_t)`)
    /// normalizes the state channel so the input statistics are
    /// step-independent.
    pub fn forward_t(
        &self,
        g: &mut Graph,
        x_t: &Array2<f64>,
        mu: &Array2<f64>,
        t: usize,
        noise_scale: f64,
    ) -> Result<(Tn, Vec<Tn>)> {
        if x_t.dim() != mu.dim() {
            return Err(D2rError::shape("x_t and mu must share a shape"));
        }
        let (h, w) = x_t.dim();
        let m = self.cfg.spatial_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(D2rError::shape(format!(
                "U-Net input dims ({h}, {w}) must be divisible by {m}"
            )));
        }
        if !(noise_scale > 0.0) {
            return Err(D2rError::invalid("noise_scale must be positive"));
        }
        let mut ids = Vec::new();
        let resid = (x_t - mu) / noise_scale;
        let xn = g.constant(resid.into_dyn());
        let mn = g.constant(mu.clone().into_dyn());
        let xr = g.reshape(xn, &[1, 1, h, w]);
        let mr = g.reshape(mn, &[1, 1, h, w]);
        let mut cur = g.concat(1, &[xr, mr]);
        let temb = g.constant(self.time_embedding(t));

        let stem = self.stem.bind(g, &mut ids);
        cur = stem.fwd(g, cur);
        cur = g.silu(cur);

        let mut skips = Vec::new();
        for (s, blk) in self.enc.iter().enumerate() {
            let c1 = blk.conv1.bind(g, &mut ids);
            let c2 = blk.conv2.bind(g, &mut ids);
            let tl = blk.time.bind(g, &mut ids);
            cur = c1.fwd(g, cur);
            let tb = tl.fwd(g, temb); // [1, C]
            cur = g.bc_add_channel(cur, tb);
            cur = g.silu(cur);
            cur = c2.fwd(g, cur);
            cur = g.silu(cur);
            if s + 1 < self.enc.len() {
                skips.push(cur);
                cur = g.avg_pool2d(cur, 2);
            }
        }
        for blk in &self.dec {
            let c1 = blk.conv1.bind(g, &mut ids);
            let c2 = blk.conv2.bind(g, &mut ids);
            let tl = blk.time.bind(g, &mut ids);
            let up = g.upsample_nearest2d(cur);
            let skip = skips.pop().expect("skip stack");
            cur = g.concat(1, &[up, skip]);
            cur = c1.fwd(g, cur);
            let tb = tl.fwd(g, temb);
            cur = g.bc_add_channel(cur, tb);
            cur = g.silu(cur);
            cur = c2.fwd(g, cur);
            cur = g.silu(cur);
        }
        let head = self.head.bind(g, &mut ids);
        cur = head.fwd(g, cur);
        let out = g.reshape(cur, &[h, w]);
        Ok((out, ids))
    }

    fn params_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        let mut v: Vec<&mut ArrayD<f64>> = Vec::new();
        v.push(&mut self.stem.w);
        v.push(&mut self.stem.b);
        for blk in &mut self.enc {
            v.push(&mut blk.conv1.w);
            v.push(&mut blk.conv1.b);
            v.push(&mut blk.conv2.w);
            v.push(&mut blk.conv2.b);
            v.push(&mut blk.time.w);
            v.push(&mut blk.time.b);
        }
        for blk in &mut self.dec {
            v.push(&mut blk.conv1.w);
            v.push(&mut blk.conv1.b);
            v.push(&mut blk.conv2.w);
            v.push(&mut blk.conv2.b);
            v.push(&mut blk.time.w);
            v.push(&mut blk.time.b);
        }
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

/// Trained (or explicitly force-marked) noise predictor.
pub struct NoisePredictor {
    pub unet: UNet2d,
    trained: bool,
}

impl NoisePredictor {
    pub fn new(cfg: &UNetConfig, seed: u64) -> Result<Self> {
        Ok(NoisePredictor {
            unet: UNet2d::new(cfg, seed)?,
            trained: false,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Marks an untrained model usable for restoration — baselines and tests
    /// only; the zero-initialized head then predicts zero noise everywhere.
    pub fn assume_trained(mut self) -> Self {
        self.trained = true;
        self
    }
}

impl NoiseModel for NoisePredictor {
    /// The U-Net predicts the clean-image residual `r` (`xhat0 = mu + r`);
    /// the noise estimate is derived from it:
    /// `sigma_hat = (x_t - mu - r e^{-lb_t}) / sqrt(n_t)`.
    fn predict(
        &self,
        x_t: &Array2<f64>,
        mu: &Array2<f64>,
        t: usize,
        sched: &SDESchedule,
    ) -> Result<Array2<f64>> {
        sched.check_t(t, 1)?;
        let n_t = state_var(sched, t)?;
        let scale = n_t.sqrt();
        let mut g = Graph::inference();
        let (out, _) = self.unet.forward_t(&mut g, x_t, mu, t, scale)?;
        let r: Array2<f64> = g
            .value(out)
            .clone()
            .into_dimensionality()
            .expect("predictor output is 2D");
        let e = (-sched.lambda_bar[t]).exp();
        Ok((x_t - mu - &(&r * e)) / scale)
    }
}

// ---- loss ----

/// Graph loss of one reverse step: plug the estimated noise into
/// `xhat0 = mu + (x_t - mu - sqrt(n_t) eps) e^{lb_t}`, take the posterior
/// mean from `xhat0`, and penalize its L1 distance to the ideal state
/// (posterior mean from the true x0), weighted by `gamma_t`. The two
/// posterior means differ only in the x0 slot, so the loss reduces to
/// `gamma_t * mean | k (xhat0 - x0) |` with `k` the x0 coefficient.
pub fn diffusion_step_loss_t(
    g: &mut Graph,
    eps_hat: Tn,
    x_t: &Array2<f64>,
    x0: &Array2<f64>,
    mu: &Array2<f64>,
    sched: &SDESchedule,
    t: usize,
) -> Result<Tn> {
    sched.check_t(t, 1)?;
    if g.shape(eps_hat) != [x0.nrows(), x0.ncols()] {
        return Err(D2rError::shape("predictor output shape mismatch"));
    }
    let e_lb = sched.lambda_bar[t].exp();
    let n_t = state_var(sched, t)?;
    let (lhat, lprime) = posterior_coeffs(sched, t);
    let k = (-sched.lambda_bar[t - 1]).exp() * (1.0 - lhat * (-2.0 * lprime).exp());
    // xhat0 - x0 = [mu + (x_t - mu) e^{lb} - x0] - sqrt(n_t) e^{lb} eps_hat
    let fixed = mu + &((x_t - mu) * e_lb) - x0;
    let fixed = g.constant(fixed.into_dyn());
    let scaled_eps = g.scale(eps_hat, n_t.sqrt() * e_lb);
    let diff = g.sub(fixed, scaled_eps);
    let resid = g.scale(diff, k);
    let l1 = g.abs(resid);
    let m = g.mean_all(l1);
    Ok(g.scale(m, sched.gamma_t[t - 1]))
}

/// Monte-Carlo estimate of the training objective on a batch of
/// (degraded-at-target-resolution, clean) pairs.
pub fn diffusion_loss(
    model: &dyn NoiseModel,
    batch: &[(Array2<f64>, Array2<f64>)],
    sched: &SDESchedule,
    seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(D2rError::invalid("diffusion_loss needs a nonempty batch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for (mu, x0) in batch {
        let t = rng.gen_range(1..=sched.t_steps);
        let sample_seed: u64 = rng.gen();
        let (x_t, _) = forward_sample(x0, mu, sched, t, sample_seed)?;
        let eps_hat = model.predict(&x_t, mu, t, sched)?;
        if eps_hat.dim() != x0.dim() {
            return Err(D2rError::shape("predictor output shape mismatch"));
        }
        let mut g = Graph::inference();
        let e = g.constant(eps_hat.into_dyn());
        let l = diffusion_step_loss_t(&mut g, e, &x_t, x0, mu, sched, t)?;
        total += g.scalar_value(l);
    }
    Ok(total / batch.len() as f64)
}

// ---- training ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub val_every: usize,
    pub adam: AdamConfig,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            steps: 2000,
            val_every: 50,
            adam: AdamConfig {
                lr: 1e-3,
                ..Default::default()
            },
        }
    }
}

/// Trains the noise predictor; returns the parameter state with the best
/// validation loss. Deterministic per seed.
pub fn train_diffusion(
    pairs: &[Stage1Pair],
    sched: &SDESchedule,
    predictor_config: &UNetConfig,
    train_config: &DiffusionTrainConfig,
    seed: u64,
) -> Result<NoisePredictor> {
    if pairs.is_empty() {
        return Err(D2rError::invalid("train_diffusion needs a nonempty training set"));
    }
    sched.validate()?;
    let data: Vec<(Array2<f64>, Array2<f64>)> = pairs
        .iter()
        .map(|(deg, clean)| (deg.data.clone(), clean.data.clone()))
        .collect();
    // Hold out ~20% for validation when there is enough data; otherwise the
    // training pairs double as the validation set.
    let n_val = if data.len() >= 5 { data.len() / 5 } else { 0 };
    let (train, val): (&[_], &[_]) = if n_val > 0 {
        data.split_at(data.len() - n_val)
    } else {
        (&data[..], &data[..])
    };

    let mut predictor = NoisePredictor::new(predictor_config, seed)?;
    let mut adam = Adam::new(train_config.adam.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d1ff);
    let val_seed: u64 = rng.gen();

    let mut best_loss = diffusion_loss(&predictor, val, sched, val_seed)?;
    let mut best_params = predictor.unet.params_vec();

    for step in 0..train_config.steps {
        let (mu, x0) = &train[rng.gen_range(0..train.len())];
        let t = rng.gen_range(1..=sched.t_steps);
        let sample_seed: u64 = rng.gen();
        let (x_t, _) = forward_sample(x0, mu, sched, t, sample_seed)?;

        let n_t = state_var(sched, t)?;
        let scale = n_t.sqrt();
        let mut g = Graph::new();
        let (resid_hat, ids) = predictor.unet.forward_t(&mut g, &x_t, mu, t, scale)?;
        // Derive the noise estimate from the predicted clean-image residual:
        // eps_hat = (x_t - mu - resid_hat e^{-lb_t}) / sqrt(n_t).
        let e_lb = (-sched.lambda_bar[t]).exp();
        let xt_minus_mu = g.constant((&x_t - mu).into_dyn());
        let scaled_resid = g.scale(resid_hat, e_lb);
        let diff = g.sub(xt_minus_mu, scaled_resid);
        let eps_hat = g.scale(diff, 1.0 / scale);
        let loss = diffusion_step_loss_t(&mut g, eps_hat, &x_t, x0, mu, sched, t)?;
        let grads = g.backward(loss);
        let grad_arrays: Vec<ArrayD<f64>> = ids
            .iter()
            .map(|id| {
                grads[id.0]
                    .clone()
                    .unwrap_or_else(|| ArrayD::zeros(g.value(*id).raw_dim()))
            })
            .collect();
        let mut params = predictor.unet.params_mut();
        adam.step(&mut params, &grad_arrays);

        if (step + 1) % train_config.val_every == 0 || step + 1 == train_config.steps {
            let vl = diffusion_loss(&predictor, val, sched, val_seed)?;
            if vl < best_loss {
                best_loss = vl;
                best_params = predictor.unet.params_vec();
            }
        }
    }
    predictor.unet.set_params(&best_params)?;
    predictor.trained = true;
    Ok(predictor)
}

// ---- restoration ----

fn pad_to_multiple(img: &Array2<f64>, m: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    let hp = h.div_ceil(m) * m;
    let wp = w.div_ceil(m) * m;
    if hp == h && wp == w {
        return img.clone();
    }
    // Edge replication keeps border statistics intact.
    Array2::from_shape_fn((hp, wp), |(i, j)| img[[i.min(h - 1), j.min(w - 1)]])
}

/// Reverse-diffusion restoration of one degraded (row-subsampled) slice.
///
/// The condition `mu` is the cubic row-upsample of the input to the target
/// height `r (H_L - 1) + 1`; the reverse chain runs all T steps with
/// ancestral posterior noise, deterministic per seed.
pub fn restore_slice(
    predictor: &NoisePredictor,
    degraded: &SliceImage,
    sched: &SDESchedule,
    r: usize,
    seed: u64,
) -> Result<SliceImage> {
    if !predictor.trained {
        return Err(D2rError::Untrained(
            "noise predictor has not been trained; run train_diffusion first".into(),
        ));
    }
    if r < 2 {
        return Err(D2rError::invalid("restoration factor r must be >= 2"));
    }
    if degraded.height() < 2 {
        return Err(D2rError::invalid("degraded slice needs >= 2 rows"));
    }
    sched.validate()?;
    let target_h = r * (degraded.height() - 1) + 1;
    let w = degraded.width();
    let mu = upsample_rows_by_factor(&degraded.data, r, 0, target_h).mapv(|v| v.clamp(0.0, 1.0));

    let m = predictor.unet.cfg.spatial_multiple();
    let mu_pad = pad_to_multiple(&mu, m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = standard_normal_like(mu_pad.dim(), &mut rng);
    let mut x = &mu_pad + &(&noise * sched.delta_sq.sqrt());

    for t in (1..=sched.t_steps).rev() {
        let eps_hat = predictor.predict(&x, &mu_pad, t, sched)?;
        let e_lb = sched.lambda_bar[t].exp();
        let n_t = state_var(sched, t)?;
        let xhat0 = &mu_pad + &((&x - &mu_pad - &(&eps_hat * n_t.sqrt())) * e_lb);
        let mean = ideal_prev_state(&x, &xhat0, &mu_pad, sched, t)?;
        if t > 1 {
            let pv = posterior_var(sched, t)?;
            let z = standard_normal_like(mu_pad.dim(), &mut rng);
            x = &mean + &(&z * pv.sqrt());
        } else {
            x = mean;
        }
    }

    let out = Array2::from_shape_fn((target_h, w), |(i, j)| x[[i, j]].clamp(0.0, 1.0));
    SliceImage::new(out, degraded.source_plane, degraded.source_index)
}

// ---- checkpointing ----

#[derive(Serialize, Deserialize)]
struct DiffusionManifest {
    config: UNetConfig,
    schedule: SDESchedule,
    trained: bool,
    seed: u64,
}

/// Writes `<prefix>.bin` (parameters) and `<prefix>.json` (manifest).
pub fn save_diffusion_checkpoint(
    predictor: &mut NoisePredictor,
    sched: &SDESchedule,
    seed: u64,
    prefix: &Path,
) -> Result<()> {
    let params = predictor.unet.params_vec();
    let refs: Vec<&ArrayD<f64>> = params.iter().collect();
    std::fs::write(prefix.with_extension("bin"), crate::nn::blob::write_params(&refs))?;
    let manifest = DiffusionManifest {
        config: predictor.unet.cfg.clone(),
        schedule: sched.clone(),
        trained: predictor.trained,
        seed,
    };
    std::fs::write(
        prefix.with_extension("json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_diffusion_checkpoint(prefix: &Path) -> Result<(NoisePredictor, SDESchedule)> {
    let manifest: DiffusionManifest =
        serde_json::from_str(&std::fs::read_to_string(prefix.with_extension("json"))?)?;
    manifest.schedule.validate()?;
    let bytes = std::fs::read(prefix.with_extension("bin"))?;
    let params = crate::nn::blob::read_params(&bytes)?;
    let mut predictor = NoisePredictor::new(&manifest.config, manifest.seed)?;
    predictor.unet.set_params(&params)?;
    predictor.trained = manifest.trained;
    Ok((predictor, manifest.schedule))
}
