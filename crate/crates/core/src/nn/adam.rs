//! Adam optimizer over flat parameter lists.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    /// Applies one update. `params` and `grads` must be index-aligned and
    /// keep the same order across calls.
    pub fn step(&mut self, params: &mut [&mut ArrayD<f64>], grads: &[ArrayD<f64>]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
            self.v = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            m.zip_mut_with(g, |mv, gv| {
                *mv = self.cfg.beta1 * *mv + (1.0 - self.cfg.beta1) * gv
            });
            v.zip_mut_with(g, |vv, gv| {
                *vv = self.cfg.beta2 * *vv + (1.0 - self.cfg.beta2) * gv * gv
            });
            ndarray::Zip::from(&mut **p)
                .and(&*m)
                .and(&*v)
                .for_each(|pv, mv, vv| {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    *pv -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
                });
        }
    }
}
