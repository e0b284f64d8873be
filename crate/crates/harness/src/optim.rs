//! Adam with global-norm gradient clipping.

use seanet_core::autograd::Array;
use seanet_core::params::{ParamId, ParamStore};

use crate::config::AdamConfig;

/// First and second moment estimates of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Array,
    pub v: Array,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    /// Indexed by parameter id; `None` until the parameter first gets a gradient.
    pub moments: Vec<Option<Moments>>,
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

pub fn global_norm(grads: &[(ParamId, Array)]) -> f64 {
    grads.iter().map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: usize) -> Self {
        Self { cfg, step: 0, moments: vec![None; params] }
    }

    /// Scales gradients to at most `clip` global norm, then applies one
    /// bias-corrected Adam update at `lr`.
    pub fn step(&mut self, store: &mut ParamStore, mut grads: Vec<(ParamId, Array)>, lr: f64, clip: f64) -> StepStats {
        let norm = global_norm(&grads);
        let clipped = norm > clip;
        if clipped {
            let s = clip / norm;
            for (_, g) in &mut grads {
                g.mapv_inplace(|x| x * s);
            }
        }
        self.step += 1;
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (id, g) in grads {
            let slot = self.moments[id.index()].get_or_insert_with(|| Moments {
                m: Array::zeros(g.raw_dim()),
                v: Array::zeros(g.raw_dim()),
            });
            let value = store.value_mut(id);
            ndarray::Zip::from(value)
                .and(&mut slot.m)
                .and(&mut slot.v)
                .and(&g)
                .for_each(|p, m, v, &gi| {
                    *m = b1 * *m + (1.0 - b1) * gi;
                    *v = b2 * *v + (1.0 - b2) * gi * gi;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
        StepStats { grad_norm: norm, clipped }
    }
}
