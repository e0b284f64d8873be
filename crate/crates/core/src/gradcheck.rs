//! Finite-difference verification of the network's analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Array, Tape};
use crate::error::Result;
use crate::network::Network;
use crate::params::{Ctx, ParamId};

/// Central-difference step.
pub const STEP: f64 = 1e-6;

/// Denominator floor of the relative error, so entries whose true gradient
/// is zero are compared absolutely.
pub const ERROR_FLOOR: f64 = 1e-8;

/// One compared entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradSample {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub inputs: Vec<GradSample>,
    pub params: Vec<GradSample>,
}

impl GradCheckReport {
    fn worst(samples: &[GradSample]) -> Option<&GradSample> {
        samples.iter().max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }

    pub fn worst_input(&self) -> Option<&GradSample> {
        Self::worst(&self.inputs)
    }

    pub fn worst_param(&self) -> Option<&GradSample> {
        Self::worst(&self.params)
    }

    pub fn max_error(&self) -> f64 {
        self.inputs.iter().chain(&self.params).map(|s| s.relative_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

/// Problem instance: `[B, T]` mixture, aligned `[B, L, D_v]` visual
/// embedding and `[B, T]` references.
pub struct GradCheckInputs<'a> {
    pub mixture: &'a Array,
    pub visual: &'a Array,
    pub target: &'a Array,
    pub noise: &'a Array,
}

fn total_loss(net: &Network, x: &GradCheckInputs<'_>, mixture: &Array, visual: &Array) -> Result<f64> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &net.store, true, false);
    let pass = net.forward_vars(&ctx, ctx.constant(mixture.clone()), ctx.constant(visual.clone()))?;
    Ok(net.loss(&pass, x.target, x.noise)?.total.item())
}

/// Compares analytic gradients of the total training loss against central
/// differences for every input entry and a seeded `fraction` of the
/// trainable parameter entries.
pub fn check_network_gradients(net: &Network, x: &GradCheckInputs<'_>, fraction: f64, seed: u64) -> Result<GradCheckReport> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &net.store, true, true);
    let (mix, vis) = (tape.leaf(x.mixture.clone()), tape.leaf(x.visual.clone()));
    let pass = net.forward_vars(&ctx, mix, vis)?;
    let loss = net.loss(&pass, x.target, x.noise)?.total;
    let mut grads = tape.backward(loss);
    let zeros = |a: &Array| Array::zeros(a.raw_dim());
    let g_mix = grads.get(mix).cloned().unwrap_or_else(|| zeros(x.mixture));
    let g_vis = grads.get(vis).cloned().unwrap_or_else(|| zeros(x.visual));
    let param_grads: std::collections::HashMap<ParamId, Array> = ctx.param_grads(&mut grads).into_iter().collect();

    let mut report = GradCheckReport::default();
    for (label, base, g, is_mix) in [("mixture", x.mixture, &g_mix, true), ("visual", x.visual, &g_vis, false)] {
        for (i, &a) in g.iter().enumerate() {
            let eval = |d: f64| {
                let mut p = base.clone();
                p.as_slice_mut().unwrap()[i] += d;
                if is_mix {
                    total_loss(net, x, &p, x.visual)
                } else {
                    total_loss(net, x, x.mixture, &p)
                }
            };
            let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            report.inputs.push(GradSample {
                name: format!("{label}[{i}]"),
                analytic: a,
                numeric,
                relative_error: relative_error(a, numeric),
            });
        }
    }

    let entries: Vec<(ParamId, usize)> = net
        .store
        .trainable_ids()
        .into_iter()
        .flat_map(|id| (0..net.store.value(id).len()).map(move |k| (id, k)))
        .collect();
    let count = ((entries.len() as f64 * fraction).ceil() as usize).clamp(1, entries.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, entries.len(), count).into_vec();
    picked.sort_unstable();
    let mut probe = net.clone();
    for e in picked {
        let (id, k) = entries[e];
        let a = param_grads.get(&id).map_or(0.0, |g| g.as_slice().unwrap()[k]);
        let original = net.store.value(id).as_slice().unwrap()[k];
        let mut eval = |d: f64| {
            probe.store.value_mut(id).as_slice_mut().unwrap()[k] = original + d;
            total_loss(&probe, x, x.mixture, x.visual)
        };
        let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
        probe.store.value_mut(id).as_slice_mut().unwrap()[k] = original;
        report.params.push(GradSample {
            name: format!("{}[{k}]", net.store.entry(id).name),
            analytic: a,
            numeric,
            relative_error: relative_error(a, numeric),
        });
    }
    Ok(report)
}
