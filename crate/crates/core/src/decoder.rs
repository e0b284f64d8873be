//! Mask heads, the shared waveform decoder and the training loss.

use crate::autograd::{Array, Var};
use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::metrics::EPS;
use crate::nn::{Linear, PRelu};
use crate::params::{Ctx, Init};

/// PReLU and a linear map from `D` to `D_a`, producing a mask for the
/// audio embedding. No output nonlinearity: masks may be signed.
#[derive(Debug, Clone, Copy)]
pub struct MaskHead {
    act: PRelu,
    proj: Linear,
}

impl MaskHead {
    pub fn new(init: &mut Init<'_>, name: &str, cfg: &NetworkConfig) -> Self {
        init.scope(name, |i| Self {
            act: PRelu::new(i, "act"),
            proj: Linear::new(i, "proj", cfg.feature_dim, cfg.audio_dim, true),
        })
    }

    /// `[B, L, D]` to `[B, L, D_a]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, m: Var<'t>) -> Var<'t> {
        self.proj.forward(ctx, self.act.forward(ctx, m))
    }
}

/// Bias-free linear map from `D_a` to one window of samples followed by
/// normalised overlap-add at the encoder hop.
#[derive(Debug, Clone, Copy)]
pub struct Decoder {
    pub weight: crate::params::ParamId,
    pub window: usize,
    pub hop: usize,
}

impl Decoder {
    pub fn new(init: &mut Init<'_>, cfg: &NetworkConfig) -> Self {
        Self {
            weight: init.scope("decoder", |i| i.xavier("weight", cfg.encoder_window, cfg.audio_dim)),
            window: cfg.encoder_window,
            hop: cfg.encoder_hop,
        }
    }

    /// `[B, L, D_a]` to `[B, out_len]`; samples past the last frame are zero.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, masked: Var<'t>, out_len: usize) -> Var<'t> {
        masked.matmul_t(ctx.param(self.weight)).overlap_add(self.hop, out_len, true)
    }

    /// Applies `mask` (`[B, L, D_a]`) to the encoder output and decodes.
    pub fn mask_and_decode<'t>(&self, ctx: &Ctx<'t>, mask: Var<'t>, encoded: Var<'t>, out_len: usize) -> Result<Var<'t>> {
        if mask.shape() != encoded.shape() {
            return Err(Error::Shape(format!("mask {:?} vs embedding {:?}", mask.shape(), encoded.shape())));
        }
        Ok(self.forward(ctx, mask.mul(encoded), out_len))
    }
}

/// Per-block masks and decoded signals for `i = 0..=R`. Noise lists are
/// empty for speech-only variants.
pub struct BlockOutputs<'t> {
    pub speech_masks: Vec<Var<'t>>,
    pub noise_masks: Vec<Var<'t>>,
    /// `[B, T]` each.
    pub speech: Vec<Var<'t>>,
    pub noise: Vec<Var<'t>>,
}

impl<'t> BlockOutputs<'t> {
    pub fn blocks(&self) -> usize {
        self.speech.len().saturating_sub(1)
    }

    /// The final speech estimate.
    pub fn estimate(&self) -> Option<Var<'t>> {
        self.speech.last().copied()
    }
}

/// Loss terms as assembled.
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub main: Var<'t>,
    pub speech_aux: Vec<Var<'t>>,
    pub noise_aux: Vec<Var<'t>>,
    pub contrastive: Option<Var<'t>>,
}

/// Negative SI-SDR averaged over the batch.
pub fn si_sdr_loss<'t>(est: Var<'t>, reference: &Array) -> Result<Var<'t>> {
    if est.shape() != reference.shape() {
        return Err(Error::Shape(format!("estimate {:?} vs reference {:?}", est.shape(), reference.shape())));
    }
    Ok(est.si_sdr(reference, EPS).mean().scale(-1.0))
}

fn sum<'t>(terms: &[Var<'t>]) -> Option<Var<'t>> {
    terms.iter().copied().reduce(|a, b| a.add(b))
}

/// `L = l(ŝ_R, s) + β·[Σ_{i<R} l(ŝ_i, s) + Σ_{i≤R} l(n̂_i, n)]`.
/// With `expect_noise` the noise list must hold `R + 1` outputs.
pub fn total_loss<'t>(outs: &BlockOutputs<'t>, target: &Array, noise: &Array, beta: f64, expect_noise: bool) -> Result<LossTerms<'t>> {
    let r = outs.blocks();
    let last = outs.estimate().ok_or_else(|| Error::MissingOutput("no speech outputs".into()))?;
    if expect_noise && outs.noise.len() != r + 1 {
        return Err(Error::MissingOutput(format!("expected {} noise outputs, got {}", r + 1, outs.noise.len())));
    }
    let main = si_sdr_loss(last, target)?;
    let speech_aux = outs.speech[..r].iter().map(|&s| si_sdr_loss(s, target)).collect::<Result<Vec<_>>>()?;
    let noise_aux = outs.noise.iter().map(|&n| si_sdr_loss(n, noise)).collect::<Result<Vec<_>>>()?;
    let total = if beta == 0.0 {
        main
    } else {
        let aux = speech_aux.iter().chain(&noise_aux).copied().collect::<Vec<_>>();
        match sum(&aux) {
            Some(a) => main.add(a.scale(beta)),
            None => main,
        }
    };
    Ok(LossTerms { total, main, speech_aux, noise_aux, contrastive: None })
}
