//! Visual-query attention and the contrastive audio-visual loss.

use crate::autograd::Var;
use crate::config::{MmCombine, NetworkConfig};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Ctx, Init};

/// Stabiliser of the cosine denominator.
pub const COSINE_EPS: f64 = 1e-8;

/// Two attention branches whose queries come from the visual stream and
/// whose keys and values come from audio features. The positive branch uses
/// `softmax(Q_vs·K_sᵀ/√D)`, the negative branch `softmax(−Q_vn·K_nᵀ/√D)`.
#[derive(Debug, Clone, Copy)]
pub struct MmAttention {
    pub query_s: Linear,
    pub key_s: Linear,
    pub value_s: Linear,
    pub query_n: Linear,
    pub key_n: Linear,
    pub value_n: Linear,
    scale: f64,
}

/// Score matrices of the two branches, `[N, S, S]`.
#[derive(Debug, Clone, Copy)]
pub struct MmScores<'t> {
    pub positive: Var<'t>,
    pub negative: Var<'t>,
}

impl MmAttention {
    pub fn new(init: &mut Init<'_>, name: &str, cfg: &NetworkConfig) -> Self {
        let (d, dv) = (cfg.feature_dim, cfg.visual_dim);
        init.scope(name, |i| Self {
            query_s: Linear::new(i, "query_s", dv, d, true),
            key_s: Linear::new(i, "key_s", d, d, true),
            value_s: Linear::new(i, "value_s", d, d, true),
            query_n: Linear::new(i, "query_n", dv, d, true),
            key_n: Linear::new(i, "key_n", d, d, true),
            value_n: Linear::new(i, "value_n", d, d, true),
            scale: 1.0 / (d as f64).sqrt(),
        })
    }

    /// `fs`, `fn_`: `[N, S, D]`; `visual`: `[N, S, D_v]`. Returns both
    /// attended streams with their residuals.
    pub fn forward_with_scores<'t>(
        &self,
        ctx: &Ctx<'t>,
        fs: Var<'t>,
        fn_: Var<'t>,
        visual: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>, MmScores<'t>)> {
        let (s, n, v) = (fs.shape(), fn_.shape(), visual.shape());
        if s != n || v.len() != 3 || v[..2] != s[..2] {
            return Err(Error::LengthMismatch {
                what: "visual attention",
                left: s.get(1).copied().unwrap_or(0),
                right: v.get(1).copied().unwrap_or(0),
            });
        }
        let qs = self.query_s.forward(ctx, visual);
        let qn = self.query_n.forward(ctx, visual);
        let positive = qs.bmm(self.key_s.forward(ctx, fs), true).scale(self.scale).softmax();
        let negative = qn.bmm(self.key_n.forward(ctx, fn_), true).scale(-self.scale).softmax();
        let out_s = positive.bmm(self.value_s.forward(ctx, fs), false).add(fs);
        let out_n = negative.bmm(self.value_n.forward(ctx, fn_), false).add(fn_);
        Ok((out_s, out_n, MmScores { positive, negative }))
    }

    pub fn forward_pair<'t>(&self, ctx: &Ctx<'t>, fs: Var<'t>, fn_: Var<'t>, visual: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        self.forward_with_scores(ctx, fs, fn_, visual).map(|(s, n, _)| (s, n))
    }
}

/// Visual-query attention at fusion, where both branches read the same
/// audio embedding and their outputs are merged into one.
#[derive(Debug, Clone, Copy)]
pub struct FusionAttention {
    pub attention: MmAttention,
    pub combine: MmCombine,
    concat_proj: Option<Linear>,
}

impl FusionAttention {
    pub fn new(init: &mut Init<'_>, cfg: &NetworkConfig) -> Self {
        let d = cfg.feature_dim;
        Self {
            attention: MmAttention::new(init, "visual_attention", cfg),
            combine: cfg.mm_combine,
            concat_proj: (cfg.mm_combine == MmCombine::Concat).then(|| Linear::new(init, "combine_proj", 2 * d, d, true)),
        }
    }

    /// `audio`: `[B, L, D]`, `visual`: `[B, L, D_v]`; returns `[B, L, D]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, audio: Var<'t>, visual: Var<'t>) -> Result<Var<'t>> {
        let (s, n) = self.attention.forward_pair(ctx, audio, audio, visual)?;
        Ok(match self.concat_proj {
            Some(p) => p.forward(ctx, Var::concat_last(&[s, n])),
            None => s.add(n),
        })
    }
}

/// `−Σ_i [mean_t cos(M_si, V) − mean_t cos(M_ni, V)]` over block features
/// with feature vectors on the last axis.
pub fn contrastive_av_loss<'t>(speech: &[Var<'t>], noise: &[Var<'t>], visual: Var<'t>) -> Result<Var<'t>> {
    if speech.len() != noise.len() || speech.is_empty() {
        return Err(Error::MissingOutput(format!(
            "contrastive loss needs matching non-empty feature lists, got {} and {}",
            speech.len(),
            noise.len()
        )));
    }
    let mut total: Option<Var<'t>> = None;
    for (s, n) in speech.iter().zip(noise) {
        let c = s.cosine(visual, COSINE_EPS).mean().sub(n.cosine(visual, COSINE_EPS).mean());
        total = Some(match total {
            Some(t) => t.add(c),
            None => c,
        });
    }
    Ok(total.unwrap().scale(-1.0))
}
