//! Dual-path units, reverse attention and the parallel speech/noise blocks.

use crate::autograd::Var;
use crate::config::{AttentionMode, NetworkConfig};
use crate::error::{Error, Result};
use crate::multimodal::MmAttention;
use crate::nn::{BiLstm, GroupNorm, Linear};
use crate::params::{Ctx, Init};

/// Score matrices of one attention branch, each `[N, S, S]`.
#[derive(Debug, Clone, Copy)]
pub struct BranchScores<'t> {
    /// `softmax(QKᵀ/√D)`, when the mode uses the branch's own query.
    pub plus: Option<Var<'t>>,
    /// Softmax of the cross-query logits with the mode's sign.
    pub cross: Option<Var<'t>>,
    /// The matrix applied to the values.
    pub combined: Var<'t>,
}

/// Scores of a speech/noise attention pair along one axis.
#[derive(Debug, Clone, Copy)]
pub struct AttentionScores<'t> {
    pub axis: ChunkAxis,
    pub speech: BranchScores<'t>,
    pub noise: Option<BranchScores<'t>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkAxis {
    /// Within a chunk, sequences of length `K`.
    Intra,
    /// Across chunks, sequences of length `P`.
    Inter,
}

/// Value, query, key and cross-query maps of one branch.
#[derive(Debug, Clone, Copy)]
pub struct AttentionBranch {
    pub value: Linear,
    pub query: Option<Linear>,
    pub key: Linear,
    pub cross_query: Option<Linear>,
    pub mode: AttentionMode,
    scale: f64,
}

impl AttentionBranch {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, mode: AttentionMode) -> Self {
        init.scope(name, |i| Self {
            value: Linear::new(i, "value", dim, dim, true),
            query: mode.uses_self_query().then(|| Linear::new(i, "query", dim, dim, true)),
            key: Linear::new(i, "key", dim, dim, true),
            cross_query: mode.uses_cross_query().then(|| Linear::new(i, "cross_query", dim, dim, true)),
            mode,
            scale: 1.0 / (dim as f64).sqrt(),
        })
    }

    /// Attends over `own` (`[N, S, D]`) with the cross query taken from
    /// `other`; returns `A·V + own` and the scores.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, own: Var<'t>, other: Var<'t>) -> (Var<'t>, BranchScores<'t>) {
        let key = self.key.forward(ctx, own);
        let value = self.value.forward(ctx, own);
        let self_logits = self.query.map(|q| q.forward(ctx, own).bmm(key, true).scale(self.scale));
        let cross_logits = self.cross_query.map(|q| q.forward(ctx, other).bmm(key, true).scale(self.scale));
        let (plus, cross, combined) = match self.mode {
            AttentionMode::SelfOnly => {
                let p = self_logits.unwrap().softmax();
                (Some(p), None, p)
            }
            AttentionMode::CrossPositive => {
                let c = cross_logits.unwrap().softmax();
                (None, Some(c), c)
            }
            AttentionMode::CrossReverse => {
                let c = cross_logits.unwrap().scale(-1.0).softmax();
                (None, Some(c), c)
            }
            AttentionMode::Full | AttentionMode::BothPositive => {
                let p = self_logits.unwrap().softmax();
                let sign = if self.mode == AttentionMode::Full { -1.0 } else { 1.0 };
                let c = cross_logits.unwrap().scale(sign).softmax();
                (Some(p), Some(c), p.add(c).scale(0.5))
            }
            AttentionMode::Gamma => {
                let logits = self_logits.unwrap().sub(cross_logits.unwrap());
                (None, None, logits.softmax())
            }
        };
        let out = combined.bmm(value, false).add(own);
        (out, BranchScores { plus, cross, combined })
    }
}

/// Speech branch and (optionally) the mirrored noise branch.
#[derive(Debug, Clone, Copy)]
pub struct ReverseAttention {
    pub speech: AttentionBranch,
    pub noise: Option<AttentionBranch>,
    pub axis: ChunkAxis,
}

impl ReverseAttention {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        dim: usize,
        speech: AttentionMode,
        noise: Option<AttentionMode>,
        axis: ChunkAxis,
    ) -> Self {
        init.scope(name, |i| Self {
            speech: AttentionBranch::new(i, "speech", dim, speech),
            noise: noise.map(|m| AttentionBranch::new(i, "noise", dim, m)),
            axis,
        })
    }

    /// `fs` and `fn_` are `[N, S, D]` sequence views.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        fs: Var<'t>,
        fn_: Option<Var<'t>>,
    ) -> Result<(Var<'t>, Option<Var<'t>>, AttentionScores<'t>)> {
        if let Some(n) = fn_ {
            if n.shape() != fs.shape() {
                return Err(Error::Shape(format!("attention inputs {:?} vs {:?}", fs.shape(), n.shape())));
            }
        }
        let speech_needs_noise = self.speech.mode.uses_cross_query();
        let other = match (fn_, speech_needs_noise) {
            (Some(n), _) => n,
            (None, false) => fs,
            (None, true) => return Err(Error::Shape("cross attention requires the noise path".into())),
        };
        let (s_out, s_scores) = self.speech.forward(ctx, fs, other);
        let (n_out, n_scores) = match (self.noise, fn_) {
            (Some(branch), Some(n)) => {
                let (o, sc) = branch.forward(ctx, n, fs);
                (Some(o), Some(sc))
            }
            _ => (fn_, None),
        };
        Ok((s_out, n_out, AttentionScores { axis: self.axis, speech: s_scores, noise: n_scores }))
    }
}

/// `[B, P, K, D]` to `[B·P, K, D]`.
fn intra_view<'t>(m: Var<'t>) -> Var<'t> {
    let s = m.shape();
    m.reshape(&[s[0] * s[1], s[2], s[3]])
}

fn from_intra<'t>(x: Var<'t>, shape: &[usize]) -> Var<'t> {
    x.reshape(shape)
}

/// `[B, P, K, D]` to `[B·K, P, D]`.
fn inter_view<'t>(m: Var<'t>) -> Var<'t> {
    let s = m.shape();
    m.permute(&[0, 2, 1, 3]).reshape(&[s[0] * s[2], s[1], s[3]])
}

fn from_inter<'t>(x: Var<'t>, shape: &[usize]) -> Var<'t> {
    x.reshape(&[shape[0], shape[2], shape[1], shape[3]]).permute(&[0, 2, 1, 3])
}

/// Sequence model along one chunk axis: BiLSTM, projection back to `D`,
/// group norm and a residual connection.
#[derive(Debug, Clone, Copy)]
struct DualPathPass {
    rnn: BiLstm,
    proj: Linear,
    norm: GroupNorm,
}

impl DualPathPass {
    fn new(init: &mut Init<'_>, name: &str, dim: usize, hidden: usize) -> Self {
        init.scope(name, |i| Self {
            rnn: BiLstm::new(i, "rnn", dim, hidden),
            proj: Linear::new(i, "proj", 2 * hidden, dim, true),
            norm: GroupNorm::new(i, "norm", dim),
        })
    }

    fn forward<'t>(&self, ctx: &Ctx<'t>, m: Var<'t>, axis: ChunkAxis) -> Var<'t> {
        let shape = m.shape();
        let y = match axis {
            ChunkAxis::Intra => from_intra(self.proj.forward(ctx, self.rnn.forward(ctx, intra_view(m))), &shape),
            ChunkAxis::Inter => from_inter(self.proj.forward(ctx, self.rnn.forward(ctx, inter_view(m))), &shape),
        };
        m.add(self.norm.forward(ctx, y))
    }
}

/// Intra-chunk pass followed by an inter-chunk pass on `[B, P, K, D]`.
#[derive(Debug, Clone, Copy)]
pub struct DprnnUnit {
    intra: DualPathPass,
    inter: DualPathPass,
}

impl DprnnUnit {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, hidden: usize) -> Self {
        init.scope(name, |i| Self {
            intra: DualPathPass::new(i, "intra", dim, hidden),
            inter: DualPathPass::new(i, "inter", dim, hidden),
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, m: Var<'t>) -> Var<'t> {
        let m = self.intra.forward(ctx, m, ChunkAxis::Intra);
        self.inter.forward(ctx, m, ChunkAxis::Inter)
    }
}

/// Linear map and group norm applied after an attention module, with a
/// residual connection around both.
#[derive(Debug, Clone, Copy)]
struct PostAttention {
    proj: Linear,
    norm: GroupNorm,
}

impl PostAttention {
    fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Self {
        init.scope(name, |i| Self {
            proj: Linear::new(i, "proj", dim, dim, true),
            norm: GroupNorm::new(i, "norm", dim),
        })
    }

    fn forward<'t>(&self, ctx: &Ctx<'t>, residual: Var<'t>, attended: Var<'t>) -> Var<'t> {
        residual.add(self.norm.forward(ctx, self.proj.forward(ctx, attended)))
    }
}

#[derive(Debug, Clone, Copy)]
struct AttentionStage {
    attention: ReverseAttention,
    post_speech: PostAttention,
    post_noise: Option<PostAttention>,
}

impl AttentionStage {
    fn new(init: &mut Init<'_>, name: &str, cfg: &NetworkConfig, speech: AttentionMode, axis: ChunkAxis) -> Self {
        let d = cfg.feature_dim;
        let noise = cfg.variant.noise_attention();
        init.scope(name, |i| Self {
            attention: ReverseAttention::new(i, "attention", d, speech, noise, axis),
            post_speech: PostAttention::new(i, "post_speech", d),
            post_noise: cfg.variant.has_noise_path().then(|| PostAttention::new(i, "post_noise", d)),
        })
    }

    fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        ms: Var<'t>,
        mn: Option<Var<'t>>,
    ) -> Result<(Var<'t>, Option<Var<'t>>, AttentionScores<'t>)> {
        let shape = ms.shape();
        let (view, back): (fn(Var<'t>) -> Var<'t>, fn(Var<'t>, &[usize]) -> Var<'t>) = match self.attention.axis {
            ChunkAxis::Intra => (intra_view, from_intra),
            ChunkAxis::Inter => (inter_view, from_inter),
        };
        let (fs, fn_, scores) = self.attention.forward(ctx, view(ms), mn.map(view))?;
        let s = self.post_speech.forward(ctx, ms, back(fs, &shape));
        let n = match (mn, fn_, self.post_noise) {
            (Some(mn), Some(fn_), Some(post)) => Some(post.forward(ctx, mn, back(fn_, &shape))),
            _ => mn,
        };
        Ok((s, n, scores))
    }
}

/// One parallel speech/noise learning block: intra- and inter-chunk
/// attention stages, optional per-chunk visual attention, then the
/// extractor (speech) and suppressor (noise).
#[derive(Debug, Clone)]
pub struct PsnlBlock {
    intra: Option<AttentionStage>,
    inter: Option<AttentionStage>,
    visual: Option<MmAttention>,
    extractor: Option<DprnnUnit>,
    suppressor: Option<DprnnUnit>,
}

/// Outputs of one block.
pub struct BlockState<'t> {
    pub speech: Var<'t>,
    pub noise: Option<Var<'t>>,
    pub scores: Vec<AttentionScores<'t>>,
}

impl PsnlBlock {
    pub fn new(init: &mut Init<'_>, name: &str, cfg: &NetworkConfig, visual: bool) -> Self {
        let (d, h) = (cfg.feature_dim, cfg.recurrent_hidden);
        let noise = cfg.variant.has_noise_path();
        let units = cfg.variant.has_block_units();
        init.scope(name, |i| Self {
            intra: cfg.variant.speech_attention().map(|m| AttentionStage::new(i, "intra", cfg, m, ChunkAxis::Intra)),
            inter: cfg.variant.speech_attention().map(|m| AttentionStage::new(i, "inter", cfg, m, ChunkAxis::Inter)),
            visual: visual.then(|| MmAttention::new(i, "visual_attention", cfg)),
            extractor: units.then(|| DprnnUnit::new(i, "extractor", d, h)),
            suppressor: (units && noise).then(|| DprnnUnit::new(i, "suppressor", d, h)),
        })
    }

    /// `ms`, `mn`: `[B, P, K, D]`; `visual`: `[B, P, K, D_v]` chunks for the
    /// per-chunk visual attention.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        ms: Var<'t>,
        mn: Option<Var<'t>>,
        visual: Option<Var<'t>>,
    ) -> Result<BlockState<'t>> {
        let (mut s, mut n) = (ms, mn);
        let mut scores = Vec::new();
        for stage in [&self.intra, &self.inter].into_iter().flatten() {
            let (s2, n2, sc) = stage.forward(ctx, s, n)?;
            s = s2;
            n = n2;
            scores.push(sc);
        }
        if let Some(mm) = &self.visual {
            let v = visual.ok_or_else(|| Error::Visual("per-chunk visual attention needs visual chunks".into()))?;
            let n_in = n.ok_or_else(|| Error::Config("per-chunk visual attention needs the noise path".into()))?;
            let shape = s.shape();
            let (s2, n2) = mm.forward_pair(ctx, intra_view(s), intra_view(n_in), intra_view(v))?;
            s = s2.reshape(&shape);
            n = Some(n2.reshape(&shape));
        }
        if let Some(e) = &self.extractor {
            s = e.forward(ctx, s);
        }
        if let (Some(sup), Some(nv)) = (&self.suppressor, n) {
            n = Some(sup.forward(ctx, nv));
        }
        Ok(BlockState { speech: s, noise: n, scores })
    }
}
