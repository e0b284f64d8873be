//! Audio-visual fusion and chunk segmentation.

use ndarray::{Array2, Axis};

use crate::autograd::{Array, ChunkLayout, Tape, Var};
use crate::config::{MmVariant, NetworkConfig};
use crate::encoders::EmbeddingSeq;
use crate::error::{Error, Result};
use crate::multimodal::FusionAttention;
use crate::nn::{GroupNorm, Linear};
use crate::params::{Ctx, Init};

/// Overlapping chunks of one sequence, `[P, K, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkedEmbedding {
    pub data: Array,
    pub layout: ChunkLayout,
}

impl ChunkedEmbedding {
    pub fn chunk_size(&self) -> usize {
        self.layout.chunk
    }

    pub fn chunks(&self) -> usize {
        self.layout.chunks
    }

    pub fn pad_len(&self) -> usize {
        self.layout.pad
    }
}

/// Splits a sequence into chunks of `chunk` frames with hop `chunk / 2`,
/// zero-padding the tail. Chunk `c` covers frames `[c·K/2, c·K/2 + K)`.
pub fn segment(e: &EmbeddingSeq, chunk: usize) -> Result<ChunkedEmbedding> {
    if chunk < 2 || chunk % 2 != 0 {
        return Err(Error::Config(format!("chunk size must be even and at least 2, got {chunk}")));
    }
    let tape = Tape::new();
    let (y, layout) = tape.constant(e.to_batch()).segment(chunk);
    let data = y.value().index_axis(Axis(0), 0).to_owned();
    Ok(ChunkedEmbedding { data, layout })
}

/// Inverse of [`segment`]: overlap-add divided by per-frame coverage.
pub fn aggregate(c: &ChunkedEmbedding, hop: usize) -> EmbeddingSeq {
    let tape = Tape::new();
    let y = tape.constant(c.data.clone().insert_axis(Axis(0))).aggregate(c.layout).value();
    let (l, d) = (y.shape()[1], y.shape()[2]);
    EmbeddingSeq {
        data: Array2::from_shape_vec((l, d), y.iter().copied().collect()).unwrap(),
        hop,
    }
}

/// Normalises and projects the audio embedding to `D`, joins it with the
/// visual embedding per frame and projects the pair to `D`.
#[derive(Debug, Clone)]
pub struct Fusion {
    norm: GroupNorm,
    audio_proj: Linear,
    attention: Option<FusionAttention>,
    joint_proj: Linear,
}

impl Fusion {
    pub fn new(init: &mut Init<'_>, cfg: &NetworkConfig) -> Self {
        init.scope("fusion", |i| Self {
            norm: GroupNorm::new(i, "norm", cfg.audio_dim),
            audio_proj: Linear::new(i, "audio_proj", cfg.audio_dim, cfg.feature_dim, true),
            attention: (cfg.mm_variant == MmVariant::F).then(|| FusionAttention::new(i, cfg)),
            joint_proj: Linear::new(i, "joint_proj", cfg.feature_dim + cfg.visual_dim, cfg.feature_dim, true),
        })
    }

    /// `[B, L, D_a]` and `[B, L, D_v]` to `[B, L, D]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, audio: Var<'t>, visual: Var<'t>) -> Result<Var<'t>> {
        let (a, v) = (audio.shape(), visual.shape());
        if a.len() != 3 || v.len() != 3 || a[0] != v[0] || a[1] != v[1] {
            return Err(Error::LengthMismatch {
                what: "fusion frames",
                left: a.get(1).copied().unwrap_or(0),
                right: v.get(1).copied().unwrap_or(0),
            });
        }
        let mut x = self.audio_proj.forward(ctx, self.norm.forward(ctx, audio));
        if let Some(att) = &self.attention {
            x = att.forward(ctx, x, visual)?;
        }
        Ok(self.joint_proj.forward(ctx, Var::concat_last(&[x, visual])))
    }
}
