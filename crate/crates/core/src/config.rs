//! Architecture configuration and variant semantics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network structure: the full model, the single-path baseline, and the
/// attention and block ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    Seanet,
    AvDprnn,
    /// Speech self-attention only, no noise path.
    S1,
    /// Positive cross-attention only.
    S2,
    /// Reverse cross-attention only.
    S3,
    /// Self-attention plus positive cross-attention.
    S4,
    /// No extractor or suppressor inside the blocks.
    Alpha,
    /// No noise-noise self-attention in the noise path.
    BetaVariant,
    /// Subtract the cross query before the softmax.
    Gamma,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Seanet,
        Variant::AvDprnn,
        Variant::S1,
        Variant::S2,
        Variant::S3,
        Variant::S4,
        Variant::Alpha,
        Variant::BetaVariant,
        Variant::Gamma,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Seanet => "SEANET",
            Variant::AvDprnn => "AV_DPRNN",
            Variant::S1 => "S1",
            Variant::S2 => "S2",
            Variant::S3 => "S3",
            Variant::S4 => "S4",
            Variant::Alpha => "ALPHA",
            Variant::BetaVariant => "BETA_VARIANT",
            Variant::Gamma => "GAMMA",
        }
    }

    /// Whether a noise path (pre-suppressor, suppressors, noise outputs) exists.
    pub fn has_noise_path(self) -> bool {
        !matches!(self, Variant::AvDprnn | Variant::S1)
    }

    /// Attention used by the speech path; `None` means no attention at all.
    pub fn speech_attention(self) -> Option<AttentionMode> {
        match self {
            Variant::AvDprnn => None,
            Variant::S1 => Some(AttentionMode::SelfOnly),
            Variant::S2 => Some(AttentionMode::CrossPositive),
            Variant::S3 => Some(AttentionMode::CrossReverse),
            Variant::S4 => Some(AttentionMode::BothPositive),
            Variant::Seanet | Variant::Alpha | Variant::BetaVariant => Some(AttentionMode::Full),
            Variant::Gamma => Some(AttentionMode::Gamma),
        }
    }

    /// Attention used by the noise path, mirroring the speech path.
    pub fn noise_attention(self) -> Option<AttentionMode> {
        match self {
            Variant::BetaVariant => Some(AttentionMode::CrossReverse),
            v if v.has_noise_path() => v.speech_attention(),
            _ => None,
        }
    }

    /// Whether each block ends in an extractor (and suppressor).
    pub fn has_block_units(self) -> bool {
        self != Variant::Alpha
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm || (norm == "BETA" && *v == Variant::BetaVariant))
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// How an attention branch forms its score matrix from its own query `Q`,
/// the cross query `Q'` from the other path, and its keys `K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AttentionMode {
    /// `½(softmax(QKᵀ/√D) + softmax(−Q'Kᵀ/√D))`
    Full,
    /// `softmax(QKᵀ/√D)`
    SelfOnly,
    /// `softmax(Q'Kᵀ/√D)`
    CrossPositive,
    /// `softmax(−Q'Kᵀ/√D)`
    CrossReverse,
    /// `½(softmax(QKᵀ/√D) + softmax(Q'Kᵀ/√D))`
    BothPositive,
    /// `softmax((Q − Q')Kᵀ/√D)`
    Gamma,
}

impl AttentionMode {
    pub fn uses_self_query(self) -> bool {
        !matches!(self, AttentionMode::CrossPositive | AttentionMode::CrossReverse)
    }

    pub fn uses_cross_query(self) -> bool {
        self != AttentionMode::SelfOnly
    }
}

/// Multi-modal extensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MmVariant {
    #[default]
    None,
    /// Visual-query temporal attention at fusion.
    F,
    /// Visual-query attention inside every block, per chunk.
    P,
    /// Contrastive audio-visual loss on block features.
    A,
}

impl FromStr for MmVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "NONE" => Ok(MmVariant::None),
            "F" => Ok(MmVariant::F),
            "P" => Ok(MmVariant::P),
            "A" => Ok(MmVariant::A),
            _ => Err(Error::Config(format!("unknown multi-modal variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    #[default]
    Nearest,
    Linear,
}

/// How the two visual-attention outputs are merged at fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmCombine {
    #[default]
    Sum,
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Chunk length `K` in frames (even).
    pub chunk_size: usize,
    /// Audio embedding size `D_a`.
    pub audio_dim: usize,
    /// Visual embedding size `D_v`.
    pub visual_dim: usize,
    /// Fused feature size `D`.
    pub feature_dim: usize,
    /// Number of blocks `R`.
    pub blocks: usize,
    /// Auxiliary loss weight.
    pub beta: f64,
    pub variant: Variant,
    /// Hidden units per LSTM direction.
    pub recurrent_hidden: usize,
    pub mm_variant: MmVariant,
    pub mm_combine: MmCombine,
    /// Weight of the contrastive loss in the `A` extension.
    pub contrastive_weight: f64,
    pub encoder_window: usize,
    pub encoder_hop: usize,
    /// Size of per-frame visual features entering the temporal stack.
    pub visual_feature_dim: usize,
    pub vtcn_blocks: usize,
    pub vtcn_kernel: usize,
    pub upsample: Upsample,
    pub sample_rate: u32,
    pub frame_rate: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            chunk_size: 100,
            audio_dim: 256,
            visual_dim: 256,
            feature_dim: 64,
            blocks: 5,
            beta: 0.1,
            variant: Variant::Seanet,
            recurrent_hidden: 128,
            mm_variant: MmVariant::None,
            mm_combine: MmCombine::Sum,
            contrastive_weight: 0.1,
            encoder_window: 32,
            encoder_hop: 16,
            visual_feature_dim: 512,
            vtcn_blocks: 5,
            vtcn_kernel: 3,
            upsample: Upsample::Nearest,
            sample_rate: 16_000,
            frame_rate: 25.0,
        }
    }
}

impl NetworkConfig {
    /// Small configuration for CPU experiments.
    pub fn tiny() -> Self {
        Self {
            chunk_size: 20,
            audio_dim: 64,
            visual_dim: 32,
            feature_dim: 16,
            blocks: 2,
            recurrent_hidden: 16,
            visual_feature_dim: 64,
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.blocks == 0 {
            return fail("blocks (R) must be at least 1".into());
        }
        if self.chunk_size < 2 || self.chunk_size % 2 != 0 {
            return fail(format!("chunk size must be even and at least 2, got {}", self.chunk_size));
        }
        for (name, v) in [
            ("audio_dim", self.audio_dim),
            ("visual_dim", self.visual_dim),
            ("feature_dim", self.feature_dim),
            ("recurrent_hidden", self.recurrent_hidden),
            ("encoder_window", self.encoder_window),
            ("encoder_hop", self.encoder_hop),
            ("visual_feature_dim", self.visual_feature_dim),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.encoder_hop > self.encoder_window {
            return fail("encoder hop cannot exceed its window".into());
        }
        if self.vtcn_kernel % 2 == 0 {
            return fail("temporal kernel size must be odd".into());
        }
        if !(self.beta >= 0.0) || !(self.contrastive_weight >= 0.0) {
            return fail("loss weights must be non-negative".into());
        }
        if !(self.frame_rate > 0.0) || self.sample_rate == 0 {
            return fail("frame and sample rates must be positive".into());
        }
        if self.mm_variant != MmVariant::None && self.variant != Variant::Seanet {
            return fail(format!(
                "multi-modal extension {:?} requires the SEANET variant, got {}",
                self.mm_variant, self.variant
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        NetworkConfig::default().validate().unwrap();
        NetworkConfig::tiny().validate().unwrap();
    }

    #[test]
    fn rejects_bad_combinations() {
        let mut c = NetworkConfig { mm_variant: MmVariant::P, ..NetworkConfig::tiny() };
        c.variant = Variant::AvDprnn;
        assert!(c.validate().is_err());
        assert!(NetworkConfig { chunk_size: 7, ..NetworkConfig::tiny() }.validate().is_err());
        assert!(NetworkConfig { blocks: 0, ..NetworkConfig::tiny() }.validate().is_err());
    }

    #[test]
    fn variant_names_parse() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("av-dprnn".parse::<Variant>().unwrap(), Variant::AvDprnn);
    }

    #[test]
    fn variant_paths() {
        assert!(!Variant::AvDprnn.has_noise_path());
        assert_eq!(Variant::AvDprnn.speech_attention(), None);
        assert_eq!(Variant::S1.noise_attention(), None);
        assert_eq!(Variant::BetaVariant.noise_attention(), Some(AttentionMode::CrossReverse));
        assert_eq!(Variant::BetaVariant.speech_attention(), Some(AttentionMode::Full));
        assert!(!Variant::Alpha.has_block_units());
    }
}
