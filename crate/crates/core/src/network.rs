//! Full extraction network assembled from a [`NetworkConfig`].

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::{Array, ChunkLayout, Tape, Var};
use crate::config::{MmVariant, NetworkConfig};
use crate::decoder::{total_loss, BlockOutputs, Decoder, LossTerms, MaskHead};
use crate::encoders::{AudioEncoder, VisualEncoder, VisualInput};
use crate::error::{Error, Result};
use crate::fusion::Fusion;
use crate::multimodal::contrastive_av_loss;
use crate::nn::Linear;
use crate::params::{Ctx, Init, ParamStore};
use crate::psnl::{AttentionScores, DprnnUnit, PsnlBlock};
use crate::signal::Waveform;

#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: NetworkConfig,
    pub store: ParamStore,
    pub encoder: AudioEncoder,
    pub visual: VisualEncoder,
    fusion: Fusion,
    pre_extractor: DprnnUnit,
    pre_suppressor: Option<DprnnUnit>,
    blocks: Vec<PsnlBlock>,
    speech_head: MaskHead,
    noise_head: Option<MaskHead>,
    pub decoder: Decoder,
    visual_feature_proj: Option<Linear>,
}

/// Everything produced by one forward pass.
pub struct ForwardPass<'t> {
    pub outputs: BlockOutputs<'t>,
    /// Encoder output `X`, `[B, L, D_a]`.
    pub encoded: Var<'t>,
    /// Chunked speech features `M_si`, `[B, P, K, D]`, for `i = 0..=R`.
    pub speech_features: Vec<Var<'t>>,
    pub noise_features: Vec<Var<'t>>,
    /// Chunked projected visual features for the contrastive loss.
    pub visual_chunks: Option<Var<'t>>,
    /// Attention scores per block.
    pub scores: Vec<Vec<AttentionScores<'t>>>,
    pub layout: ChunkLayout,
}

/// Trainable parameter counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub variant: String,
    pub total: usize,
    pub modules: BTreeMap<String, usize>,
}

impl ParameterReport {
    pub fn to_table(&self) -> String {
        let mut out = format!("{} trainable parameters: {} ({:.2}M)\n", self.variant, self.total, self.total as f64 / 1e6);
        for (k, v) in &self.modules {
            out += &format!("  {k:<32} {v:>10}\n");
        }
        out
    }
}

pub fn build_network(cfg: &NetworkConfig, seed: u64) -> Result<Network> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init::new(&mut store, seed);
    let (d, h) = (cfg.feature_dim, cfg.recurrent_hidden);
    let noise = cfg.variant.has_noise_path();
    let encoder = AudioEncoder::new(&mut init, cfg);
    let visual = VisualEncoder::new(&mut init, cfg);
    let fusion = Fusion::new(&mut init, cfg);
    let pre_extractor = DprnnUnit::new(&mut init, "pre_extractor", d, h);
    let pre_suppressor = noise.then(|| DprnnUnit::new(&mut init, "pre_suppressor", d, h));
    let blocks = (0..cfg.blocks)
        .map(|r| PsnlBlock::new(&mut init, &format!("block{r}"), cfg, cfg.mm_variant == MmVariant::P))
        .collect();
    let speech_head = MaskHead::new(&mut init, "speech_head", cfg);
    let noise_head = noise.then(|| MaskHead::new(&mut init, "noise_head", cfg));
    let decoder = Decoder::new(&mut init, cfg);
    let visual_feature_proj =
        (cfg.mm_variant == MmVariant::A).then(|| Linear::new(&mut init, "visual_feature_proj", cfg.visual_dim, d, true));
    Ok(Network {
        cfg: cfg.clone(),
        store,
        encoder,
        visual,
        fusion,
        pre_extractor,
        pre_suppressor,
        blocks,
        speech_head,
        noise_head,
        decoder,
        visual_feature_proj,
    })
}

impl Network {
    /// Runs the network on a `[B, T]` mixture batch.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, mixture: &Array, visual: &VisualInput) -> Result<ForwardPass<'t>> {
        let x = ctx.constant(mixture.clone());
        let samples = *mixture.shape().last().unwrap_or(&0);
        let frames = self.encoder.frames_for(samples)?;
        let v = self.visual.forward(ctx, visual, frames, samples)?;
        self.forward_vars(ctx, x, v)
    }

    /// Forward pass from tape variables: `mixture` `[B, T]` and an aligned
    /// visual embedding `[B, L, D_v]`.
    pub fn forward_vars<'t>(&self, ctx: &Ctx<'t>, mixture: Var<'t>, visual: Var<'t>) -> Result<ForwardPass<'t>> {
        let samples = mixture.shape()[1];
        let encoded = self.encoder.forward(ctx, mixture)?;
        let fused = self.fusion.forward(ctx, encoded, visual)?;
        let (chunks, layout) = fused.segment(self.cfg.chunk_size);

        let visual_chunks = match self.cfg.mm_variant {
            MmVariant::P => Some(visual.segment(self.cfg.chunk_size).0),
            MmVariant::A => Some(self.visual_feature_proj.unwrap().forward(ctx, visual).segment(self.cfg.chunk_size).0),
            _ => None,
        };
        let block_visual = (self.cfg.mm_variant == MmVariant::P).then_some(visual_chunks).flatten();

        let mut ms = self.pre_extractor.forward(ctx, chunks);
        let mut mn = self.pre_suppressor.map(|u| u.forward(ctx, chunks));
        let mut speech_features = vec![ms];
        let mut noise_features: Vec<Var<'t>> = mn.into_iter().collect();
        let mut scores = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let state = block.forward(ctx, ms, mn, block_visual)?;
            ms = state.speech;
            mn = state.noise;
            speech_features.push(ms);
            noise_features.extend(mn);
            scores.push(state.scores);
        }

        let decode = |m: Var<'t>, head: &MaskHead| -> Result<(Var<'t>, Var<'t>)> {
            let mask = head.forward(ctx, m.aggregate(layout));
            let wave = self.decoder.mask_and_decode(ctx, mask, encoded, samples)?;
            Ok((mask, wave))
        };
        let mut outputs = BlockOutputs { speech_masks: vec![], noise_masks: vec![], speech: vec![], noise: vec![] };
        for &m in &speech_features {
            let (mask, wave) = decode(m, &self.speech_head)?;
            outputs.speech_masks.push(mask);
            outputs.speech.push(wave);
        }
        if let Some(head) = &self.noise_head {
            for &m in &noise_features {
                let (mask, wave) = decode(m, head)?;
                outputs.noise_masks.push(mask);
                outputs.noise.push(wave);
            }
        }
        Ok(ForwardPass {
            outputs,
            encoded,
            speech_features,
            noise_features,
            visual_chunks: if self.cfg.mm_variant == MmVariant::A { visual_chunks } else { None },
            scores,
            layout,
        })
    }

    /// Training objective for a pass against `[B, T]` targets and noise.
    pub fn loss<'t>(&self, pass: &ForwardPass<'t>, target: &Array, noise: &Array) -> Result<LossTerms<'t>> {
        let mut terms = total_loss(&pass.outputs, target, noise, self.cfg.beta, self.cfg.variant.has_noise_path())?;
        if let Some(v) = pass.visual_chunks {
            let c = contrastive_av_loss(&pass.speech_features, &pass.noise_features, v)?;
            terms.total = terms.total.add(c.scale(self.cfg.contrastive_weight));
            terms.contrastive = Some(c);
        }
        Ok(terms)
    }

    /// Final speech estimate for a single mixture, in evaluation mode.
    pub fn extract(&self, mixture: &Waveform, visual: &VisualInput) -> Result<Waveform> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store, false, false);
        let x = ArrayD::from_shape_vec(IxDyn(&[1, mixture.len()]), mixture.samples().to_vec()).unwrap();
        let pass = self.forward(&ctx, &x, visual)?;
        let est = pass.outputs.estimate().ok_or_else(|| Error::MissingOutput("speech estimate".into()))?;
        Waveform::new(est.value().iter().copied().collect(), mixture.sample_rate())
    }

    /// Number of frames the audio encoder produces for `samples` samples.
    pub fn frames_for(&self, samples: usize) -> Result<usize> {
        self.encoder.frames_for(samples)
    }

    pub fn trainable_parameters(&self) -> usize {
        self.store.trainable_count()
    }

    /// Trainable counts per top-level module; blocks are grouped by their
    /// sub-module across all `R` blocks.
    pub fn parameter_report(&self) -> ParameterReport {
        let mut modules = BTreeMap::new();
        for (_, e) in self.store.iter().filter(|(_, e)| e.trainable) {
            let mut parts = e.name.split('.');
            let head = parts.next().unwrap_or_default();
            let key = match head.strip_prefix("block") {
                Some(_) => format!("blocks.{}", parts.next().unwrap_or_default()),
                None => head.to_string(),
            };
            *modules.entry(key).or_insert(0) += e.value.len();
        }
        ParameterReport { variant: self.cfg.variant.name().to_string(), total: self.trainable_parameters(), modules }
    }
}
