//! Audio and visual encoders producing frame-aligned embeddings.

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::autograd::{frame_count, Array, Var};
use crate::config::{NetworkConfig, Upsample};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, DepthwiseConv, Linear};
use crate::params::{Ctx, Init, ParamId};
use crate::signal::Waveform;

/// Frame sequence with features on the last axis, `[frames, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSeq {
    pub data: Array2<f64>,
    /// Samples between consecutive frames.
    pub hop: usize,
}

impl EmbeddingSeq {
    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// `[1, L, dim]` view for batched network code.
    pub fn to_batch(&self) -> Array {
        self.data.clone().insert_axis(Axis(0)).into_dyn()
    }
}

/// Learnable filterbank: non-overlapping-hop framing, a bias-free linear
/// map per frame, then rectification. `[B, T]` to `[B, L, D_a]`.
#[derive(Debug, Clone, Copy)]
pub struct AudioEncoder {
    pub weight: ParamId,
    pub window: usize,
    pub hop: usize,
}

impl AudioEncoder {
    pub fn new(init: &mut Init<'_>, cfg: &NetworkConfig) -> Self {
        Self {
            weight: init.scope("audio_encoder", |i| i.xavier("weight", cfg.audio_dim, cfg.encoder_window)),
            window: cfg.encoder_window,
            hop: cfg.encoder_hop,
        }
    }

    pub fn frames_for(&self, samples: usize) -> Result<usize> {
        if samples < self.window {
            return Err(Error::TooShort { len: samples, min: self.window });
        }
        Ok(frame_count(samples, self.window, self.hop))
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("audio encoder expects [B, T], got {shape:?}")));
        }
        self.frames_for(shape[1])?;
        Ok(x.frame(self.window, self.hop).matmul_t(ctx.param(self.weight)).relu())
    }

    pub fn encode(&self, ctx: &Ctx<'_>, w: &Waveform) -> Result<EmbeddingSeq> {
        let x = ctx.constant(Array::from_shape_vec(IxDyn(&[1, w.len()]), w.samples().to_vec()).unwrap());
        let y = self.forward(ctx, x)?.value();
        let (l, d) = (y.shape()[1], y.shape()[2]);
        Ok(EmbeddingSeq {
            data: Array2::from_shape_vec((l, d), y.iter().copied().collect()).unwrap(),
            hop: self.hop,
        })
    }
}

/// Maps frame `j` of `out_len` output frames onto `frames` input frames.
pub fn upsample_taps(frames: usize, out_len: usize, mode: Upsample) -> Vec<Vec<(usize, f64)>> {
    assert!(frames > 0, "upsampling needs at least one input frame");
    let ratio = frames as f64 / out_len as f64;
    (0..out_len)
        .map(|j| match mode {
            Upsample::Nearest => vec![(((j * frames) / out_len).min(frames - 1), 1.0)],
            Upsample::Linear => {
                let pos = ((j as f64 + 0.5) * ratio - 0.5).clamp(0.0, (frames - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(frames - 1);
                let w = pos - lo as f64;
                if hi == lo || w == 0.0 {
                    vec![(lo, 1.0)]
                } else {
                    vec![(lo, 1.0 - w), (hi, w)]
                }
            }
        })
        .collect()
}

/// Fixed random convolutional stack standing in for a pretrained lip
/// front-end: block-average to 16×16, 3×3 convolution with ReLU, 2×2
/// average pool. Output size is `64 · channels`.
#[derive(Debug, Clone)]
pub struct VisualFrontend {
    filters: Vec<[f64; 9]>,
}

impl VisualFrontend {
    pub fn new(out_dim: usize, seed: u64) -> Result<Self> {
        if out_dim == 0 || out_dim % 64 != 0 {
            return Err(Error::Config(format!("front-end output size must be a multiple of 64, got {out_dim}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let filters = (0..out_dim / 64)
            .map(|_| {
                let mut f = [0.0; 9];
                f.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
                f
            })
            .collect();
        Ok(Self { filters })
    }

    pub fn out_dim(&self) -> usize {
        self.filters.len() * 64
    }

    fn frame_features(&self, img: &Array2<f32>) -> Vec<f64> {
        let (h, w) = img.dim();
        let mut small = [[0.0f64; 16]; 16];
        for (r, row) in small.iter_mut().enumerate() {
            for (c, cell) in row.iter_mut().enumerate() {
                let (r0, r1) = (r * h / 16, ((r + 1) * h / 16).max(r * h / 16 + 1).min(h));
                let (c0, c1) = (c * w / 16, ((c + 1) * w / 16).max(c * w / 16 + 1).min(w));
                let mut acc = 0.0;
                for y in r0..r1 {
                    for x in c0..c1 {
                        acc += img[[y, x]] as f64;
                    }
                }
                *cell = acc / ((r1 - r0) * (c1 - c0)) as f64;
            }
        }
        let mut out = Vec::with_capacity(self.out_dim());
        for f in &self.filters {
            let mut conv = [[0.0f64; 16]; 16];
            for r in 0..16 {
                for c in 0..16 {
                    let mut acc = 0.0;
                    for (k, fk) in f.iter().enumerate() {
                        let y = (r as isize + k as isize / 3 - 1).clamp(0, 15) as usize;
                        let x = (c as isize + k as isize % 3 - 1).clamp(0, 15) as usize;
                        acc += fk * small[y][x];
                    }
                    conv[r][c] = acc.max(0.0);
                }
            }
            for r in 0..8 {
                for c in 0..8 {
                    out.push(0.25 * (conv[2 * r][2 * c] + conv[2 * r + 1][2 * c] + conv[2 * r][2 * c + 1] + conv[2 * r + 1][2 * c + 1]));
                }
            }
        }
        out
    }

    /// `[frames, out_dim]` features for a sequence of gray-scale images.
    pub fn features(&self, images: &[Array2<f32>]) -> Array2<f64> {
        let mut out = Array2::zeros((images.len(), self.out_dim()));
        for (i, img) in images.iter().enumerate() {
            out.row_mut(i).assign(&ndarray::Array1::from(self.frame_features(img)));
        }
        out
    }
}

/// Visual input to the network.
#[derive(Debug, Clone, PartialEq)]
pub enum VisualInput {
    /// Already aligned with the audio frames, `[B, L, D_v]`.
    Embedding(Array),
    /// Per-video-frame features, `[B, F, C]`, passed through the temporal stack.
    Features(Array),
}

#[derive(Debug, Clone, Copy)]
struct TemporalBlock {
    norm: BatchNorm,
    depthwise: DepthwiseConv,
    pointwise: Linear,
}

/// Residual temporal convolution stack (rectify, batch-norm, depthwise and
/// pointwise convolution) followed by a projection to `D_v` and up-sampling.
#[derive(Debug, Clone)]
pub struct VisualEncoder {
    blocks: Vec<TemporalBlock>,
    projection: Linear,
    upsample: Upsample,
    feature_dim: usize,
    visual_dim: usize,
    frame_rate: f64,
    sample_rate: u32,
}

impl VisualEncoder {
    pub fn new(init: &mut Init<'_>, cfg: &NetworkConfig) -> Self {
        init.scope("visual_encoder", |init| {
            let c = cfg.visual_feature_dim;
            let blocks = (0..cfg.vtcn_blocks)
                .map(|b| {
                    init.scope(&format!("block{b}"), |i| TemporalBlock {
                        norm: BatchNorm::new(i, "norm", c),
                        depthwise: DepthwiseConv::new(i, "depthwise", c, cfg.vtcn_kernel),
                        pointwise: Linear::new(i, "pointwise", c, c, true),
                    })
                })
                .collect();
            Self {
                blocks,
                projection: Linear::new(init, "projection", c, cfg.visual_dim, true),
                upsample: cfg.upsample,
                feature_dim: c,
                visual_dim: cfg.visual_dim,
                frame_rate: cfg.frame_rate,
                sample_rate: cfg.sample_rate,
            }
        })
    }

    /// Temporal stack and projection at the video rate, `[B, F, C]` to `[B, F, D_v]`.
    pub fn temporal<'t>(&self, ctx: &Ctx<'t>, features: Var<'t>) -> Var<'t> {
        let mut x = features;
        for b in &self.blocks {
            let y = b.norm.forward(ctx, x.relu());
            let y = b.pointwise.forward(ctx, b.depthwise.forward(ctx, y));
            x = x.add(y);
        }
        self.projection.forward(ctx, x)
    }

    /// Produces `[B, audio_frames, D_v]`. `samples` is the audio length, used
    /// to reject grossly mismatched streams.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, visual: &VisualInput, audio_frames: usize, samples: usize) -> Result<Var<'t>> {
        match visual {
            VisualInput::Embedding(e) => {
                let s = e.shape();
                if s.len() != 3 || s[1] != audio_frames || s[2] != self.visual_dim {
                    return Err(Error::Visual(format!(
                        "embedding shape {s:?} does not match [B, {audio_frames}, {}]",
                        self.visual_dim
                    )));
                }
                Ok(ctx.constant(e.clone()))
            }
            VisualInput::Features(f) => {
                let s = f.shape();
                if s.len() != 3 || s[2] != self.feature_dim || s[1] == 0 {
                    return Err(Error::Visual(format!("feature shape {s:?} does not match [B, F, {}]", self.feature_dim)));
                }
                let video_s = s[1] as f64 / self.frame_rate;
                let audio_s = samples as f64 / self.sample_rate as f64;
                if (video_s - audio_s).abs() > 0.1 * audio_s {
                    return Err(Error::Visual(format!(
                        "{} frames ({video_s:.3} s) against {audio_s:.3} s of audio",
                        s[1]
                    )));
                }
                let y = self.temporal(ctx, ctx.constant(f.clone()));
                Ok(y.resample_time(upsample_taps(s[1], audio_frames, self.upsample)))
            }
        }
    }
}

/// Seed of the fixed projection used by [`oracle_visual_embed`].
pub const ORACLE_SEED: u64 = 0x5EA_0_7E7;
const ORACLE_BANDS: usize = 8;

/// Per-video-frame log band energies and log energy of a clean signal,
/// standardised per feature. `[frames, 9]` at `frame_rate`.
pub fn oracle_frame_features(s: &Waveform, frame_rate: f64) -> Array2<f64> {
    let sr = s.sample_rate() as f64;
    let n = (sr / frame_rate).round() as usize;
    let frames = ((s.len() as f64 / n as f64).round() as usize).max(1);
    let fft = FftPlanner::new().plan_fft_forward(n);
    let edges: Vec<usize> = (0..=ORACLE_BANDS)
        .map(|b| {
            let hz = 80.0 * (7000.0f64 / 80.0).powf(b as f64 / ORACLE_BANDS as f64);
            ((hz / sr * n as f64).round() as usize).clamp(1, n / 2)
        })
        .collect();
    let mut feats = Array2::zeros((frames, ORACLE_BANDS + 1));
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for f in 0..frames {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(s.samples().get(f * n + i).copied().unwrap_or(0.0), 0.0);
        }
        let energy: f64 = buf.iter().map(|c| c.re * c.re).sum();
        fft.process(&mut buf);
        for b in 0..ORACLE_BANDS {
            let (lo, hi) = (edges[b], edges[b + 1].max(edges[b] + 1));
            let e: f64 = buf[lo..hi].iter().map(|c| c.norm_sqr()).sum();
            feats[[f, b]] = (e / n as f64 + 1e-8).ln();
        }
        feats[[f, ORACLE_BANDS]] = (energy + 1e-8).ln();
    }
    for mut col in feats.columns_mut() {
        let mean = col.mean().unwrap();
        let std = col.mapv(|v| (v - mean).powi(2)).mean().unwrap().sqrt();
        col.mapv_inplace(|v| (v - mean) / (std + 1e-5));
    }
    feats
}

/// Stand-in visual cue derived from the clean target: [`oracle_frame_features`]
/// projected to `dim` by a fixed random matrix, then nearest-upsampled to
/// `frames` audio frames.
pub fn oracle_visual_embed(s: &Waveform, frames: usize, dim: usize, frame_rate: f64, hop: usize) -> EmbeddingSeq {
    let feats = oracle_frame_features(s, frame_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(ORACLE_SEED);
    let scale = 1.0 / ((ORACLE_BANDS + 1) as f64).sqrt();
    let proj = Array2::from_shape_fn((ORACLE_BANDS + 1, dim), |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v * scale
    });
    let video = feats.dot(&proj);
    let taps = upsample_taps(video.nrows(), frames, Upsample::Nearest);
    let mut data = Array2::zeros((frames, dim));
    for (j, tap) in taps.iter().enumerate() {
        data.row_mut(j).assign(&video.row(tap[0].0));
    }
    EmbeddingSeq { data, hop }
}

/// Stacks equally shaped embeddings into a `[B, L, D]` batch.
pub fn stack_embeddings(items: &[EmbeddingSeq]) -> Result<Array> {
    let first = items.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (l, d) = first.data.dim();
    let mut out = ArrayD::zeros(IxDyn(&[items.len(), l, d]));
    for (b, e) in items.iter().enumerate() {
        if e.data.dim() != (l, d) {
            return Err(Error::Shape(format!("embedding {b} is {:?}, expected {:?}", e.data.dim(), (l, d))));
        }
        out.index_axis_mut(Axis(0), b).assign(&e.data);
    }
    Ok(out)
}
