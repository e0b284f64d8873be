//! Examples, datasets and batching.

use std::path::Path;

use anyhow::{bail, Context, Result};
use ndarray::{s, Array2, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use seanet_core::encoders::{oracle_visual_embed, VisualFrontend, VisualInput, ORACLE_SEED};
use seanet_core::signal::{generate_scenario_at, read_manifest, MixtureSample, Scenario, VisualCue, VisualFrames, Waveform};
use seanet_core::NetworkConfig;

/// Visual cue of one example.
#[derive(Debug, Clone, PartialEq)]
pub enum ExampleVisual {
    /// Aligned with the audio frames, `[L, D_v]`.
    Embedding(Array2<f64>),
    /// Per-video-frame features, `[F, C]`.
    Features(Array2<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub scenario: Scenario,
    pub mixture: Waveform,
    pub target: Waveform,
    pub noise: Waveform,
    pub visual: ExampleVisual,
}

fn audio_frames(net: &NetworkConfig, samples: usize) -> usize {
    if samples < net.encoder_window {
        0
    } else {
        (samples - net.encoder_window) / net.encoder_hop + 1
    }
}

fn oracle(net: &NetworkConfig, target: &Waveform) -> ExampleVisual {
    let frames = audio_frames(net, target.len());
    ExampleVisual::Embedding(oracle_visual_embed(target, frames, net.visual_dim, net.frame_rate, net.encoder_hop).data)
}

impl Example {
    pub fn from_sample(id: String, sample: MixtureSample, net: &NetworkConfig) -> Result<Self> {
        let visual = match &sample.visual {
            VisualCue::Oracle => oracle(net, &sample.target),
            VisualCue::Stream(stream) => {
                if stream.frame_rate() != net.frame_rate {
                    bail!("{id}: video at {} fps, network expects {}", stream.frame_rate(), net.frame_rate);
                }
                match stream.frames() {
                    VisualFrames::Features(f) => ExampleVisual::Features(f.clone()),
                    VisualFrames::Images(images) => {
                        let frontend = VisualFrontend::new(net.visual_feature_dim, ORACLE_SEED)?;
                        ExampleVisual::Features(frontend.features(images))
                    }
                }
            }
        };
        Ok(Self {
            id,
            scenario: sample.scenario,
            mixture: sample.mixture,
            target: sample.target,
            noise: sample.noise,
            visual,
        })
    }

    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }

    /// Network input for this example alone.
    pub fn visual_input(&self) -> VisualInput {
        match &self.visual {
            ExampleVisual::Embedding(e) => VisualInput::Embedding(e.clone().insert_axis(Axis(0)).into_dyn()),
            ExampleVisual::Features(f) => VisualInput::Features(f.clone().insert_axis(Axis(0)).into_dyn()),
        }
    }

    /// `len` samples starting at `start`, zero-padded past the end. Oracle
    /// embeddings are recomputed for the crop; video features are cut at the
    /// nearest video frame.
    pub fn crop(&self, start: usize, len: usize, net: &NetworkConfig) -> Result<Self> {
        let cut = |w: &Waveform| -> Result<Waveform> {
            let mut v: Vec<f64> = w.samples().iter().skip(start).take(len).copied().collect();
            v.resize(len, 0.0);
            Ok(Waveform::new(v, w.sample_rate())?)
        };
        let target = cut(&self.target)?;
        let visual = match &self.visual {
            ExampleVisual::Embedding(_) => oracle(net, &target),
            ExampleVisual::Features(f) => {
                let per_frame = net.sample_rate as f64 / net.frame_rate;
                let first = ((start as f64 / per_frame).round() as usize).min(f.nrows().saturating_sub(1));
                let count = ((len as f64 / per_frame).round() as usize).max(1);
                let mut out = Array2::zeros((count, f.ncols()));
                for i in 0..count {
                    out.row_mut(i).assign(&f.row((first + i).min(f.nrows() - 1)));
                }
                ExampleVisual::Features(out)
            }
        };
        Ok(Self {
            id: self.id.clone(),
            scenario: self.scenario,
            mixture: cut(&self.mixture)?,
            target,
            noise: cut(&self.noise)?,
            visual,
        })
    }
}

/// Seed of example `index` of a split, derived from the data seed.
pub fn example_seed(data_seed: u64, split: &str, index: usize) -> u64 {
    let salt = split.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x1000_0000_01b3));
    data_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// `count` synthetic mixtures cycling through `scenarios`.
pub fn synthetic_examples(
    net: &NetworkConfig,
    scenarios: &[Scenario],
    count: usize,
    duration_s: f64,
    data_seed: u64,
    split: &str,
) -> Result<Vec<Example>> {
    (0..count)
        .map(|i| {
            let kind = scenarios[i % scenarios.len()];
            let seed = example_seed(data_seed, split, i);
            let sample = generate_scenario_at(kind, duration_s, seed, net.sample_rate)?;
            Example::from_sample(format!("{split}-{i:05}-{}", kind.name()), sample, net)
        })
        .collect()
}

/// Every entry of a manifest, loaded at full length.
pub fn manifest_examples(path: &Path, net: &NetworkConfig) -> Result<Vec<Example>> {
    let entries = read_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    entries
        .into_iter()
        .map(|e| {
            let sample = e.load(base, net.sample_rate).with_context(|| format!("loading {}", e.id))?;
            Example::from_sample(e.id.clone(), sample, net)
        })
        .collect()
}

/// Equal-length examples stacked for one step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[B, T]`.
    pub mixture: ArrayD<f64>,
    pub target: ArrayD<f64>,
    pub noise: ArrayD<f64>,
    pub visual: VisualInput,
}

fn stack_waves(items: &[&Example], pick: impl Fn(&Example) -> &Waveform) -> ArrayD<f64> {
    let t = items[0].len();
    let mut out = ArrayD::zeros(IxDyn(&[items.len(), t]));
    for (b, e) in items.iter().enumerate() {
        out.slice_mut(s![b, ..]).assign(&ndarray::ArrayView1::from(pick(e).samples()));
    }
    out
}

fn stack_2d(items: &[&Array2<f64>]) -> Result<ArrayD<f64>> {
    let (r, c) = items[0].dim();
    let mut out = ArrayD::zeros(IxDyn(&[items.len(), r, c]));
    for (b, a) in items.iter().enumerate() {
        if a.dim() != (r, c) {
            bail!("visual shapes differ within a batch: {:?} vs {:?}", a.dim(), (r, c));
        }
        out.index_axis_mut(Axis(0), b).assign(a);
    }
    Ok(out)
}

impl Batch {
    pub fn new(items: &[&Example]) -> Result<Self> {
        let Some(first) = items.first() else { bail!("empty batch") };
        if items.iter().any(|e| e.len() != first.len()) {
            bail!("batch items must share a length");
        }
        let visual = match &first.visual {
            ExampleVisual::Embedding(_) => {
                let v: Option<Vec<_>> =
                    items.iter().map(|e| if let ExampleVisual::Embedding(a) = &e.visual { Some(a) } else { None }).collect();
                VisualInput::Embedding(stack_2d(&v.context("mixed visual kinds in a batch")?)?)
            }
            ExampleVisual::Features(_) => {
                let v: Option<Vec<_>> =
                    items.iter().map(|e| if let ExampleVisual::Features(a) = &e.visual { Some(a) } else { None }).collect();
                VisualInput::Features(stack_2d(&v.context("mixed visual kinds in a batch")?)?)
            }
        };
        Ok(Self {
            ids: items.iter().map(|e| e.id.clone()).collect(),
            mixture: stack_waves(items, |e| &e.mixture),
            target: stack_waves(items, |e| &e.target),
            noise: stack_waves(items, |e| &e.noise),
            visual,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Shuffled fixed-length batches for one epoch. Examples longer than
/// `segment` are cropped at a random offset.
pub fn epoch_batches<R: Rng>(
    examples: &[Example],
    batch_size: usize,
    segment: usize,
    net: &NetworkConfig,
    rng: &mut R,
) -> Result<Vec<Batch>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    let mut cropped = Vec::with_capacity(order.len());
    for &i in &order {
        let e = &examples[i];
        if e.len() == segment {
            cropped.push(e.clone());
        } else {
            let start = if e.len() > segment { rng.random_range(0..=e.len() - segment) } else { 0 };
            cropped.push(e.crop(start, segment, net)?);
        }
    }
    cropped.chunks(batch_size).map(|c| Batch::new(&c.iter().collect::<Vec<_>>())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn synthetic_split_is_deterministic_and_aligned() {
        let net = NetworkConfig::tiny();
        let a = synthetic_examples(&net, &Scenario::GRID, 5, 0.5, 3, "train").unwrap();
        let b = synthetic_examples(&net, &Scenario::GRID, 5, 0.5, 3, "train").unwrap();
        assert_eq!(a, b);
        let v = synthetic_examples(&net, &Scenario::GRID, 5, 0.5, 3, "val").unwrap();
        assert_ne!(a[0].mixture, v[0].mixture);
        assert_eq!(a[4].scenario, Scenario::S);
        for e in &a {
            let ExampleVisual::Embedding(emb) = &e.visual else { panic!() };
            assert_eq!(emb.dim(), (audio_frames(&net, e.len()), net.visual_dim));
        }
    }

    #[test]
    fn batches_cover_every_example_once() {
        let net = NetworkConfig::tiny();
        let ex = synthetic_examples(&net, &[Scenario::SN], 7, 0.25, 1, "train").unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let batches = epoch_batches(&ex, 3, 4000, &net, &mut rng).unwrap();
        assert_eq!(batches.iter().map(Batch::len).collect::<Vec<_>>(), vec![3, 3, 1]);
        let mut ids: Vec<_> = batches.iter().flat_map(|b| b.ids.clone()).collect();
        ids.sort();
        assert_eq!(ids, ex.iter().map(|e| e.id.clone()).collect::<Vec<_>>());
        assert_eq!(batches[0].mixture.shape(), &[3, 4000]);
        let VisualInput::Embedding(v) = &batches[0].visual else { panic!() };
        assert_eq!(v.shape(), &[3, (4000 - 32) / 16 + 1, net.visual_dim]);
    }

    #[test]
    fn crop_pads_and_keeps_additivity() {
        let net = NetworkConfig::tiny();
        let e = &synthetic_examples(&net, &[Scenario::SS], 1, 0.25, 1, "x").unwrap()[0];
        let c = e.crop(3000, 2000, &net).unwrap();
        assert_eq!(c.len(), 2000);
        assert_eq!(c.mixture.samples()[1500..], [0.0; 500]);
        assert_eq!(c.mixture.samples()[0], e.mixture.samples()[3000]);
    }
}
