//! Training loop with validation, checkpointing and structured logs.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seanet_core::autograd::Tape;
use seanet_core::metrics::si_sdr;
use seanet_core::params::Ctx;
use seanet_core::signal::Waveform;
use seanet_core::{build_network, Network};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta, RngState, FORMAT_VERSION};
use crate::config::{DataConfig, TrainConfig};
use crate::data::{epoch_batches, manifest_examples, synthetic_examples, Batch, Example};
use crate::optim::{global_norm, Adam};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub si_sdri: Option<f64>,
    pub lr: f64,
    pub steps: u64,
}

/// Loss and gradient statistics of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub main: f64,
    pub grad_norm: f64,
}

/// Written when a step produces a non-finite loss or gradient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NanDump {
    pub epoch: usize,
    pub step: u64,
    pub batch_ids: Vec<String>,
    #[serde(with = "lossy_f64")]
    pub loss: f64,
    #[serde(with = "lossy_f64_pairs")]
    pub grad_norms: Vec<(String, f64)>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LossyF64 {
    Number(f64),
    Text(String),
}

impl LossyF64 {
    fn from(x: f64) -> Self {
        if x.is_finite() {
            Self::Number(x)
        } else {
            Self::Text(x.to_string())
        }
    }

    fn value<E: serde::de::Error>(self) -> Result<f64, E> {
        match self {
            Self::Number(x) => Ok(x),
            Self::Text(t) => t.parse().map_err(|_| E::custom(format!("not a number: {t}"))),
        }
    }
}

/// JSON has no NaN or infinity; such values are written as strings.
mod lossy_f64 {
    use super::LossyF64;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        LossyF64::from(*x).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        LossyF64::deserialize(d)?.value()
    }
}

mod lossy_f64_pairs {
    use super::LossyF64;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[(String, f64)], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|(n, x)| (n, LossyF64::from(*x))).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<(String, f64)>, D::Error> {
        Vec::<(String, LossyF64)>::deserialize(d)?.into_iter().map(|(n, x)| Ok((n, x.value()?))).collect()
    }
}

pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
    /// Network with the best validation loss.
    pub best: Network,
    pub best_val_loss: f64,
    pub best_checkpoint: PathBuf,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: Network,
    pub adam: Adam,
    rng: ChaCha8Rng,
    train: Vec<Example>,
    val: Vec<Example>,
    epoch: usize,
}

/// Mean SI-SDR improvement of `est` (`[B, T]`) over the batch mixtures.
fn batch_si_sdri(est: &seanet_core::autograd::Array, batch: &Batch, rate: u32) -> Result<f64> {
    let row = |a: &seanet_core::autograd::Array, b: usize| -> Result<Waveform> {
        Ok(Waveform::new(a.index_axis(ndarray::Axis(0), b).iter().copied().collect(), rate)?)
    };
    let mut total = 0.0;
    for b in 0..batch.len() {
        let (e, m, s) = (row(est, b)?, row(&batch.mixture, b)?, row(&batch.target, b)?);
        total += si_sdr(&e, &s)? - si_sdr(&m, &s)?;
    }
    Ok(total / batch.len() as f64)
}

/// Groups consecutive equal-length examples into batches of at most `size`.
fn eval_batches(examples: &[Example], size: usize) -> Result<Vec<Batch>> {
    let mut out = Vec::new();
    let mut current: Vec<&Example> = Vec::new();
    for e in examples {
        if current.len() == size || current.first().is_some_and(|f| f.len() != e.len()) {
            out.push(Batch::new(&current)?);
            current.clear();
        }
        current.push(e);
    }
    if !current.is_empty() {
        out.push(Batch::new(&current)?);
    }
    Ok(out)
}

pub fn load_data(cfg: &TrainConfig) -> Result<(Vec<Example>, Vec<Example>)> {
    match &cfg.data {
        DataConfig::Synthetic { train_count, val_count, scenarios, seed } => Ok((
            synthetic_examples(&cfg.network, scenarios, *train_count, cfg.segment_seconds, *seed, "train")?,
            synthetic_examples(&cfg.network, scenarios, *val_count, cfg.segment_seconds, *seed, "val")?,
        )),
        DataConfig::Manifest { train, val } => {
            Ok((manifest_examples(train, &cfg.network)?, manifest_examples(val, &cfg.network)?))
        }
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let (train, val) = load_data(&cfg)?;
        Self::with_data(cfg, train, val)
    }

    pub fn with_data(cfg: TrainConfig, train: Vec<Example>, val: Vec<Example>) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() || val.is_empty() {
            bail!("training needs non-empty train and validation sets");
        }
        let mut net = build_network(&cfg.network, cfg.seed)?;
        if let Some(path) = &cfg.init_from {
            let n = Checkpoint::load(path)?.load_matching_into(&mut net);
            log::info!("initialised {n} of {} parameters from {}", net.store.len(), path.display());
        }
        let adam = Adam::new(cfg.adam.clone(), net.store.len());
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self { cfg, net, adam, rng, train, val, epoch: 0 })
    }

    /// Continues a run from a checkpoint written by [`Trainer::run`].
    pub fn resume(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let cfg = ck.meta.config.clone();
        let (train, val) = load_data(&cfg)?;
        let mut t = Self::with_data(TrainConfig { init_from: None, ..cfg }, train, val)?;
        t.net = ck.network()?;
        t.adam = ck.adam(&t.net);
        t.epoch = ck.meta.epoch;
        if let Some(r) = &ck.meta.rng {
            t.rng = r.restore()?;
        }
        Ok(t)
    }

    /// One optimizer step on `batch` at `lr`.
    pub fn step(&mut self, batch: &Batch, lr: f64) -> Result<StepReport> {
        let (loss, main, grads, buffers) = {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &self.net.store, true, true);
            let pass = self.net.forward(&ctx, &batch.mixture, &batch.visual)?;
            let terms = self.net.loss(&pass, &batch.target, &batch.noise)?;
            let (loss, main) = (terms.total.item(), terms.main.item());
            let mut g = tape.backward(terms.total);
            (loss, main, ctx.param_grads(&mut g), ctx.take_buffer_updates())
        };
        let norm = global_norm(&grads);
        if !loss.is_finite() || !norm.is_finite() {
            let dump = NanDump {
                epoch: self.epoch,
                step: self.adam.step,
                batch_ids: batch.ids.clone(),
                loss,
                grad_norms: grads
                    .iter()
                    .map(|(id, g)| (self.net.store.entry(*id).name.clone(), g.iter().map(|x| x * x).sum::<f64>().sqrt()))
                    .collect(),
            };
            let path = self.cfg.out_dir.join("nan_dump.json");
            std::fs::create_dir_all(&self.cfg.out_dir)?;
            std::fs::write(&path, serde_json::to_string_pretty(&dump)?)?;
            bail!("non-finite loss {loss} or gradient norm {norm} at step {}; diagnostics in {}", self.adam.step, path.display());
        }
        let stats = self.adam.step(&mut self.net.store, grads, lr, self.cfg.grad_clip);
        for (id, v) in buffers {
            self.net.store.set(id, v);
        }
        Ok(StepReport { loss, main, grad_norm: stats.grad_norm })
    }

    /// Mean loss and SI-SDR improvement over the validation set, in
    /// evaluation mode.
    pub fn validate(&self) -> Result<(f64, f64)> {
        let (mut loss, mut sdri, mut n) = (0.0, 0.0, 0.0);
        for batch in eval_batches(&self.val, self.cfg.batch_size)? {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &self.net.store, false, false);
            let pass = self.net.forward(&ctx, &batch.mixture, &batch.visual)?;
            let terms = self.net.loss(&pass, &batch.target, &batch.noise)?;
            let est = pass.outputs.estimate().context("no speech estimate")?.value();
            let b = batch.len() as f64;
            loss += terms.total.item() * b;
            sdri += batch_si_sdri(&est, &batch, self.cfg.network.sample_rate)? * b;
            n += b;
        }
        Ok((loss / n, sdri / n))
    }

    fn checkpoint(&self, best_val_loss: Option<f64>) -> Checkpoint {
        Checkpoint::capture(
            &self.net,
            Some(&self.adam),
            CheckpointMeta {
                format_version: FORMAT_VERSION,
                epoch: self.epoch,
                adam_step: self.adam.step,
                best_val_loss,
                rng: Some(RngState::capture(&self.rng)),
                config: self.cfg.clone(),
            },
        )
    }

    /// Trains until `max_epochs`, validating every `validate_every` epochs
    /// and after the last one. Writes `train.jsonl`, `best.ckpt` and
    /// `last.ckpt` to the output directory.
    pub fn run(mut self) -> Result<TrainOutcome> {
        let dir = self.cfg.out_dir.clone();
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("config.toml"), self.cfg.to_toml()?)?;
        let mut log_file = std::fs::OpenOptions::new().create(true).append(true).open(dir.join("train.jsonl"))?;
        let best_path = dir.join("best.ckpt");
        let mut log = Vec::new();
        let mut best: Option<(f64, Network)> = None;
        let segment = self.cfg.segment_samples();
        while self.epoch < self.cfg.max_epochs {
            let lr = self.cfg.lr_at(self.epoch);
            let batches = epoch_batches(&self.train, self.cfg.batch_size, segment, &self.cfg.network, &mut self.rng)?;
            let mut total = 0.0;
            let mut count = 0.0;
            for batch in &batches {
                let r = self.step(batch, lr)?;
                total += r.loss * batch.len() as f64;
                count += batch.len() as f64;
            }
            self.epoch += 1;
            let mut records = vec![LogRecord {
                epoch: self.epoch,
                split: "train".into(),
                loss: total / count,
                si_sdri: None,
                lr,
                steps: self.adam.step,
            }];
            if self.epoch % self.cfg.validate_every == 0 || self.epoch == self.cfg.max_epochs {
                let (val_loss, val_sdri) = self.validate()?;
                records.push(LogRecord {
                    epoch: self.epoch,
                    split: "val".into(),
                    loss: val_loss,
                    si_sdri: Some(val_sdri),
                    lr,
                    steps: self.adam.step,
                });
                if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
                    self.checkpoint(Some(val_loss)).save(&best_path)?;
                    best = Some((val_loss, self.net.clone()));
                }
                log::info!("epoch {} train {:.3} val {:.3} si-sdri {:.2} dB", self.epoch, total / count, val_loss, val_sdri);
            }
            for r in records {
                writeln!(log_file, "{}", serde_json::to_string(&r)?)?;
                log.push(r);
            }
        }
        let best_val = best.as_ref().map(|(b, _)| *b);
        self.checkpoint(best_val).save(&dir.join("last.ckpt"))?;
        let (best_val_loss, best_net) = best.context("no validation was run")?;
        Ok(TrainOutcome { log, best: best_net, best_val_loss, best_checkpoint: best_path })
    }
}

/// Repeated steps on one fixed batch at a constant learning rate; returns
/// the loss before each step and after the last.
pub fn overfit(cfg: &TrainConfig, batch: &Batch, steps: usize) -> Result<Vec<f64>> {
    let mut net = build_network(&cfg.network, cfg.seed)?;
    let mut adam = Adam::new(cfg.adam.clone(), net.store.len());
    let eval = |net: &Network| -> Result<f64> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &net.store, true, false);
        let pass = net.forward(&ctx, &batch.mixture, &batch.visual)?;
        Ok(net.loss(&pass, &batch.target, &batch.noise)?.total.item())
    };
    let mut losses = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let (loss, grads, buffers) = {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &net.store, true, true);
            let pass = net.forward(&ctx, &batch.mixture, &batch.visual)?;
            let total = net.loss(&pass, &batch.target, &batch.noise)?.total;
            let mut g = tape.backward(total);
            (total.item(), ctx.param_grads(&mut g), ctx.take_buffer_updates())
        };
        if !loss.is_finite() {
            bail!("non-finite loss while overfitting");
        }
        losses.push(loss);
        adam.step(&mut net.store, grads, cfg.lr, cfg.grad_clip);
        for (id, v) in buffers {
            net.store.set(id, v);
        }
    }
    losses.push(eval(&net)?);
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use seanet_core::signal::Scenario;

    fn quick(dir: &Path) -> TrainConfig {
        let mut cfg = TrainConfig::desk();
        cfg.network.blocks = 1;
        cfg.max_epochs = 2;
        cfg.validate_every = 1;
        cfg.segment_seconds = 0.25;
        cfg.data = DataConfig::Synthetic { train_count: 4, val_count: 2, scenarios: vec![Scenario::SN], seed: 3 };
        cfg.out_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn run_writes_logs_and_checkpoints_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let out = Trainer::new(quick(dir.path())).unwrap().run().unwrap();
        assert_eq!(out.log.iter().map(|r| r.split.as_str()).collect::<Vec<_>>(), ["train", "val", "train", "val"]);
        assert_eq!(out.log[2].lr, 1e-3);
        let lines = std::fs::read_to_string(dir.path().join("train.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 4);
        assert!(dir.path().join("best.ckpt").exists());
        let last = Checkpoint::load(&dir.path().join("last.ckpt")).unwrap();
        assert_eq!(last.meta.epoch, 2);
        assert_eq!(last.meta.adam_step, 2);

        let mut cfg = last.meta.config.clone();
        cfg.max_epochs = 3;
        let mut ck = last.clone();
        ck.meta.config = cfg;
        let p = dir.path().join("resume.ckpt");
        ck.save(&p).unwrap();
        let resumed = Trainer::resume(&p).unwrap().run().unwrap();
        assert_eq!(resumed.log.len(), 2);
        assert_eq!(resumed.log[0].epoch, 3);
    }

    #[test]
    fn non_finite_loss_aborts_with_dump() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(quick(dir.path())).unwrap();
        let id = t.net.store.trainable_ids()[0];
        let mut v = t.net.store.value(id).clone();
        v.fill(f64::NAN);
        t.net.store.set(id, v);
        let batch = Batch::new(&[&t.train[0]]).unwrap();
        let err = t.step(&batch, 1e-3).unwrap_err().to_string();
        assert!(err.contains("non-finite"), "{err}");
        let dump: NanDump = serde_json::from_str(&std::fs::read_to_string(dir.path().join("nan_dump.json")).unwrap()).unwrap();
        assert_eq!(dump.batch_ids, vec![t.train[0].id.clone()]);
        assert!(dump.loss.is_nan());
    }
}
