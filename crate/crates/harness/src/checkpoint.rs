//! Versioned single-file checkpoints.
//!
//! Layout (little endian): the magic `SEANETCK`, a `u32` format version, a
//! `u64`-prefixed JSON metadata block, a `u64` tensor count, then per tensor
//! a `u32`-prefixed UTF-8 name, a `u32` rank, `u64` dims and raw `f64` data.
//! Tensor names are `param/<path>`, `adam_m/<path>` and `adam_v/<path>`.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use seanet_core::autograd::Array;
use seanet_core::{build_network, Network};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::optim::{Adam, Moments};

pub const MAGIC: &[u8; 8] = b"SEANETCK";
pub const FORMAT_VERSION: u32 = 1;

/// Resumable position of a ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal `u128` word position.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().context("rng word position")?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// Number of completed epochs.
    pub epoch: usize,
    pub adam_step: u64,
    pub best_val_loss: Option<f64>,
    pub rng: Option<RngState>,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Array>,
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl Checkpoint {
    pub fn capture(net: &Network, adam: Option<&Adam>, meta: CheckpointMeta) -> Self {
        let mut tensors = BTreeMap::new();
        for (id, e) in net.store.iter() {
            tensors.insert(format!("param/{}", e.name), e.value.as_ref().clone());
            if let Some(Some(Moments { m, v })) = adam.and_then(|a| a.moments.get(id.index())) {
                tensors.insert(format!("adam_m/{}", e.name), m.clone());
                tensors.insert(format!("adam_v/{}", e.name), v.clone());
            }
        }
        Self { meta, tensors }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(std::fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?);
            w.write_all(MAGIC)?;
            write_u32(&mut w, FORMAT_VERSION)?;
            let meta = serde_json::to_vec(&self.meta)?;
            write_u64(&mut w, meta.len() as u64)?;
            w.write_all(&meta)?;
            write_u64(&mut w, self.tensors.len() as u64)?;
            for (name, t) in &self.tensors {
                write_u32(&mut w, name.len() as u32)?;
                w.write_all(name.as_bytes())?;
                write_u32(&mut w, t.ndim() as u32)?;
                for &d in t.shape() {
                    write_u64(&mut w, d as u64)?;
                }
                for &x in t.iter() {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).with_context(|| format!("opening checkpoint {}", path.display()))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            bail!("{} is not a checkpoint", path.display());
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            bail!("{}: checkpoint format {version}, this build reads {FORMAT_VERSION}", path.display());
        }
        let mut meta = vec![0u8; read_u64(&mut r)? as usize];
        r.read_exact(&mut meta)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta).context("checkpoint metadata")?;
        let count = read_u64(&mut r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let mut name = vec![0u8; read_u32(&mut r)? as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).context("tensor name")?;
            let rank = read_u32(&mut r)? as usize;
            let dims = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<std::io::Result<Vec<_>>>()?;
            let len: usize = dims.iter().product();
            let mut raw = vec![0u8; len * 8];
            r.read_exact(&mut raw)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.insert(name, ArrayD::from_shape_vec(IxDyn(&dims), data)?);
        }
        Ok(Self { meta, tensors })
    }

    /// Rebuilds the network from the stored config and parameter values.
    pub fn network(&self) -> Result<Network> {
        let mut net = build_network(&self.meta.config.network, self.meta.config.seed)?;
        let ids: Vec<_> = net.store.iter().map(|(id, e)| (id, e.name.clone())).collect();
        for (id, name) in ids {
            let t = self.tensors.get(&format!("param/{name}")).with_context(|| format!("checkpoint lacks {name}"))?;
            if t.shape() != net.store.value(id).shape() {
                bail!("{name}: checkpoint shape {:?}, network {:?}", t.shape(), net.store.value(id).shape());
            }
            net.store.set(id, t.clone());
        }
        let expected = net.store.len();
        let stored = self.tensors.keys().filter(|k| k.starts_with("param/")).count();
        if stored != expected {
            bail!("checkpoint holds {stored} parameters, network has {expected}");
        }
        Ok(net)
    }

    /// Copies parameters whose names and shapes match into `net`; returns
    /// how many were loaded.
    pub fn load_matching_into(&self, net: &mut Network) -> usize {
        let ids: Vec<_> = net.store.iter().map(|(id, e)| (id, e.name.clone())).collect();
        let mut n = 0;
        for (id, name) in ids {
            if let Some(t) = self.tensors.get(&format!("param/{name}")) {
                if t.shape() == net.store.value(id).shape() {
                    net.store.set(id, t.clone());
                    n += 1;
                }
            }
        }
        n
    }

    /// Optimizer state for `net`, as saved.
    pub fn adam(&self, net: &Network) -> Adam {
        let mut adam = Adam::new(self.meta.config.adam.clone(), net.store.len());
        adam.step = self.meta.adam_step;
        for (id, e) in net.store.iter() {
            if let (Some(m), Some(v)) =
                (self.tensors.get(&format!("adam_m/{}", e.name)), self.tensors.get(&format!("adam_v/{}", e.name)))
            {
                adam.moments[id.index()] = Some(Moments { m: m.clone(), v: v.clone() });
            }
        }
        adam
    }
}
