//! Named parameter storage, initialisation and per-pass binding to a tape.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Array, Gradients, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Rc<Array>,
    /// Buffers such as running statistics are stored but never optimised.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new entry. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Array, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            value: Rc::new(value.as_standard_layout().into_owned()),
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        Rc::make_mut(&mut self.entries[id.0].value)
    }

    /// Replaces a value, which must keep its shape.
    pub fn set(&mut self, id: ParamId, value: Array) {
        let entry = &mut self.entries[id.0];
        assert_eq!(entry.value.shape(), value.shape(), "set {}: shape change", entry.name);
        entry.value = Rc::new(value.as_standard_layout().into_owned());
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, e)| e.trainable).map(|(id, _)| id).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Trainable scalar count grouped by the first `depth` dot-separated
    /// components of each name.
    pub fn breakdown(&self, depth: usize) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for e in self.entries.iter().filter(|e| e.trainable) {
            let key = e.name.split('.').take(depth).collect::<Vec<_>>().join(".");
            *out.entry(key).or_insert(0) += e.value.len();
        }
        out
    }

    /// Copies every entry whose name and shape match one in `other`; returns
    /// how many were copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for e in &mut self.entries {
            if let Some(src) = other.id(&e.name).map(|id| other.entry(id)) {
                if src.value.shape() == e.value.shape() {
                    e.value = Rc::clone(&src.value);
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Copies all values from a store with the same layout.
    pub fn load_exact(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Shape(format!("parameter count {} vs {}", other.len(), self.len())));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Shape(format!("parameter {} does not match {}", a.name, b.name)));
            }
            a.value = Rc::clone(&b.value);
        }
        Ok(())
    }
}

/// Seeded initialiser that registers parameters under a name prefix.
pub struct Init<'s> {
    store: &'s mut ParamStore,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'s> Init<'s> {
    pub fn new(store: &'s mut ParamStore, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed), prefix: Vec::new() }
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn add(&mut self, name: &str, value: Array, trainable: bool) -> ParamId {
        let full = self.full_name(name);
        self.store.add(full, value, trainable)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.add(name, ArrayD::from_elem(IxDyn(shape), value), true)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.add(name, ArrayD::from_elem(IxDyn(shape), value), false)
    }

    /// Xavier-uniform `[fan_out, fan_in]` matrix.
    pub fn xavier(&mut self, name: &str, fan_out: usize, fan_in: usize) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut self.rng;
        let w = ArrayD::from_shape_fn(IxDyn(&[fan_out, fan_in]), |_| rng.random_range(-bound..bound));
        self.add(name, w, true)
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let w = ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..bound));
        self.add(name, w, true)
    }

    /// `[rows, cols]` with orthonormal columns stacked per `cols`-row block;
    /// used for recurrent weights `[4H, H]`.
    pub fn orthogonal_blocks(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let mut w = ArrayD::zeros(IxDyn(&[rows, cols]));
        for block in 0..rows.div_ceil(cols) {
            let q = random_orthogonal(cols, &mut self.rng);
            for i in 0..cols {
                let r = block * cols + i;
                if r >= rows {
                    break;
                }
                for j in 0..cols {
                    w[[r, j]] = q[i][j];
                }
            }
        }
        self.add(name, w, true)
    }
}

/// Gram-Schmidt orthonormalisation of a Gaussian matrix.
fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    rows
}

/// Binds parameters of a [`ParamStore`] to a tape for one forward pass.
pub struct Ctx<'t> {
    tape: &'t Tape,
    store: &'t ParamStore,
    bound: RefCell<Vec<Option<Var<'t>>>>,
    train: bool,
    grad: bool,
    buffer_updates: RefCell<Vec<(ParamId, Array)>>,
}

impl<'t> Ctx<'t> {
    /// `train` selects batch statistics in normalisation layers; `grad`
    /// records trainable parameters as differentiable leaves.
    pub fn new(tape: &'t Tape, store: &'t ParamStore, train: bool, grad: bool) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            train,
            grad,
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'t ParamStore {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let entry = self.store.entry(id);
        let value = Rc::clone(&entry.value);
        let v = if self.grad && entry.trainable {
            self.tape.leaf_shared(value)
        } else {
            self.tape.constant_shared(value)
        };
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn constant(&self, value: Array) -> Var<'t> {
        self.tape.constant(value)
    }

    /// Queues a new value for a non-trainable buffer.
    pub fn update_buffer(&self, id: ParamId, value: Array) {
        self.buffer_updates.borrow_mut().push((id, value));
    }

    pub fn take_buffer_updates(&self) -> Vec<(ParamId, Array)> {
        std::mem::take(&mut self.buffer_updates.borrow_mut())
    }

    /// Gradients of every parameter that took part in the pass.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<(ParamId, Array)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| grads.take(v)).map(|g| (ParamId(i), g)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_blocks_are_orthonormal() {
        let mut store = ParamStore::new();
        let id = Init::new(&mut store, 3).orthogonal_blocks("w", 8, 4);
        let w = store.value(id);
        for b in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    let d: f64 = (0..4).map(|k| w[[b * 4 + i, k]] * w[[b * 4 + j, k]]).sum();
                    assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn scopes_and_breakdown() {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 0);
        init.scope("enc", |i| i.xavier("w", 3, 2));
        init.scope("dec", |i| i.scope("lin", |i| i.constant("b", &[4], 0.0)));
        init.buffer("stat", &[5], 1.0);
        assert!(store.id("dec.lin.b").is_some());
        assert_eq!(store.trainable_count(), 10);
        let b = store.breakdown(1);
        assert_eq!(b["enc"], 6);
        assert_eq!(b["dec"], 4);
    }

    #[test]
    fn ctx_binds_once_and_respects_trainable() {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 0);
        let w = init.xavier("w", 2, 2);
        let s = init.buffer("s", &[2], 0.0);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, true, true);
        assert_eq!(ctx.param(w).id(), ctx.param(w).id());
        assert!(ctx.param(w).requires_grad());
        assert!(!ctx.param(s).requires_grad());
    }
}
