//! Named parameter storage and the per-pass forward context.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchStats, Mode};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

/// All parameters of a model, in registration order. Names are layer paths
/// such as `backbone.block1.layer0.conv.weight`.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let tensor = tensor.with_requires_grad(kind == ParamKind::Trainable);
        self.entries.push(ParamEntry { name, kind, tensor });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids()
            .filter(|&id| self.entries[id.0].kind == ParamKind::Trainable)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    pub fn num_trainable_values(&self) -> usize {
        self.trainable().map(|id| self.get(id).numel()).sum()
    }

    /// Overwrites values by name; every stored parameter must be present
    /// with a matching shape.
    pub fn load_values(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} arrays, found {}",
                self.entries.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected array {name:?}")))?;
            let entry = &mut self.entries[id.0];
            if entry.tensor.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "array {name:?} has shape {:?}, model expects {:?}",
                    t.shape(),
                    entry.tensor.shape()
                )));
            }
            entry.tensor.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

/// A pending running-statistics update recorded by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub momentum: f64,
    pub stats: BatchStats,
}

/// State of one forward pass: its tape, the parameters bound so far, the
/// dropout RNG and any batch-norm statistics to fold in afterwards.
///
/// The store is only read during the pass, so independent passes can run on
/// different threads against the same model.
pub struct Forward<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_grads: bool,
    pub rng: ChaCha8Rng,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode, track_grads: bool, seed: u64) -> Self {
        Forward {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            track_grads,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Tape variable for a parameter, recorded on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let entry = self.store.entry(id);
        let trainable = self.track_grads && entry.kind == ParamKind::Trainable;
        let v = self
            .tape
            .leaf(entry.tensor.clone().with_requires_grad(trainable));
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn record_bn(&mut self, update: BnUpdate) {
        self.bn_updates.push(update);
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Gradients of every bound trainable parameter after `tape.backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.tape.grad(v).map(|g| (ParamId(i), g.to_vec()))
            })
            .collect()
    }
}

/// Folds recorded batch statistics into the store's running buffers.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        let mut running = crate::nn::RunningStats {
            mean: store.get(u.mean).data().to_vec(),
            var: store.get(u.var).data().to_vec(),
        };
        running.update(&u.stats, u.momentum);
        store.get_mut(u.mean).data_mut().copy_from_slice(&running.mean);
        store.get_mut(u.var).data_mut().copy_from_slice(&running.var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_once_and_collect_grads() {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamKind::Trainable, Tensor::from_vec(vec![1., 2.]));
        let b = store.add("b", ParamKind::Buffer, Tensor::from_vec(vec![3.]));
        let mut f = Forward::new(&store, Mode::Train, true, 0);
        let v1 = f.param(w);
        let v2 = f.param(w);
        assert_eq!(v1, v2);
        let bv = f.param(b);
        assert!(!f.tape.requires_grad(bv));
        let sq = f.tape.mul(v1, v2).unwrap();
        let loss = f.tape.sum_all(sq);
        f.tape.backward(loss).unwrap();
        let grads = f.param_grads();
        assert_eq!(grads, vec![(w, vec![2., 4.])]);
    }

    #[test]
    fn load_values_checks_names_and_shapes() {
        let mut store = ParamStore::new();
        store.add("a", ParamKind::Trainable, Tensor::zeros(&[2]));
        assert!(store.load_values(&[("a".into(), Tensor::from_vec(vec![1., 2.]))]).is_ok());
        assert_eq!(store.get(store.find("a").unwrap()).data(), &[1., 2.]);
        assert!(store.load_values(&[("b".into(), Tensor::zeros(&[2]))]).is_err());
        assert!(store.load_values(&[("a".into(), Tensor::zeros(&[3]))]).is_err());
    }
}
