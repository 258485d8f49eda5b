//! Backbone plus head over one parameter store, and batch gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use crate::autograd::Var;
use crate::data::derive_seed;
use crate::densenet::{build_backbone, DenseNet};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::params::{BnUpdate, Forward, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::wsl::{self, Heatmap, WslHead};

#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub store: ParamStore,
    backbone: DenseNet,
    head: WslHead,
}

impl Model {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let backbone = build_backbone(&config.net, &mut store, "backbone", &mut rng)?;
        let head = WslHead::build(&config.head, backbone.out_channels(), &mut store, "head", &mut rng)?;
        config.head.warn_if_clamped(config.heatmap_side().pow(2));
        Ok(Model { config: config.clone(), store, backbone, head })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = Model::new(&ck.config)?;
        model.store.load_values(&ck.arrays)?;
        Ok(model)
    }

    pub fn checkpoint(&self, epoch: u64) -> Checkpoint {
        Checkpoint::from_store(&self.config, epoch, &self.store)
    }

    /// Swaps in test-time pooling settings; parameters are unaffected.
    pub fn set_test_pooling(&mut self, k_plus: usize, k_minus: usize, alpha: f64) {
        self.config.head.k_plus_test = k_plus;
        self.config.head.k_minus_test = k_minus;
        self.config.head.alpha = alpha;
        self.head.set_test_pooling(k_plus, k_minus, alpha);
    }

    pub fn num_classes(&self) -> usize {
        self.config.head.num_classes()
    }

    pub fn heatmap_var(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let features = self.backbone.forward(f, x)?;
        self.head.heatmap(f, features)
    }

    /// Eval-mode heatmaps `[N, C, h, w]` for a batch `[N, 3, H, W]`.
    pub fn heatmaps(&self, inputs: &Tensor) -> Result<Heatmap> {
        let mut f = Forward::new(&self.store, Mode::Eval, false, 0);
        let x = f.input(inputs.clone());
        let h = self.heatmap_var(&mut f, x)?;
        Ok(Heatmap(f.tape.value(h).clone()))
    }

    /// Test-time logits of a heatmap batch.
    pub fn test_logits(&self, heatmap: &Heatmap) -> Tensor {
        let h = &self.config.head;
        wsl::spatial_pool_test_values(heatmap, h.k_plus_test, h.k_minus_test, h.alpha)
    }
}

/// Loss, parameter gradients, batch-norm updates and train-pooling logits
/// of one batch.
#[derive(Clone, Debug)]
pub struct BatchResult {
    pub loss: f64,
    pub grads: Vec<(ParamId, Vec<f64>)>,
    pub bn_updates: Vec<BnUpdate>,
    pub logits: Tensor,
}

/// Contiguous shard ranges: at most `workers` shards of at least two
/// samples each, sizes differing by at most one.
pub fn shard_ranges(n: usize, workers: usize) -> Vec<std::ops::Range<usize>> {
    let shards = workers.min(n / 2).max(1);
    let (base, extra) = (n / shards, n % shards);
    let mut start = 0;
    (0..shards)
        .map(|s| {
            let len = base + usize::from(s < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

struct ShardOut {
    weight: f64,
    loss: f64,
    grads: Vec<(ParamId, Vec<f64>)>,
    bn: Vec<BnUpdate>,
    logits: Tensor,
}

/// Runs forward and backward with train-time spatial pooling, splitting the
/// batch into shards that run independently (in parallel when enabled).
/// Shard results are combined in shard order with weights `n_s / N`, which
/// reproduces the full-batch mean loss; batch-norm statistics stay
/// per shard and are averaged.
pub fn batch_gradients(
    model: &Model,
    inputs: &Tensor,
    targets: &Tensor,
    weights: (&[f64], &[f64]),
    mode: Mode,
    workers: usize,
    seed: u64,
) -> Result<BatchResult> {
    let n = inputs.shape()[0];
    if targets.shape() != [n, model.num_classes()] {
        return Err(Error::shape(
            "batch_gradients",
            format!("targets {:?} for {n} inputs and {} classes", targets.shape(), model.num_classes()),
        ));
    }
    let ranges = shard_ranges(n, workers);
    let outs = crate::par::map_slice(&ranges, |range| -> Result<ShardOut> {
        let idx: Vec<usize> = range.clone().collect();
        let x = inputs.select_rows(&idx)?;
        let y = targets.select_rows(&idx)?;
        let mut f = Forward::new(&model.store, mode, true, derive_seed(seed, range.start as u64, 0));
        let xv = f.input(x);
        let heat = model.heatmap_var(&mut f, xv)?;
        let k = model.config.head.k_plus_train;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, range.start as u64, 1));
        let logits = wsl::spatial_pool_train(&mut f.tape, heat, k, &mut rng)?;
        let loss = wsl::weighted_bce(&mut f.tape, logits, &y, weights.0, weights.1)?;
        let loss_value = f.tape.value(loss).data()[0];
        let logits_value = f.tape.value(logits).clone();
        f.tape.backward(loss)?;
        Ok(ShardOut {
            weight: range.len() as f64 / n as f64,
            loss: loss_value,
            grads: f.param_grads(),
            bn: f.take_bn_updates(),
            logits: logits_value,
        })
    });
    let outs: Vec<ShardOut> = outs.into_iter().collect::<Result<_>>()?;
    combine(outs)
}

fn combine(outs: Vec<ShardOut>) -> Result<BatchResult> {
    let mut iter = outs.into_iter();
    let first = iter.next().expect("at least one shard");
    let w0 = first.weight;
    let mut loss = w0 * first.loss;
    let mut grads: Vec<(ParamId, Vec<f64>)> = first
        .grads
        .into_iter()
        .map(|(id, g)| (id, g.into_iter().map(|v| w0 * v).collect()))
        .collect();
    let mut bn = first.bn;
    for u in &mut bn {
        u.stats.mean.iter_mut().for_each(|v| *v *= w0);
        u.stats.var.iter_mut().for_each(|v| *v *= w0);
    }
    let mut logits = vec![first.logits];
    for shard in iter {
        let w = shard.weight;
        loss += w * shard.loss;
        for ((id, acc), (id2, g)) in grads.iter_mut().zip(&shard.grads) {
            debug_assert_eq!(id, id2);
            acc.iter_mut().zip(g).for_each(|(a, v)| *a += w * v);
        }
        for (acc, u) in bn.iter_mut().zip(&shard.bn) {
            acc.stats.mean.iter_mut().zip(&u.stats.mean).for_each(|(a, v)| *a += w * v);
            acc.stats.var.iter_mut().zip(&u.stats.var).for_each(|(a, v)| *a += w * v);
        }
        logits.push(shard.logits);
    }
    let rows: Vec<Tensor> = logits;
    let c = rows[0].shape()[1];
    let data: Vec<f64> = rows.iter().flat_map(|t| t.data().iter().copied()).collect();
    let n = data.len() / c.max(1);
    Ok(BatchResult { loss, grads, bn_updates: bn, logits: Tensor::new(&[n, c], data)? })
}
