//! Weakly supervised pooling head.
//!
//! The bridging layer is a 1×1 convolution from backbone features to `M·C`
//! sub-maps; output channel `c·M + m` holds sub-map `m` of class `c`.
//! Class-wise pooling averages the `M` sub-maps of each class into a heatmap.
//! Spatial pooling reduces each heatmap to one logit: during training a
//! uniformly random element of the top-`k+` set, at test time
//! `mean(top k+) + α·mean(bottom k−)`.
//!
//! Top/bottom sets are ordered by value with the row-major spatial index as
//! tiebreaker, and `k` larger than `H·W` is clamped to `H·W`. The two sets
//! are chosen independently and may overlap on small maps.

use rand::Rng;

use crate::autograd::{sigmoid, Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Conv2dSpec};
use crate::params::{Forward, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    /// Sub-maps per class.
    pub m: usize,
    pub k_plus_train: usize,
    pub k_plus_test: usize,
    pub k_minus_test: usize,
    pub alpha: f64,
    pub class_names: Vec<String>,
}

impl HeadConfig {
    pub fn new(class_names: Vec<String>) -> Self {
        HeadConfig {
            m: 14,
            k_plus_train: 10,
            k_plus_test: 15,
            k_minus_test: 15,
            alpha: 1.0,
            class_names,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("head.m must be at least 1".into()));
        }
        if self.class_names.is_empty() {
            return Err(Error::Config("at least one class is required".into()));
        }
        if self.k_plus_train == 0 || self.k_plus_test == 0 || self.k_minus_test == 0 {
            return Err(Error::Config("k values must be at least 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha {} must be finite and >= 0", self.alpha)));
        }
        Ok(())
    }

    /// Logs a warning for every k that exceeds a heatmap of `hw` cells.
    pub fn warn_if_clamped(&self, hw: usize) {
        for (name, k) in [
            ("k_plus_train", self.k_plus_train),
            ("k_plus_test", self.k_plus_test),
            ("k_minus_test", self.k_minus_test),
        ] {
            if k > hw {
                log::warn!("head.{name}={k} exceeds the {hw} heatmap cells; clamped to {hw}");
            }
        }
    }
}

/// Per-class maps `[N, C, H, W]` from class-wise pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap(pub Tensor);

impl Heatmap {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.0.dims4("heatmap").expect("heatmaps are 4-D")
    }

    /// The `H·W` values of one image and class.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let (_, cc, h, w) = self.dims();
        let start = (n * cc + c) * h * w;
        &self.0.data()[start..start + h * w]
    }
}

/// Final class logits `[N, C]` and their sigmoid probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    pub logits: Tensor,
    pub probabilities: Tensor,
}

impl ClassScores {
    pub fn from_logits(logits: Tensor) -> Self {
        let probs = logits.data().iter().map(|&z| sigmoid(z)).collect();
        let probabilities = Tensor::new(logits.shape(), probs).expect("same shape");
        ClassScores {
            logits,
            probabilities,
        }
    }
}

/// Bridging layer parameters.
#[derive(Clone, Debug)]
pub struct WslHead {
    cfg: HeadConfig,
    in_channels: usize,
    weight: ParamId,
    bias: ParamId,
}

impl WslHead {
    pub fn build<R: Rng + ?Sized>(
        cfg: &HeadConfig,
        in_channels: usize,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.m * cfg.num_classes();
        let w = Tensor::randn(&[out, in_channels, 1, 1], (2.0 / in_channels as f64).sqrt(), rng);
        Ok(WslHead {
            cfg: cfg.clone(),
            in_channels,
            weight: store.add(format!("{prefix}.bridge.weight"), ParamKind::Trainable, w),
            bias: store.add(format!("{prefix}.bridge.bias"), ParamKind::Trainable, Tensor::zeros(&[out])),
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.cfg
    }

    /// Test-time pooling parameters do not change the parameters, so they
    /// can be swapped on a trained head.
    pub fn set_test_pooling(&mut self, k_plus: usize, k_minus: usize, alpha: f64) {
        self.cfg.k_plus_test = k_plus;
        self.cfg.k_minus_test = k_minus;
        self.cfg.alpha = alpha;
    }

    /// Features → sub-maps → heatmap.
    pub fn heatmap(&self, f: &mut Forward<'_>, features: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let b = f.param(self.bias);
        let sub = bridging(&mut f.tape, features, w, Some(b), &self.cfg, self.in_channels)?;
        class_wise_pool(&mut f.tape, sub, self.cfg.m)
    }
}

/// 1×1 convolution from `in_channels` features to `M·C` sub-maps.
pub fn bridging(
    tape: &mut Tape,
    features: Var,
    weight: Var,
    bias: Option<Var>,
    head: &HeadConfig,
    in_channels: usize,
) -> Result<Var> {
    let spec = Conv2dSpec::same(in_channels, head.m * head.num_classes(), 1, 1);
    nn::conv2d(tape, features, weight, bias, &spec)
}

/// Mean over each class's `M` consecutive sub-map channels.
pub fn class_wise_pool(tape: &mut Tape, submaps: Var, m: usize) -> Result<Var> {
    let (n, mc, h, w) = tape.value(submaps).dims4("class_wise_pool")?;
    if m == 0 || mc % m != 0 {
        return Err(Error::shape(
            "class_wise_pool",
            format!("{mc} channels not divisible into groups of M={m}"),
        ));
    }
    let c = mc / m;
    let hw = h * w;
    let src = tape.value(submaps).data();
    let mut out = vec![0.0; n * c * hw];
    for i in 0..n {
        for cls in 0..c {
            let dst = &mut out[(i * c + cls) * hw..(i * c + cls + 1) * hw];
            for sub in 0..m {
                let ch = cls * m + sub;
                let s = &src[(i * mc + ch) * hw..(i * mc + ch + 1) * hw];
                dst.iter_mut().zip(s).for_each(|(d, v)| *d += v);
            }
            dst.iter_mut().for_each(|d| *d /= m as f64);
        }
    }
    let out = Tensor::new(&[n, c, h, w], out)?;
    Ok(tape.push(out, &[submaps], Box::new(ClassWisePoolOp { m, dims: (n, c, hw) })))
}

struct ClassWisePoolOp {
    m: usize,
    dims: (usize, usize, usize),
}

impl Backward for ClassWisePoolOp {
    fn name(&self) -> &'static str {
        "class_wise_pool"
    }

    fn backward(&self, _: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (n, c, hw) = self.dims;
        let m = self.m;
        let inv = 1.0 / m as f64;
        let mut dx = Vec::with_capacity(n * c * m * hw);
        for i in 0..n {
            for cls in 0..c {
                let gs = &g[(i * c + cls) * hw..(i * c + cls + 1) * hw];
                for _ in 0..m {
                    dx.extend(gs.iter().map(|v| v * inv));
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Indices of the `k` largest values (clamped to `len`), largest first,
/// lower index first among equal values.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k.min(values.len()));
    idx
}

/// Indices of the `k` smallest values, smallest first, lower index first
/// among equal values.
pub fn bottom_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx.truncate(k.min(values.len()));
    idx
}

fn heatmap_dims(tape: &Tape, heatmap: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = tape.value(heatmap).dims4(op)?;
    if h * w == 0 {
        return Err(Error::invalid(op, "empty heatmap"));
    }
    Ok((n, c, h * w))
}

/// Train-time spatial pooling: per image and class, one element drawn
/// uniformly from the top-`k` set. The gradient flows to that element only.
pub fn spatial_pool_train<R: Rng + ?Sized>(
    tape: &mut Tape,
    heatmap: Var,
    k: usize,
    rng: &mut R,
) -> Result<Var> {
    let (n, c, hw) = heatmap_dims(tape, heatmap, "spatial_pool_train")?;
    if k == 0 {
        return Err(Error::invalid("spatial_pool_train", "k must be at least 1"));
    }
    let data = tape.value(heatmap).data();
    let mut out = Vec::with_capacity(n * c);
    let mut selected = Vec::with_capacity(n * c);
    for plane in 0..n * c {
        let values = &data[plane * hw..(plane + 1) * hw];
        let top = top_k_indices(values, k);
        let pick = top[rng.random_range(0..top.len())];
        out.push(values[pick]);
        selected.push(plane * hw + pick);
    }
    let out = Tensor::new(&[n, c], out)?;
    Ok(tape.push(out, &[heatmap], Box::new(SelectOp { selected })))
}

struct SelectOp {
    selected: Vec<usize>,
}

impl Backward for SelectOp {
    fn name(&self) -> &'static str {
        "spatial_pool_train"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; ctx.input(0).numel()];
        for (&idx, &gv) in self.selected.iter().zip(g) {
            dx[idx] += gv;
        }
        vec![Some(dx)]
    }
}

/// `mean(top k+) + α·mean(bottom k−)` of one heatmap plane.
pub fn test_score(values: &[f64], k_plus: usize, k_minus: usize, alpha: f64) -> f64 {
    let top = top_k_indices(values, k_plus);
    let bottom = bottom_k_indices(values, k_minus);
    let top_mean = top.iter().map(|&i| values[i]).sum::<f64>() / top.len() as f64;
    let bottom_mean = bottom.iter().map(|&i| values[i]).sum::<f64>() / bottom.len() as f64;
    top_mean + alpha * bottom_mean
}

/// Applies [`test_score`] to every plane of a heatmap tensor.
pub fn spatial_pool_test_values(heatmap: &Heatmap, k_plus: usize, k_minus: usize, alpha: f64) -> Tensor {
    let (n, c, _, _) = heatmap.dims();
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        for cls in 0..c {
            out.push(test_score(heatmap.plane(i, cls), k_plus, k_minus, alpha));
        }
    }
    Tensor::new(&[n, c], out).expect("n·c values")
}

/// Test-time spatial pooling. Deterministic.
pub fn spatial_pool_test(
    tape: &mut Tape,
    heatmap: Var,
    k_plus: usize,
    k_minus: usize,
    alpha: f64,
) -> Result<Var> {
    let (n, c, hw) = heatmap_dims(tape, heatmap, "spatial_pool_test")?;
    if k_plus == 0 || k_minus == 0 {
        return Err(Error::invalid("spatial_pool_test", "k values must be at least 1"));
    }
    let data = tape.value(heatmap).data();
    let mut out = Vec::with_capacity(n * c);
    let mut weights = Vec::with_capacity(n * c);
    for plane in 0..n * c {
        let values = &data[plane * hw..(plane + 1) * hw];
        let top = top_k_indices(values, k_plus);
        let bottom = bottom_k_indices(values, k_minus);
        let (wt, wb) = (1.0 / top.len() as f64, alpha / bottom.len() as f64);
        let mut contrib: Vec<(usize, f64)> = Vec::with_capacity(top.len() + bottom.len());
        contrib.extend(top.iter().map(|&i| (plane * hw + i, wt)));
        contrib.extend(bottom.iter().map(|&i| (plane * hw + i, wb)));
        out.push(test_score(values, k_plus, k_minus, alpha));
        weights.push(contrib);
    }
    let out = Tensor::new(&[n, c], out)?;
    Ok(tape.push(out, &[heatmap], Box::new(TestPoolOp { weights })))
}

struct TestPoolOp {
    weights: Vec<Vec<(usize, f64)>>,
}

impl Backward for TestPoolOp {
    fn name(&self) -> &'static str {
        "spatial_pool_test"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; ctx.input(0).numel()];
        for (contrib, &gv) in self.weights.iter().zip(g) {
            for &(idx, w) in contrib {
                dx[idx] += w * gv;
            }
        }
        vec![Some(dx)]
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn check_bce_inputs(logits: &Tensor, targets: &Tensor, w_plus: &[f64], w_minus: &[f64]) -> Result<usize> {
    let [_, c] = *logits.shape() else {
        return Err(Error::shape("weighted_bce", format!("logits must be [N,C], got {:?}", logits.shape())));
    };
    if targets.shape() != logits.shape() {
        return Err(Error::shape(
            "weighted_bce",
            format!("targets {:?} vs logits {:?}", targets.shape(), logits.shape()),
        ));
    }
    if w_plus.len() != c || w_minus.len() != c {
        return Err(Error::shape("weighted_bce", format!("class weights must have {c} entries")));
    }
    if w_plus.iter().chain(w_minus).any(|w| !(*w >= 0.0)) {
        return Err(Error::invalid("weighted_bce", "class weights must be nonnegative"));
    }
    if targets.data().iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::invalid("weighted_bce", "labels must be 0 or 1"));
    }
    Ok(c)
}

/// Weighted binary cross entropy on logits, averaged over all (n, c):
/// `-w+·y·log σ(z) - w−·(1-y)·log(1-σ(z))`, evaluated as
/// `w+·y·softplus(-z) + w−·(1-y)·softplus(z)`.
pub fn weighted_bce(
    tape: &mut Tape,
    logits: Var,
    targets: &Tensor,
    w_plus: &[f64],
    w_minus: &[f64],
) -> Result<Var> {
    let z = tape.value(logits);
    let c = check_bce_inputs(z, targets, w_plus, w_minus)?;
    let count = z.numel().max(1) as f64;
    let mut total = 0.0;
    for (i, (&zi, &y)) in z.data().iter().zip(targets.data()).enumerate() {
        let cls = i % c;
        total += w_plus[cls] * y * softplus(-zi) + w_minus[cls] * (1.0 - y) * softplus(zi);
    }
    let op = BceOp {
        targets: targets.data().to_vec(),
        w_plus: w_plus.to_vec(),
        w_minus: w_minus.to_vec(),
        count,
    };
    Ok(tape.push(Tensor::scalar(total / count), &[logits], Box::new(op)))
}

/// The textbook form with explicit logs of probabilities, for comparison.
pub fn weighted_bce_naive(logits: &Tensor, targets: &Tensor, w_plus: &[f64], w_minus: &[f64]) -> Result<f64> {
    let c = check_bce_inputs(logits, targets, w_plus, w_minus)?;
    let mut total = 0.0;
    for (i, (&z, &y)) in logits.data().iter().zip(targets.data()).enumerate() {
        let p = 1.0 / (1.0 + (-z).exp());
        let cls = i % c;
        let pos = if y == 1.0 { -w_plus[cls] * p.ln() } else { 0.0 };
        let neg = if y == 0.0 { -w_minus[cls] * (1.0 - p).ln() } else { 0.0 };
        total += pos + neg;
    }
    Ok(total / logits.numel().max(1) as f64)
}

struct BceOp {
    targets: Vec<f64>,
    w_plus: Vec<f64>,
    w_minus: Vec<f64>,
    count: f64,
}

impl Backward for BceOp {
    fn name(&self) -> &'static str {
        "weighted_bce"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let c = self.w_plus.len();
        let scale = g[0] / self.count;
        let dz = ctx
            .input(0)
            .data()
            .iter()
            .zip(&self.targets)
            .enumerate()
            .map(|(i, (&z, &y))| {
                let p = sigmoid(z);
                let cls = i % c;
                scale * (self.w_plus[cls] * y * (p - 1.0) + self.w_minus[cls] * (1.0 - y) * p)
            })
            .collect();
        vec![Some(dz)]
    }
}

/// How per-class loss weights are derived from training label frequencies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassWeightMode {
    /// `w+` = fraction of positives, `w−` = fraction of negatives.
    Literal,
    /// Swapped: `w+` = fraction of negatives, `w−` = fraction of positives,
    /// which up-weights the rarer outcome.
    Inverted,
}

/// Per-class `(w+, w−)` from a multi-hot label matrix `[N, C]`.
pub fn class_weights(labels: &Tensor, mode: ClassWeightMode) -> Result<(Vec<f64>, Vec<f64>)> {
    let [n, c] = *labels.shape() else {
        return Err(Error::shape("class_weights", format!("labels must be [N,C], got {:?}", labels.shape())));
    };
    if n == 0 {
        return Err(Error::invalid("class_weights", "no samples"));
    }
    let mut pos = vec![0.0; c];
    for row in labels.data().chunks(c) {
        for (p, &y) in pos.iter_mut().zip(row) {
            *p += y;
        }
    }
    let frac_pos: Vec<f64> = pos.iter().map(|p| p / n as f64).collect();
    let frac_neg: Vec<f64> = frac_pos.iter().map(|p| 1.0 - p).collect();
    Ok(match mode {
        ClassWeightMode::Literal => (frac_pos, frac_neg),
        ClassWeightMode::Inverted => (frac_neg, frac_pos),
    })
}
