//! Central-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::densenet::{build_backbone, DenseNetConfig};
use crate::error::Result;
use crate::nn::{self, BatchNormSpec, Conv2dSpec, Mode, RunningStats};
use crate::params::{Forward, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::wsl::{self, HeadConfig, WslHead};

/// Relative error floor used in the denominator.
pub const DENOM_FLOOR: f64 = 1e-8;

/// Compares the tape gradient of the scalar `f(x)` against central
/// differences with step `h`, over every element of `x`.
///
/// Returns `max |analytic - numeric| / max(1e-8, |analytic| + |numeric|)`,
/// or `+inf` when `f` produces a non-finite value anywhere.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_at(f, x, h, &all)
}

/// Like [`finite_diff_check`] but only perturbs the listed flat indices.
pub fn finite_diff_check_at<F>(f: F, x: &Tensor, h: f64, indices: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_requires_grad(true));
    let loss = f(&mut tape, xv)?;
    if !tape.value(loss).all_finite() {
        return Ok(f64::INFINITY);
    }
    tape.backward(loss)?;
    let analytic = match tape.grad(xv) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x.numel()],
    };

    let eval = |probe: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(probe);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).data()[0])
    };

    let mut worst = 0.0f64;
    for &i in indices {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        if !numeric.is_finite() {
            return Ok(f64::INFINITY);
        }
        let a = analytic[i];
        let err = (a - numeric).abs() / DENOM_FLOOR.max(a.abs() + numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}


/// Step used by the suite.
pub const SUITE_STEP: f64 = 1e-6;
/// Pass threshold for single ops.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Pass threshold for the whole toy network.
pub const NETWORK_TOLERANCE: f64 = 1e-3;

/// Checks every differentiable input of a multi-input op in turn, holding
/// the others constant. The loss is a random-weighted sum of the output so
/// that no gradient component cancels by symmetry.
pub fn check_inputs<F>(inputs: &[Tensor], differentiable: &[bool], weights: &Tensor, h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        if !differentiable[i] {
            continue;
        }
        let err = finite_diff_check(
            |tape, xv| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| if j == i { xv } else { tape.constant(t.clone()) })
                    .collect();
                let out = f(tape, &vars)?;
                tape.weighted_sum(out, weights)
            },
            x,
            h,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Outcome for one op over all its random instances.
#[derive(Clone, Debug)]
pub struct OpResult {
    pub op: &'static str,
    pub instances: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl OpResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

/// Output weights for a forward run once to learn its shape.
fn output_weights<F>(inputs: &[Tensor], f: &F, rng: &mut ChaCha8Rng) -> Result<Tensor>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(Tensor::uniform(tape.value(out).shape(), -1.0, 1.0, rng))
}

fn run_op<F>(inputs: &[Tensor], differentiable: &[bool], rng: &mut ChaCha8Rng, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let w = output_weights(inputs, &f, rng)?;
    check_inputs(inputs, differentiable, &w, SUITE_STEP, f)
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// One random instance of the named op; returns its max relative error.
fn instance(op: &str, rng: &mut ChaCha8Rng) -> Result<f64> {
    match op {
        "conv2d" | "conv2d_dilated" => {
            let dilation = if op == "conv2d" { 1 } else { 2 };
            let (n, cin, cout) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
            let k = if rng.random_bool(0.5) { 3 } else { 1 };
            let (h, w) = (dim(rng, 3, 6), dim(rng, 3, 6));
            let spec = Conv2dSpec::same(cin, cout, k, dilation);
            let inputs = [
                Tensor::randn(&[n, cin, h, w], 1.0, rng),
                Tensor::randn(&spec.weight_shape(), 1.0, rng),
                Tensor::randn(&[cout], 1.0, rng),
            ];
            run_op(&inputs, &[true; 3], rng, |t, v| nn::conv2d(t, v[0], v[1], Some(v[2]), &spec))
        }
        "batch_norm" => {
            let (n, c, h, w) = (dim(rng, 2, 3), dim(rng, 1, 3), dim(rng, 2, 4), dim(rng, 2, 4));
            let spec = BatchNormSpec::new(c);
            let running = RunningStats::new(c);
            let inputs = [
                Tensor::randn(&[n, c, h, w], 1.0, rng),
                Tensor::uniform(&[c], 0.5, 1.5, rng),
                Tensor::randn(&[c], 1.0, rng),
            ];
            run_op(&inputs, &[true; 3], rng, |t, v| {
                Ok(nn::batch_norm(t, v[0], v[1], v[2], &spec, &running, Mode::Train)?.0)
            })
        }
        "relu" => {
            let x = Tensor::randn(&[dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 2, 5), dim(rng, 2, 5)], 1.0, rng);
            run_op(&[x], &[true], rng, |t, v| Ok(t.relu(v[0])))
        }
        "dropout_eval" => {
            let x = Tensor::randn(&[dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 2, 5), dim(rng, 2, 5)], 1.0, rng);
            run_op(&[x], &[true], rng, |t, v| {
                nn::dropout(t, v[0], 0.5, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))
            })
        }
        "concat" => {
            let (n, h, w) = (dim(rng, 1, 2), dim(rng, 2, 4), dim(rng, 2, 4));
            let parts = dim(rng, 2, 3);
            let inputs: Vec<Tensor> =
                (0..parts).map(|_| Tensor::randn(&[n, dim(rng, 1, 3), h, w], 1.0, rng)).collect();
            let diff = vec![true; parts];
            run_op(&inputs, &diff, rng, nn::concat_channels)
        }
        "bridging" => {
            let classes = dim(rng, 1, 3);
            let mut head = HeadConfig::new((0..classes).map(|c| format!("c{c}")).collect());
            head.m = dim(rng, 1, 3);
            let cin = dim(rng, 1, 4);
            let (n, h, w) = (dim(rng, 1, 2), dim(rng, 2, 4), dim(rng, 2, 4));
            let mc = head.m * classes;
            let inputs = [
                Tensor::randn(&[n, cin, h, w], 1.0, rng),
                Tensor::randn(&[mc, cin, 1, 1], 1.0, rng),
                Tensor::randn(&[mc], 1.0, rng),
            ];
            run_op(&inputs, &[true; 3], rng, |t, v| wsl::bridging(t, v[0], v[1], Some(v[2]), &head, cin))
        }
        "class_wise_pool" => {
            let (m, c) = (dim(rng, 1, 4), dim(rng, 1, 3));
            let x = Tensor::randn(&[dim(rng, 1, 2), m * c, dim(rng, 2, 4), dim(rng, 2, 4)], 1.0, rng);
            run_op(&[x], &[true], rng, |t, v| wsl::class_wise_pool(t, v[0], m))
        }
        "spatial_pool_test" => {
            let (h, w) = (dim(rng, 2, 5), dim(rng, 2, 5));
            let (kp, km) = (dim(rng, 1, h * w), dim(rng, 1, h * w));
            let alpha = rng.random_range(0.25..=1.0);
            let x = Tensor::randn(&[dim(rng, 1, 2), dim(rng, 1, 3), h, w], 1.0, rng);
            run_op(&[x], &[true], rng, |t, v| wsl::spatial_pool_test(t, v[0], kp, km, alpha))
        }
        "sigmoid" => {
            let x = Tensor::randn(&[dim(rng, 1, 4), dim(rng, 1, 4)], 3.0, rng);
            run_op(&[x], &[true], rng, |t, v| Ok(t.sigmoid(v[0])))
        }
        "weighted_bce" => {
            let (n, c) = (dim(rng, 1, 4), dim(rng, 1, 4));
            let z = Tensor::randn(&[n, c], 3.0, rng);
            let y: Vec<f64> = (0..n * c).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
            let y = Tensor::new(&[n, c], y)?;
            let wp: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
            let wm: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
            run_op(&[z], &[true], rng, |t, v| wsl::weighted_bce(t, v[0], &y, &wp, &wm))
        }
        other => Err(crate::error::Error::invalid("gradcheck", format!("unknown op {other}"))),
    }
}

/// Ops covered by [`run_suite`], in order.
pub const SUITE_OPS: [&str; 11] = [
    "conv2d",
    "conv2d_dilated",
    "batch_norm",
    "relu",
    "dropout_eval",
    "concat",
    "bridging",
    "class_wise_pool",
    "spatial_pool_test",
    "sigmoid",
    "weighted_bce",
];

/// Runs `instances` random instances of every op in [`SUITE_OPS`].
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<OpResult>> {
    SUITE_OPS
        .iter()
        .enumerate()
        .map(|(i, &op)| {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::data::derive_seed(seed, i as u64, 0));
            let mut worst = 0.0f64;
            for _ in 0..instances {
                worst = worst.max(instance(op, &mut rng)?);
            }
            Ok(OpResult { op, instances, max_error: worst, tolerance: OP_TOLERANCE })
        })
        .collect()
}

/// Toy backbone plus head in train mode on a batch of two 64×64 images,
/// loss = sum of heatmap outputs. Checks `samples` random input pixels and
/// `samples` random parameter values.
pub fn check_toy_network(samples: usize, seed: u64) -> Result<OpResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = DenseNetConfig::toy();
    cfg.drop_rate = 0.0;
    let head_cfg = HeadConfig { m: 2, ..HeadConfig::new(vec!["a".into(), "b".into()]) };
    let mut store = ParamStore::new();
    let backbone = build_backbone(&cfg, &mut store, "backbone", &mut rng)?;
    let head = WslHead::build(&head_cfg, backbone.out_channels(), &mut store, "head", &mut rng)?;
    let x = Tensor::randn(&[2, 3, 64, 64], 1.0, &mut rng);

    type Grads = (Vec<f64>, Vec<(ParamId, Vec<f64>)>);
    let loss_of = |store: &ParamStore, x: &Tensor, grads: bool| -> Result<(f64, Option<Grads>)> {
        let mut f = Forward::new(store, Mode::Train, grads, 0);
        let xv = f.tape.leaf(x.clone().with_requires_grad(grads));
        let feats = backbone.forward(&mut f, xv)?;
        let heat = head.heatmap(&mut f, feats)?;
        let loss = f.tape.sum_all(heat);
        let value = f.tape.value(loss).data()[0];
        if !grads {
            return Ok((value, None));
        }
        f.tape.backward(loss)?;
        let gx = f.tape.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);
        Ok((value, Some((gx, f.param_grads()))))
    };

    let (_, grads) = loss_of(&store, &x, true)?;
    let (gx, gp) = grads.expect("gradients requested");
    let rel = |a: f64, n: f64| (a - n).abs() / DENOM_FLOOR.max(a.abs() + n.abs());
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let i = rng.random_range(0..x.numel());
        let (mut plus, mut minus) = (x.clone(), x.clone());
        plus.data_mut()[i] += SUITE_STEP;
        minus.data_mut()[i] -= SUITE_STEP;
        let numeric = (loss_of(&store, &plus, false)?.0 - loss_of(&store, &minus, false)?.0) / (2.0 * SUITE_STEP);
        worst = worst.max(rel(gx[i], numeric));
    }
    for _ in 0..samples {
        let (id, g) = &gp[rng.random_range(0..gp.len())];
        let j = rng.random_range(0..g.len());
        let mut probe = store.clone();
        probe.get_mut(*id).data_mut()[j] += SUITE_STEP;
        let up = loss_of(&probe, &x, false)?.0;
        probe.get_mut(*id).data_mut()[j] -= 2.0 * SUITE_STEP;
        let down = loss_of(&probe, &x, false)?.0;
        worst = worst.max(rel(g[j], (up - down) / (2.0 * SUITE_STEP)));
    }
    Ok(OpResult { op: "toy_network", instances: 2 * samples, max_error: worst, tolerance: NETWORK_TOLERANCE })
}
