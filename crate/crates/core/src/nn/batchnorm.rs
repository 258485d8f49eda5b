use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormSpec {
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormSpec {
    pub fn new(channels: usize) -> Self {
        BatchNormSpec {
            channels,
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Running mean and variance used in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `running = (1 - momentum)·running + momentum·batch`.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// Per-channel statistics of one training batch; `var` is unbiased.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-channel normalization followed by the affine `gamma·x̂ + beta`.
///
/// Train mode normalizes with the batch's own (biased) statistics and returns
/// them so the caller can fold them into its running stats. Eval mode only
/// reads `running`.
pub fn batch_norm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    spec: &BatchNormSpec,
    running: &RunningStats,
    mode: Mode,
) -> Result<(Var, Option<BatchStats>)> {
    let (n, c, h, w) = tape.value(x).dims4("batch_norm")?;
    if c != spec.channels {
        return Err(Error::shape(
            "batch_norm",
            format!("input has {c} channels, spec expects {}", spec.channels),
        ));
    }
    for (name, v) in [("gamma", gamma), ("beta", beta)] {
        if tape.value(v).shape() != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("{name} is {:?}, expected [{c}]", tape.value(v).shape()),
            ));
        }
    }
    if mode == Mode::Train && n < 2 {
        return Err(Error::invalid("batch_norm", "train mode needs a batch of at least 2"));
    }
    let hw = h * w;
    let count = (n * hw) as f64;
    let xs = tape.value(x).data();
    let gs = tape.value(gamma).data();
    let bs = tape.value(beta).data();

    let (mean, var_biased, stats) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for i in 0..n {
                    s += xs[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().sum::<f64>();
                }
                let m = s / count;
                let mut ss = 0.0;
                for i in 0..n {
                    ss += xs[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                        .iter()
                        .map(|v| (v - m) * (v - m))
                        .sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = ss / count;
            }
            let unbiased = var.iter().map(|v| v * count / (count - 1.0)).collect();
            let stats = BatchStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, var, Some(stats))
        }
        Mode::Eval => (running.mean.clone(), running.var.clone(), None),
    };
    let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + spec.eps).sqrt()).collect();

    let mut xhat = vec![0.0; xs.len()];
    let mut out = vec![0.0; xs.len()];
    for i in 0..n {
        for ch in 0..c {
            let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            for j in range {
                let xh = (xs[j] - mean[ch]) * inv_std[ch];
                xhat[j] = xh;
                out[j] = gs[ch] * xh + bs[ch];
            }
        }
    }
    let out = Tensor::new(&[n, c, h, w], out)?;
    let op = BatchNormOp {
        xhat,
        inv_std,
        train: mode == Mode::Train,
        dims: (n, c, hw),
    };
    Ok((tape.push(out, &[x, gamma, beta], Box::new(op)), stats))
}

struct BatchNormOp {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
    dims: (usize, usize, usize),
}

impl Backward for BatchNormOp {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (n, c, hw) = self.dims;
        let gamma = ctx.input(1).data();
        let count = (n * hw) as f64;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let span = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                for (gv, xh) in g[span.clone()].iter().zip(&self.xhat[span]) {
                    dgamma[ch] += gv * xh;
                    dbeta[ch] += gv;
                }
            }
        }
        let dx = ctx.needs_grad(0).then(|| {
            let mut dx = vec![0.0; g.len()];
            for i in 0..n {
                for ch in 0..c {
                    let scale = gamma[ch] * self.inv_std[ch];
                    for j in (i * c + ch) * hw..(i * c + ch + 1) * hw {
                        dx[j] = if self.train {
                            scale / count * (count * g[j] - dbeta[ch] - self.xhat[j] * dgamma[ch])
                        } else {
                            scale * g[j]
                        };
                    }
                }
            }
            dx
        });
        vec![dx, Some(dgamma), Some(dbeta)]
    }
}
