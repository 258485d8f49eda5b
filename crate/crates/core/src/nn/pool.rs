use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn pooled_size(op: &'static str, n: usize, window: usize, stride: usize, padding: usize) -> Result<usize> {
    if window == 0 || stride == 0 {
        return Err(Error::invalid(op, "window and stride must be positive"));
    }
    if window > n + 2 * padding {
        return Err(Error::invalid(
            op,
            format!("window {window} larger than input {n} (padding {padding})"),
        ));
    }
    Ok((n + 2 * padding - window) / stride + 1)
}

pub fn max_pool2d(tape: &mut Tape, x: Var, window: usize, stride: usize) -> Result<Var> {
    max_pool2d_padded(tape, x, window, stride, 0)
}

/// Max pooling where padded positions never win. Ties go to the first
/// element in row-major scan order of the window.
pub fn max_pool2d_padded(
    tape: &mut Tape,
    x: Var,
    window: usize,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let xt = tape.value(x);
    let (n, c, h, w) = xt.dims4("max_pool2d")?;
    if padding >= window {
        return Err(Error::invalid("max_pool2d", "padding must be smaller than the window"));
    }
    let ho = pooled_size("max_pool2d", h, window, stride, padding)?;
    let wo = pooled_size("max_pool2d", w, window, stride, padding)?;
    let xs = xt.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for a in 0..window {
                    let ih = (oh * stride + a) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for b in 0..window {
                        let iw = (ow * stride + b) as isize - padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let idx = base + ih as usize * w + iw as usize;
                        if best_idx == usize::MAX || xs[idx] > best {
                            best = xs[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    let out = Tensor::new(&[n, c, ho, wo], out)?;
    Ok(tape.push(out, &[x], Box::new(MaxPoolOp { argmax })))
}

struct MaxPoolOp {
    argmax: Vec<usize>,
}

impl Backward for MaxPoolOp {
    fn name(&self) -> &'static str {
        "max_pool2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; ctx.input(0).numel()];
        for (&idx, &gv) in self.argmax.iter().zip(g) {
            dx[idx] += gv;
        }
        vec![Some(dx)]
    }
}

pub fn avg_pool2d(tape: &mut Tape, x: Var, window: usize, stride: usize) -> Result<Var> {
    let xt = tape.value(x);
    let (n, c, h, w) = xt.dims4("avg_pool2d")?;
    let ho = pooled_size("avg_pool2d", h, window, stride, 0)?;
    let wo = pooled_size("avg_pool2d", w, window, stride, 0)?;
    let xs = xt.data();
    let scale = 1.0 / (window * window) as f64;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = 0.0;
                for a in 0..window {
                    let row = base + (oh * stride + a) * w + ow * stride;
                    acc += xs[row..row + window].iter().sum::<f64>();
                }
                out.push(acc * scale);
            }
        }
    }
    let out = Tensor::new(&[n, c, ho, wo], out)?;
    Ok(tape.push(
        out,
        &[x],
        Box::new(AvgPoolOp {
            window,
            stride,
            ho,
            wo,
        }),
    ))
}

struct AvgPoolOp {
    window: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl Backward for AvgPoolOp {
    fn name(&self) -> &'static str {
        "avg_pool2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = ctx.input(0);
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let planes = x.shape()[0] * x.shape()[1];
        let scale = 1.0 / (self.window * self.window) as f64;
        let mut dx = vec![0.0; x.numel()];
        for plane in 0..planes {
            let base = plane * h * w;
            for oh in 0..self.ho {
                for ow in 0..self.wo {
                    let gv = g[(plane * self.ho + oh) * self.wo + ow] * scale;
                    for a in 0..self.window {
                        let row = base + (oh * self.stride + a) * w + ow * self.stride;
                        dx[row..row + self.window].iter_mut().for_each(|d| *d += gv);
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Nearest-neighbour upsampling by an integer factor (not differentiable;
/// used for heatmap display and pooling sanity checks).
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("upsample_nearest")?;
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        for oh in 0..ho {
            for ow in 0..wo {
                out.push(x.data()[(plane * h + oh / factor) * w + ow / factor]);
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(f: fn(&mut Tape, Var, usize, usize) -> Result<Var>, x: Tensor, k: usize, s: usize) -> Tensor {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = f(&mut tape, v, k, s).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn two_by_two() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(pool(max_pool2d, x.clone(), 2, 2).data(), &[4.]);
        assert_eq!(pool(avg_pool2d, x, 2, 2).data(), &[2.5]);
    }

    #[test]
    fn constant_input() {
        let x = Tensor::full(&[2, 3, 6, 6], 1.75);
        for f in [max_pool2d, avg_pool2d] {
            let y = pool(f, x.clone(), 2, 2);
            assert_eq!(y.shape(), &[2, 3, 3, 3]);
            assert!(y.data().iter().all(|&v| v == 1.75));
        }
    }

    #[test]
    fn avg_pool_then_upsample_commutes_on_constants() {
        let x = Tensor::full(&[1, 2, 8, 8], -0.5);
        let y = upsample_nearest(&pool(avg_pool2d, x.clone(), 2, 2), 2).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn window_too_large() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(max_pool2d(&mut tape, v, 3, 1).is_err());
        assert!(avg_pool2d(&mut tape, v, 3, 1).is_err());
    }

    #[test]
    fn max_backward_routes_to_first_argmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 1, 2, 2], vec![5., 5., 1., 5.]).unwrap().with_requires_grad(true));
        let y = max_pool2d(&mut tape, x, 2, 2).unwrap();
        let l = tape.sum_all(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1., 0., 0., 0.]);
    }

    #[test]
    fn padded_max_pool_shape() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::full(&[1, 1, 112, 112], -3.0));
        let y = max_pool2d_padded(&mut tape, v, 3, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 56, 56]);
        assert!(tape.value(y).data().iter().all(|&v| v == -3.0));
    }
}
