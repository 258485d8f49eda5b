use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Concatenates `[N, Ci, H, W]` tensors along the channel axis, in order.
pub fn concat_channels(tape: &mut Tape, xs: &[Var]) -> Result<Var> {
    let Some(&first) = xs.first() else {
        return Err(Error::invalid("concat_channels", "no inputs"));
    };
    if xs.len() == 1 {
        return Ok(first);
    }
    let (n, _, h, w) = tape.value(first).dims4("concat_channels")?;
    let mut channels = Vec::with_capacity(xs.len());
    for &v in xs {
        let (ni, ci, hi, wi) = tape.value(v).dims4("concat_channels")?;
        if (ni, hi, wi) != (n, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("[{ni},_,{hi},{wi}] vs [{n},_,{h},{w}]"),
            ));
        }
        channels.push(ci);
    }
    let hw = h * w;
    let total: usize = channels.iter().sum();
    let mut out = Vec::with_capacity(n * total * hw);
    for i in 0..n {
        for (&v, &c) in xs.iter().zip(&channels) {
            let d = tape.value(v).data();
            out.extend_from_slice(&d[i * c * hw..(i + 1) * c * hw]);
        }
    }
    let out = Tensor::new(&[n, total, h, w], out)?;
    Ok(tape.push(out, xs, Box::new(ConcatOp { channels, n, hw })))
}

struct ConcatOp {
    channels: Vec<usize>,
    n: usize,
    hw: usize,
}

impl Backward for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, _: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let total: usize = self.channels.iter().sum();
        let mut grads: Vec<Vec<f64>> = self
            .channels
            .iter()
            .map(|c| Vec::with_capacity(self.n * c * self.hw))
            .collect();
        for i in 0..self.n {
            let mut offset = i * total * self.hw;
            for (grad, &c) in grads.iter_mut().zip(&self.channels) {
                grad.extend_from_slice(&g[offset..offset + c * self.hw]);
                offset += c * self.hw;
            }
        }
        grads.into_iter().map(Some).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_preserves_order() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(&[1, 2, 1, 1], vec![1., 2.]).unwrap().with_requires_grad(true));
        let b = tape.leaf(Tensor::new(&[1, 3, 1, 1], vec![3., 4., 5.]).unwrap().with_requires_grad(true));
        let c = concat_channels(&mut tape, &[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 5, 1, 1]);
        assert_eq!(tape.value(c).data(), &[1., 2., 3., 4., 5.]);
        let l = tape.sum_all(c);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1., 1.]);
        assert_eq!(tape.grad(b).unwrap(), &[1., 1., 1.]);
    }

    #[test]
    fn batch_interleaving() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[2, 1, 1, 1], vec![1., 2.]).unwrap());
        let b = tape.constant(Tensor::new(&[2, 1, 1, 1], vec![10., 20.]).unwrap());
        let c = concat_channels(&mut tape, &[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 10., 2., 20.]);
    }

    #[test]
    fn single_input_and_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        assert_eq!(concat_channels(&mut tape, &[a]).unwrap(), a);
        let b = tape.constant(Tensor::zeros(&[1, 2, 4, 3]));
        assert!(concat_channels(&mut tape, &[a, b]).is_err());
    }
}
