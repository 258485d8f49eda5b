use rand::Rng;

use crate::autograd::{Backward, BackwardCtx, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::Tensor;

/// Inverted dropout: in train mode each element is zeroed with probability
/// `rate` and survivors are scaled by `1/(1-rate)`. Eval mode is the identity.
pub fn dropout<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let xt = tape.value(x);
    let mask: Vec<f64> = (0..xt.numel())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let data = xt.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    let out = Tensor::new(xt.shape(), data)?;
    Ok(tape.push(out, &[x], Box::new(DropoutOp { mask })))
}

struct DropoutOp {
    mask: Vec<f64>,
}

impl Backward for DropoutOp {
    fn name(&self) -> &'static str {
        "dropout"
    }

    fn backward(&self, _: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().zip(&self.mask).map(|(g, m)| g * m).collect())]
    }
}
