//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation in creation order. Values are owned by
//! the tape and addressed through copyable [`Var`] handles. `backward` walks
//! the nodes in exact reverse creation order, which is a valid reverse
//! topological order because inputs always precede their outputs.
//!
//! A tape belongs to one thread. Data-parallel training builds one tape per
//! batch shard and reduces the gradients afterwards.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Saved forward context of one operation plus its vector-Jacobian product.
pub(crate) trait Backward {
    fn name(&self) -> &'static str;

    /// Returns one entry per input; inputs that do not need a gradient may
    /// get `None`.
    fn backward(&self, ctx: &BackwardCtx<'_>, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

pub(crate) struct BackwardCtx<'a> {
    tape: &'a Tape,
    inputs: &'a [Var],
    output: Var,
}

impl BackwardCtx<'_> {
    pub fn input(&self, i: usize) -> &Tensor {
        self.tape.value(self.inputs[i])
    }

    pub fn output(&self) -> &Tensor {
        self.tape.value(self.output)
    }

    pub fn input_count(&self) -> usize {
        self.inputs.len()
    }

    pub fn needs_grad(&self, i: usize) -> bool {
        self.tape.requires_grad(self.inputs[i])
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. It takes part in differentiation when
    /// `t.requires_grad()` is set.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        t.zero_grad();
        self.nodes.push(Node {
            value: t,
            requires_grad,
            inputs: Vec::new(),
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the operation that produced `v`, or `None` for leaves and
    /// untracked results.
    pub fn op_name(&self, v: Var) -> Option<&'static str> {
        self.nodes[v.0].op.as_ref().map(|op| op.name())
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v`, if any, into the accumulator of `t`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, inputs: &[Var], op: Box<dyn Backward>) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        debug_assert!(
            !inputs.iter().all(|&v| self.value(v).all_finite()) || value.all_finite(),
            "{} produced non-finite values from finite inputs",
            op.name()
        );
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs: if requires_grad { inputs.to_vec() } else { Vec::new() },
            op: if requires_grad { Some(op) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Computes the gradient of the scalar `loss` with respect to every
    /// recorded value that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let value = self.value(loss);
        if value.numel() != 1 {
            return Err(Error::NonScalarLoss(value.shape().to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.requires_grad(loss) {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            let Some(grad_out) = grads[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                tape: self,
                inputs: &node.inputs,
                output: Var(i),
            };
            let input_grads = op.backward(&ctx, &grad_out);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), self.nodes[input.0].value.numel(), "{}", op.name());
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            // Keep the output gradient readable after the pass.
            grads[i] = Some(grad_out);
        }
        self.grads = grads;
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn map_unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        op: Box<dyn Backward>,
    ) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(xt.shape(), data).expect("same shape");
        self.push(out, &[x], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, &[a, b], Box::new(AddOp)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, &[a, b], Box::new(SubOp)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, &[a, b], Box::new(MulOp)))
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Var {
        self.map_unary(x, |v| v * s, Box::new(MulScalarOp(s)))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.map_unary(x, |v| v + s, Box::new(AddScalarOp))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v.max(0.0), Box::new(ReluOp))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, sigmoid, Box::new(SigmoidOp))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), &[x], Box::new(SumOp { scale: 1.0 }))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.numel().max(1) as f64;
        let s = t.data().iter().sum::<f64>() / n;
        self.push(Tensor::scalar(s), &[x], Box::new(SumOp { scale: 1.0 / n }))
    }

    /// `sum(x ⊙ w)` for a constant weight tensor `w`.
    pub fn weighted_sum(&mut self, x: Var, w: &Tensor) -> Result<Var> {
        let xt = self.value(x);
        if xt.shape() != w.shape() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{:?} vs {:?}", xt.shape(), w.shape()),
            ));
        }
        let s = xt.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(
            Tensor::scalar(s),
            &[x],
            Box::new(WeightedSumOp(w.data().to_vec())),
        ))
    }
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct AddOp;

impl Backward for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, _: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec()), Some(g.to_vec())]
    }
}

struct SubOp;

impl Backward for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }

    fn backward(&self, _: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
    }
}

struct MulOp;

impl Backward for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (ctx.input(0).data(), ctx.input(1).data());
        let ga = ctx
            .needs_grad(0)
            .then(|| g.iter().zip(b).map(|(g, b)| g * b).collect());
        let gb = ctx
            .needs_grad(1)
            .then(|| g.iter().zip(a).map(|(g, a)| g * a).collect());
        vec![ga, gb]
    }
}

struct MulScalarOp(f64);

impl Backward for MulScalarOp {
    fn name(&self) -> &'static str {
        "mul_scalar"
    }

    fn backward(&self, _: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().map(|v| v * self.0).collect())]
    }
}

struct AddScalarOp;

impl Backward for AddScalarOp {
    fn name(&self) -> &'static str {
        "add_scalar"
    }

    fn backward(&self, _: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec())]
    }
}

struct ReluOp;

impl Backward for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = ctx.input(0).data();
        vec![Some(
            g.iter()
                .zip(x)
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect(),
        )]
    }
}

struct SigmoidOp;

impl Backward for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let y = ctx.output().data();
        vec![Some(g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect())]
    }
}

struct SumOp {
    scale: f64,
}

impl Backward for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![g[0] * self.scale; ctx.input(0).numel()])]
    }
}

struct WeightedSumOp(Vec<f64>);

impl Backward for WeightedSumOp {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn backward(&self, _: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(self.0.iter().map(|w| w * g[0]).collect())]
    }
}
