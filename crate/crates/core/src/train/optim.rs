//! Parameter update rules.

use super::config::OptimizerKind;
use crate::params::{ParamId, ParamStore};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// SGD, SGD with momentum (`v ← μv + g; w ← w − lr·v`) or Adam, with an
/// optional L2 term `l2·w` added to every gradient.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    l2: f64,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
    steps: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64, l2: f64, params: usize) -> Self {
        Optimizer {
            kind,
            momentum,
            l2,
            first: vec![None; params],
            second: vec![None; params],
            steps: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)], lr: f64) {
        self.steps += 1;
        for (id, g) in grads {
            let i = id.index();
            let w = store.get_mut(*id).data_mut();
            let grad: Vec<f64> = if self.l2 > 0.0 {
                g.iter().zip(w.iter()).map(|(g, w)| g + self.l2 * w).collect()
            } else {
                g.clone()
            };
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in w.iter_mut().zip(&grad) {
                        *w -= lr * g;
                    }
                }
                OptimizerKind::Momentum => {
                    let v = self.first[i].get_or_insert_with(|| vec![0.0; grad.len()]);
                    for ((w, g), v) in w.iter_mut().zip(&grad).zip(v.iter_mut()) {
                        *v = self.momentum * *v + g;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.first[i].get_or_insert_with(|| vec![0.0; grad.len()]);
                    let s = self.second[i].get_or_insert_with(|| vec![0.0; grad.len()]);
                    let c1 = 1.0 - ADAM_BETA1.powi(self.steps);
                    let c2 = 1.0 - ADAM_BETA2.powi(self.steps);
                    for (((w, g), m), s) in w.iter_mut().zip(&grad).zip(m.iter_mut()).zip(s.iter_mut()) {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *s = ADAM_BETA2 * *s + (1.0 - ADAM_BETA2) * g * g;
                        *w -= lr * (*m / c1) / ((*s / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use crate::tensor::Tensor;

    fn store() -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", ParamKind::Trainable, Tensor::from_vec(vec![1.0, -2.0]));
        (s, id)
    }

    #[test]
    fn sgd_and_momentum() {
        let (mut s, id) = store();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.0, 0.0, 1);
        opt.step(&mut s, &[(id, vec![0.5, 0.5])], 0.5);
        assert_eq!(s.get(id).data(), &[0.75, -2.25]);

        let (mut s, id) = store();
        let mut opt = Optimizer::new(OptimizerKind::Momentum, 0.5, 0.0, 1);
        opt.step(&mut s, &[(id, vec![1.0, 1.0])], 1.0);
        opt.step(&mut s, &[(id, vec![1.0, 1.0])], 1.0);
        // Velocities 1, then 1.5.
        assert_eq!(s.get(id).data(), &[-1.5, -4.5]);
    }

    #[test]
    fn l2_pulls_toward_zero() {
        let (mut s, id) = store();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.0, 0.5, 1);
        opt.step(&mut s, &[(id, vec![0.0, 0.0])], 1.0);
        assert_eq!(s.get(id).data(), &[0.5, -1.0]);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let (mut s, id) = store();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.0, 0.0, 1);
        opt.step(&mut s, &[(id, vec![3.0, -0.01])], 0.1);
        let w = s.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 1.9).abs() < 1e-5, "{w:?}");
    }
}
