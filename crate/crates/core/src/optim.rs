//! First-order optimizers over a fixed list of parameter tensors.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// SGD with momentum 0.9.
    Sgd,
    /// Adam with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    Adam,
}

const MOMENTUM: f64 = 0.9;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer { kind, lr, t: 0, first: Vec::new(), second: Vec::new() }
    }

    /// One update. `params` and `grads` must list the same tensors in the
    /// same order on every call.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient tensor count mismatch");
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            if self.kind == OptimizerKind::Adam {
                self.second = self.first.clone();
            }
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.first) {
                    for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                        *v = MOMENTUM * *v + g;
                        *p -= self.lr * *v;
                    }
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - BETA1.powi(self.t as i32);
                let c2 = 1.0 - BETA2.powi(self.t as i32);
                for (((p, g), m), s) in params.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    for (((p, &g), m), s) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(s.iter_mut()) {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                        *s = BETA2 * *s + (1.0 - BETA2) * g * g;
                        *p -= self.lr * (*m / c1) / ((*s / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}
