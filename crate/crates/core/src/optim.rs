//! First-order optimizers over named model parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::models::{Model, ParamId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.0 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::sgd()
    }
}

#[derive(Clone, Debug)]
struct Slot<S> {
    m: Tensor<S>,
    v: Tensor<S>,
}

/// Optimizer with per-parameter state that persists across steps.
#[derive(Clone, Debug)]
pub struct Optimizer<S> {
    kind: OptimizerKind,
    lr: S,
    t: i32,
    state: BTreeMap<ParamId, Slot<S>>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr: S::of(lr),
            t: 0,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update; parameters absent from `grads` are untouched.
    pub fn step(&mut self, model: &mut Model<S>, grads: &[(ParamId, Tensor<S>)]) {
        self.t += 1;
        let lr = self.lr;
        for (id, g) in grads {
            let p = model.param_mut(*id);
            match self.kind {
                OptimizerKind::Sgd { momentum } if momentum == 0.0 => {
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w = *w - lr * d;
                    }
                }
                OptimizerKind::Sgd { momentum } => {
                    let mu = S::of(momentum);
                    let slot = self.state.entry(*id).or_insert_with(|| Slot {
                        m: Tensor::zeros(g.shape()),
                        v: Tensor::zeros(&[0]),
                    });
                    for ((w, m), &d) in p.data_mut().iter_mut().zip(slot.m.data_mut()).zip(g.data()) {
                        *m = mu * *m + d;
                        *w = *w - lr * *m;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (b1, b2, eps) = (S::of(beta1), S::of(beta2), S::of(eps));
                    let c1 = S::one() - b1.powi(self.t);
                    let c2 = S::one() - b2.powi(self.t);
                    let slot = self.state.entry(*id).or_insert_with(|| Slot {
                        m: Tensor::zeros(g.shape()),
                        v: Tensor::zeros(g.shape()),
                    });
                    let it = p
                        .data_mut()
                        .iter_mut()
                        .zip(slot.m.data_mut())
                        .zip(slot.v.data_mut())
                        .zip(g.data());
                    for (((w, m), v), &d) in it {
                        *m = b1 * *m + (S::one() - b1) * d;
                        *v = b2 * *v + (S::one() - b2) * d * d;
                        let mh = *m / c1;
                        let vh = *v / c2;
                        *w = *w - lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ParamKind;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut m = Model::<f64>::linear(1, 1);
        let id = ParamId { layer: 0, kind: ParamKind::Bias };
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.01);
        opt.step(&mut m, &[(id, Tensor::row(&[3.0]))]);
        // bias-corrected first step is lr·sign(g)
        assert!((m.param(id).item() + 0.01).abs() < 1e-9);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut m = Model::<f64>::linear(1, 1);
        let id = ParamId { layer: 0, kind: ParamKind::Bias };
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.5 }, 1.0);
        opt.step(&mut m, &[(id, Tensor::row(&[1.0]))]);
        opt.step(&mut m, &[(id, Tensor::row(&[1.0]))]);
        assert_eq!(m.param(id).item(), -2.5);
    }
}
