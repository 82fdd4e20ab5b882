//! First-order optimizers with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerKind {
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Optimizer state: first/second moment buffers (Adam) or velocity (SGD,
/// stored in `m`) per parameter, plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    pub steps: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, weight_decay: f64, shapes: &[&[usize]]) -> Self {
        let zeros = || shapes.iter().map(|s| Tensor::zeros(s)).collect::<Vec<_>>();
        let v = match kind {
            OptimizerKind::Adam { .. } => zeros(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Optimizer {
            kind,
            weight_decay,
            steps: 0,
            m: zeros(),
            v,
        }
    }

    /// Named state tensors for checkpoints.
    pub fn state(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = self.m.iter().enumerate().map(|(i, t)| (format!("opt.m.{i}"), t)).collect();
        out.extend(self.v.iter().enumerate().map(|(i, t)| (format!("opt.v.{i}"), t)));
        out
    }

    pub fn state_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.m.iter_mut().chain(self.v.iter_mut()).collect()
    }

    /// One update of `params` with `grads` at learning rate `lr`.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer holds {} slots but got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.steps += 1;
        let decay = T::lit(lr * self.weight_decay);
        let lr_t = T::lit(lr);
        match self.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let (b1, b2) = (T::lit(beta1), T::lit(beta2));
                let c1 = T::lit(1.0 - beta1.powi(self.steps as i32));
                let c2 = T::lit(1.0 - beta2.powi(self.steps as i32));
                let eps = T::lit(eps);
                for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
                    for (((p, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = b1 * *m + (T::one() - b1) * *g;
                        *v = b2 * *v + (T::one() - b2) * *g * *g;
                        let mhat = *m / c1;
                        let vhat = *v / c2;
                        *p = *p - lr_t * mhat / (vhat.sqrt() + eps) - decay * *p;
                    }
                }
            }
            OptimizerKind::Sgd { momentum } => {
                let mu = T::lit(momentum);
                for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
                    for ((p, g), vel) in p.data_mut().iter_mut().zip(g.data()).zip(self.m[i].data_mut()) {
                        *vel = mu * *vel + *g;
                        *p = *p - lr_t * *vel - decay * *p;
                    }
                }
            }
        }
        Ok(())
    }
}
