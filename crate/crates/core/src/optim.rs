//! Plain SGD and Adam over the tensors of an [`Mlp`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::Mlp;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// `p <- p - lr * g` for every tensor of `params`.
pub fn sgd_step(params: &mut Mlp, grads: &Mlp, lr: f64) -> Result<()> {
    check_shapes(params, grads)?;
    for (p, g) in params.tensors_mut().zip(grads.tensors()) {
        p.add_assign_scaled(g, -lr);
    }
    Ok(())
}

fn check_shapes(params: &Mlp, grads: &Mlp) -> Result<()> {
    let ok = params.tensors().count() == grads.tensors().count()
        && params.tensors().zip(grads.tensors()).all(|(p, g)| p.shape() == g.shape());
    if !ok {
        return Err(Error::InvalidArgument("gradient does not match parameter layout".into()));
    }
    Ok(())
}

/// Stateful optimizer for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut Mlp, grads: &Mlp) -> Result<()> {
        check_shapes(params, grads)?;
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => sgd_step(params, grads, self.lr),
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = params.tensors().map(|t| vec![0.0; t.len()]).collect();
                    self.v = self.m.clone();
                }
                let t = self.step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (k, (p, g)) in params.tensors_mut().zip(grads.tensors()).enumerate() {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for (i, (pv, gv)) in p.values_mut().iter_mut().zip(g.values()).enumerate() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gv;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gv * gv;
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        *pv -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
                Ok(())
            }
        }
    }
}
