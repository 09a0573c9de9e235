//! Optimizers over the trainable slice of a parameter store.

use crate::align::FlatGradient;
use crate::error::{Error, Result};
use crate::tensor::param::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::config(format!("unknown optimizer {other}"))),
        }
    }
}

/// Adaptive moment estimation, with plain SGD as a degenerate mode.
/// Consumes whatever gradient vector it is handed; moments accumulate the
/// handed-in (possibly aligned) gradient, not the raw one.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Apply one update with the given flat gradient. Only trainable
    /// parameters move; frozen parameters are untouched by construction.
    pub fn apply(&mut self, store: &mut ParamStore, grad: &FlatGradient) -> Result<()> {
        let expected: usize = store.trainable_len();
        if grad.data.len() != expected {
            return Err(Error::contract(format!(
                "optimizer: gradient length {} does not match {} trainable entries",
                grad.data.len(),
                expected
            )));
        }
        if self.m.is_empty() {
            self.m = vec![0.0; expected];
            self.v = vec![0.0; expected];
        }
        self.step += 1;
        let mut offset = 0;
        for (_, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let n = p.value.len();
            let values = p.value.as_mut_slice();
            let g = &grad.data[offset..offset + n];
            match self.kind {
                OptimizerKind::Sgd => {
                    for (v, &gk) in values.iter_mut().zip(g) {
                        *v -= self.lr * gk;
                    }
                }
                OptimizerKind::Adam => {
                    let t = self.step as i32;
                    let bc1 = 1.0 - self.beta1.powi(t);
                    let bc2 = 1.0 - self.beta2.powi(t);
                    for (k, (v, &gk)) in values.iter_mut().zip(g).enumerate() {
                        let m = &mut self.m[offset + k];
                        let vv = &mut self.v[offset + k];
                        *m = self.beta1 * *m + (1.0 - self.beta1) * gk;
                        *vv = self.beta2 * *vv + (1.0 - self.beta2) * gk * gk;
                        let m_hat = *m / bc1;
                        let v_hat = *vv / bc2;
                        *v -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
            offset += n;
        }
        Ok(())
    }
}
