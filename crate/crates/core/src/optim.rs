//! First-order optimizers over [`ModelParams`].

use serde::{Deserialize, Serialize};

use crate::encoder::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    max_grad_norm: Option<f64>,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, max_grad_norm: Option<f64>) -> Self {
        Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` is in parameter order. Padding rows of
    /// the embedding tables are left untouched.
    pub fn step(&mut self, params: &mut ModelParams, grads: &mut [Matrix]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Logic("gradient count differs from parameter count".into()));
        }
        for (p, g) in params.params().iter().zip(grads.iter()) {
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        for t in params.padded_tables() {
            grads[t].row_mut(0).iter_mut().for_each(|x| *x = 0.0);
        }
        if let Some(max) = self.max_grad_norm {
            let norm = grads.iter().map(|g| g.frobenius_norm().powi(2)).sum::<f64>().sqrt();
            if norm > max {
                let s = max / norm;
                grads
                    .iter_mut()
                    .for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.params_mut().iter_mut().zip(grads.iter()) {
                    for (w, &d) in p.value.data_mut().iter_mut().zip(g.data()) {
                        *w -= self.lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(Matrix::zeros_like).collect();
                    self.v = grads.iter().map(Matrix::zeros_like).collect();
                }
                let t = self.step as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                let (b1, b2) = (self.beta1, self.beta2);
                for (((p, g), m), v) in params
                    .params_mut()
                    .iter_mut()
                    .zip(grads.iter())
                    .zip(self.m.iter_mut())
                    .zip(self.v.iter_mut())
                {
                    let w = p.value.data_mut();
                    let (m, v) = (m.data_mut(), v.data_mut());
                    for i in 0..w.len() {
                        let d = g.data()[i];
                        m[i] = b1 * m[i] + (1.0 - b1) * d;
                        v[i] = b2 * v[i] + (1.0 - b2) * d * d;
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        w[i] -= self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
        if let Some(name) = params.first_non_finite() {
            return Err(Error::NonFinite(format!("parameter {name} after update")));
        }
        Ok(())
    }
}
