use serde::{Deserialize, Serialize};

use crate::error::{GmnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub(crate) fn code(self) -> u32 {
        match self {
            OptimizerKind::Adam => 0,
            OptimizerKind::Sgd => 1,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(OptimizerKind::Adam),
            1 => Some(OptimizerKind::Sgd),
            _ => None,
        }
    }
}

/// One optimizer over every trainable parameter, flattened in model order.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, beta1: f64, beta2: f64, eps: f64, num_params: usize) -> Self {
        let moments = match kind {
            OptimizerKind::Adam => num_params,
            OptimizerKind::Sgd => 0,
        };
        Optimizer {
            kind,
            beta1,
            beta2,
            eps,
            steps: 0,
            first_moment: vec![0.0; moments],
            second_moment: vec![0.0; moments],
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) -> Result<()> {
        let total: usize = params.iter().map(|p| p.len()).sum();
        let grad_total: usize = grads.iter().map(|g| g.len()).sum();
        if total != grad_total {
            return Err(GmnError::shape("optimizer gradients", total, grad_total));
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (w, d) in p.iter_mut().zip(g) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.first_moment.len() != total {
                    return Err(GmnError::State(format!(
                        "optimizer holds {} moments for {} parameters",
                        self.first_moment.len(),
                        total
                    )));
                }
                let t = self.steps as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                let mut idx = 0;
                for (p, g) in params.into_iter().zip(grads) {
                    for (w, d) in p.iter_mut().zip(g) {
                        let m = &mut self.first_moment[idx];
                        let v = &mut self.second_moment[idx];
                        *m = self.beta1 * *m + (1.0 - self.beta1) * d;
                        *v = self.beta2 * *v + (1.0 - self.beta2) * d * d;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
                        idx += 1;
                    }
                }
            }
        }
        Ok(())
    }
}
