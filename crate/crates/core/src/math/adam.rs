use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bias-corrected Adam over a list of flat parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl AdamState {
    pub fn new(shapes: &[usize], learning_rate: f64) -> Self {
        AdamState {
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
        }
    }

    pub fn for_tensors(tensors: &[&[f64]], learning_rate: f64) -> Self {
        let shapes: Vec<usize> = tensors.iter().map(|t| t.len()).collect();
        Self::new(&shapes, learning_rate)
    }

    /// One update. Parameters whose gradient and moments are all zero do not move.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} tensors", self.m.len()),
                format!("{} params / {} grads", params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::shape(
                    "adam_step",
                    format!("tensor {i} of length {}", self.m[i].len()),
                    format!("{} / {}", p.len(), g.len()),
                ));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
