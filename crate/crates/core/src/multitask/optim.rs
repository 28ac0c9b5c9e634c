//! Adam with coupled L2 weight decay.

use crate::error::{Error, Result};
use crate::layers::Param;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// One optimizer over every trainable parameter, keyed by parameter name.
/// A parameter that gets no gradient in a step is left untouched, moments
/// included.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    state: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            state: HashMap::new(),
        }
    }

    /// Applies `p ← p − lr · m̂ / (√v̂ + ε)` where the moments track
    /// `grad + weight_decay · p`.
    pub fn step(&mut self, param: &mut Param, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != param.value.len() {
            return Err(Error::ShapeMismatch {
                op: "adam",
                lhs: param.value.shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        let n = grad.len();
        let st = self.state.entry(param.name.clone()).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        });
        st.t += 1;
        let bc1 = 1.0 - self.beta1.powi(st.t as i32);
        let bc2 = 1.0 - self.beta2.powi(st.t as i32);
        let wd = self.weight_decay;
        for (i, p) in param.value.data_mut().iter_mut().enumerate() {
            let g = grad[i] + wd * *p;
            st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * g;
            st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = st.m[i] / bc1;
            let v_hat = st.v[i] / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }

    pub fn steps_taken(&self, name: &str) -> u64 {
        self.state.get(name).map_or(0, |s| s.t)
    }
}
