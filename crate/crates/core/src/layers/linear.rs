use super::{component_rng, glorot_uniform, Param};
use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Fully-connected layer `y = x · W + b` with `W` stored as `[in, out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(name: &str, inputs: usize, outputs: usize, seed: u64) -> Self {
        let mut rng = component_rng(seed, name);
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                glorot_uniform(&[inputs, outputs], inputs, outputs, &mut rng),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[outputs])),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = g.param(&self.weight.name, &self.weight.value);
        let b = g.param(&self.bias.name, &self.bias.value);
        let xw = g.matmul(x, w)?;
        g.add_bias(xw, b)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}
