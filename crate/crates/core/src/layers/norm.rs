//! Layer and batch normalization.
//!
//! Both normalize `x̂ = (x − μ) / sqrt(σ² + ε)` and then apply the learnable
//! per-feature map `y = γ ⊙ x̂ + β`. Layer norm takes μ, σ² over the hidden
//! units of each sample; batch norm takes them over the mini-batch for each
//! feature. Variances are biased (divide by the count).

use super::Param;
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    Layer,
    Batch,
}

impl std::fmt::Display for NormMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormMode::Layer => "layer",
            NormMode::Batch => "batch",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormLayer {
    pub gamma: Param,
    pub beta: Param,
    epsilon: f64,
    mode: NormMode,
    /// Batch mode only: exponential moving averages of batch statistics.
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    momentum: f64,
}

/// Node ids of the pre-affine normalized values and the layer output.
#[derive(Debug, Clone, Copy)]
pub struct NormOutput {
    pub normalized: NodeId,
    pub output: NodeId,
}

impl NormLayer {
    fn build(name: &str, features: usize, epsilon: f64, mode: NormMode, momentum: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!("norm epsilon must be > 0, got {epsilon}")));
        }
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "norm momentum must lie in (0, 1], got {momentum}"
            )));
        }
        if features == 0 {
            return Err(Error::InvalidArgument("norm layer needs at least one feature".into()));
        }
        let (running_mean, running_var) = match mode {
            NormMode::Batch => (vec![0.0; features], vec![1.0; features]),
            NormMode::Layer => (Vec::new(), Vec::new()),
        };
        Ok(Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[features], 1.0)),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[features])),
            epsilon,
            mode,
            running_mean,
            running_var,
            momentum,
        })
    }

    pub fn layer(name: &str, features: usize, epsilon: f64) -> Result<Self> {
        Self::build(name, features, epsilon, NormMode::Layer, 1.0)
    }

    pub fn batch(name: &str, features: usize, epsilon: f64, momentum: f64) -> Result<Self> {
        Self::build(name, features, epsilon, NormMode::Batch, momentum)
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn features(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn expect_mode(&self, mode: NormMode) -> Result<()> {
        if self.mode != mode {
            return Err(Error::ModeMismatch {
                expected: mode.to_string(),
                got: self.mode.to_string(),
            });
        }
        Ok(())
    }

    fn input_dims(&self, g: &Graph, x: NodeId) -> Result<(usize, usize)> {
        let shape = g.try_value(x)?.shape();
        match *shape {
            [m, h] if h == self.features() => Ok((m, h)),
            _ => Err(Error::ShapeMismatch {
                op: "norm",
                lhs: shape.to_vec(),
                rhs: vec![self.features()],
            }),
        }
    }

    fn affine(&self, g: &mut Graph, normalized: NodeId) -> Result<NormOutput> {
        let gamma = g.param(&self.gamma.name, &self.gamma.value);
        let beta = g.param(&self.beta.name, &self.beta.value);
        let output = g.affine(normalized, gamma, beta)?;
        Ok(NormOutput { normalized, output })
    }

    /// Normalizes along `axis` with statistics computed in the graph, so
    /// gradients flow through both μ and σ.
    fn normalize_by_batch_stats(&self, g: &mut Graph, x: NodeId, axis: usize, count: usize) -> Result<NodeId> {
        let mu = g.mean_axis(x, axis)?;
        let mu = g.expand(mu, axis, count)?;
        let centered = g.sub(x, mu)?;
        let var = g.var_axis(x, axis)?;
        let var_eps = g.add_scalar(var, self.epsilon)?;
        let std = g.sqrt(var_eps)?;
        let std = g.expand(std, axis, count)?;
        g.div(centered, std)
    }

    /// `x`: `[m, H]`; statistics per sample over its `H` units.
    pub fn layer_norm_forward(&self, g: &mut Graph, x: NodeId) -> Result<NormOutput> {
        self.expect_mode(NormMode::Layer)?;
        let (_, h) = self.input_dims(g, x)?;
        let normalized = self.normalize_by_batch_stats(g, x, 1, h)?;
        self.affine(g, normalized)
    }

    /// `x`: `[m, H]`. Training mode normalizes with the batch statistics and
    /// updates the running averages; inference mode uses the running
    /// averages, which makes each output row depend only on its input row.
    pub fn batch_norm_forward(&mut self, g: &mut Graph, x: NodeId, training: bool) -> Result<NormOutput> {
        let out = self.batch_norm_graph(g, x, training)?;
        if training {
            let value = g.value(x).clone();
            self.update_running_stats(&value);
        }
        Ok(out)
    }

    /// Same as [`batch_norm_forward`](Self::batch_norm_forward) but leaves
    /// the running averages untouched.
    pub fn batch_norm_graph(&self, g: &mut Graph, x: NodeId, training: bool) -> Result<NormOutput> {
        self.expect_mode(NormMode::Batch)?;
        let (m, h) = self.input_dims(g, x)?;
        if training {
            if m < 2 {
                return Err(Error::InvalidArgument(
                    "batch norm in training mode needs a mini-batch of at least 2".into(),
                ));
            }
            let normalized = self.normalize_by_batch_stats(g, x, 0, m)?;
            self.affine(g, normalized)
        } else {
            let mean = g.constant(Tensor::new(vec![1, h], self.running_mean.clone())?);
            let mean = g.expand(mean, 0, m)?;
            let std: Vec<f64> = self.running_var.iter().map(|v| (v + self.epsilon).sqrt()).collect();
            let std = g.constant(Tensor::new(vec![1, h], std)?);
            let std = g.expand(std, 0, m)?;
            let centered = g.sub(x, mean)?;
            let normalized = g.div(centered, std)?;
            self.affine(g, normalized)
        }
    }

    /// Folds the per-feature batch mean and biased variance of `x` into the
    /// running averages.
    pub fn update_running_stats(&mut self, x: &Tensor) {
        if self.mode != NormMode::Batch {
            return;
        }
        let (m, h) = (x.shape()[0], x.shape()[1]);
        for j in 0..h {
            let mean = (0..m).map(|i| x.data()[i * h + j]).sum::<f64>() / m as f64;
            let var = (0..m)
                .map(|i| (x.data()[i * h + j] - mean).powi(2))
                .sum::<f64>()
                / m as f64;
            self.running_mean[j] = (1.0 - self.momentum) * self.running_mean[j] + self.momentum * mean;
            self.running_var[j] = (1.0 - self.momentum) * self.running_var[j] + self.momentum * var;
        }
    }
}
