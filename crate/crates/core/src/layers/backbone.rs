//! Desk-scale convolutional feature extractor.
//!
//! Each block is `3×3 conv (same padding) → relu → 2×2 max-pool`; the final
//! block is flattened and mapped by a fully-connected layer plus relu to a
//! `feature_dim` vector.

use super::{component_rng, glorot_uniform, Linear, Param};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub feature_dim: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            in_channels: 3,
            input_size: 32,
            channels: vec![8, 16, 16],
            kernel: 3,
            feature_dim: 64,
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        let blocks = self.channels.len();
        if blocks == 0 || self.in_channels == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidArgument(
                "backbone needs at least one block and positive dims".into(),
            ));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel size must be odd, got {}",
                self.kernel
            )));
        }
        if self.input_size == 0 || self.input_size % (1 << blocks) != 0 {
            return Err(Error::InvalidArgument(format!(
                "input size {} must be divisible by 2^{blocks}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Flattened width entering the fully-connected layer.
    pub fn flat_dim(&self) -> usize {
        let side = self.input_size >> self.channels.len();
        self.channels.last().copied().unwrap_or(0) * side * side
    }

    /// Number of parameterized layers: the conv blocks plus the final FC.
    pub fn layer_count(&self) -> usize {
        self.channels.len() + 1
    }

    pub fn param_count(&self) -> usize {
        let mut prev = self.in_channels;
        let mut n = 0;
        for &c in &self.channels {
            n += c * prev * self.kernel * self.kernel + c;
            prev = c;
        }
        n + self.flat_dim() * self.feature_dim + self.feature_dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub weight: Param,
    pub bias: Param,
}

impl ConvBlock {
    fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = g.param(&self.weight.name, &self.weight.value);
        let b = g.param(&self.bias.name, &self.bias.value);
        let pad = self.weight.value.shape()[2] / 2;
        let y = g.conv2d(x, w, b, 1, pad)?;
        let y = g.relu(y)?;
        g.maxpool2d(y, 2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    spec: BackboneSpec,
    blocks: Vec<ConvBlock>,
    fc: Linear,
}

impl Backbone {
    /// Parameters are named `{name}.conv{i}.*` and `{name}.fc.*`.
    pub fn new(name: &str, spec: &BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let k = spec.kernel;
        let mut prev = spec.in_channels;
        let mut blocks = Vec::with_capacity(spec.channels.len());
        for (i, &c) in spec.channels.iter().enumerate() {
            let id = format!("{name}.conv{i}");
            let mut rng = component_rng(seed, &id);
            blocks.push(ConvBlock {
                weight: Param::new(
                    format!("{id}.weight"),
                    glorot_uniform(&[c, prev, k, k], prev * k * k, c * k * k, &mut rng),
                ),
                bias: Param::new(format!("{id}.bias"), Tensor::zeros(&[c])),
            });
            prev = c;
        }
        let fc = Linear::new(&format!("{name}.fc"), spec.flat_dim(), spec.feature_dim, seed);
        Ok(Self {
            spec: spec.clone(),
            blocks,
            fc,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    /// `images`: `[N, C, H, W]` → features `[N, feature_dim]`.
    pub fn forward(&self, g: &mut Graph, images: NodeId) -> Result<NodeId> {
        let s = &self.spec;
        let shape = g.try_value(images)?.shape().to_vec();
        if shape.len() != 4 || shape[1..] != [s.in_channels, s.input_size, s.input_size] {
            return Err(Error::ShapeMismatch {
                op: "backbone",
                lhs: shape,
                rhs: vec![s.in_channels, s.input_size, s.input_size],
            });
        }
        let n = shape[0];
        let mut x = images;
        for block in &self.blocks {
            x = block.forward(g, x)?;
        }
        let flat = g.reshape(x, vec![n, s.flat_dim()])?;
        let y = self.fc.forward(g, flat)?;
        g.relu(y)
    }

    /// Per-layer parameter groups in layer order, weight before bias.
    pub fn layers(&self) -> Vec<Vec<&Param>> {
        let mut out: Vec<Vec<&Param>> = self
            .blocks
            .iter()
            .map(|b| vec![&b.weight, &b.bias])
            .collect();
        out.push(self.fc.params());
        out
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers().into_iter().flatten().collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
        }
        out.extend(self.fc.params_mut());
        out
    }

    /// All learnable values concatenated: layer index, then weight before
    /// bias, each row-major. Two backbones of one spec align index by index.
    pub fn flatten_params(&self) -> Vec<f64> {
        self.params()
            .into_iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BackboneSpec {
        BackboneSpec {
            in_channels: 3,
            input_size: 8,
            channels: vec![2, 3],
            kernel: 3,
            feature_dim: 5,
        }
    }

    #[test]
    fn zero_image_through_zero_backbone_is_zero() {
        let mut bb = Backbone::new("b", &small(), 1).unwrap();
        for p in bb.params_mut() {
            p.value.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 8, 8]));
        let f = bb.forward(&mut g, x).unwrap();
        assert_eq!(g.value(f).shape(), &[2, 5]);
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn param_count_matches_architecture() {
        let spec = small();
        let bb = Backbone::new("b", &spec, 3).unwrap();
        // conv0: 2·3·9 + 2, conv1: 3·2·9 + 3, fc: (3·2·2)·5 + 5
        let expect = (2 * 3 * 9 + 2) + (3 * 2 * 9 + 3) + 12 * 5 + 5;
        assert_eq!(spec.param_count(), expect);
        assert_eq!(bb.flatten_params().len(), expect);
        let other = Backbone::new("other", &spec, 99).unwrap();
        assert_eq!(other.flatten_params().len(), expect);
    }

    #[test]
    fn copy_and_reseed_behaviour() {
        let bb = Backbone::new("b", &small(), 3).unwrap();
        assert_eq!(bb.clone().flatten_params(), bb.flatten_params());
        assert_eq!(Backbone::new("b", &small(), 3).unwrap().flatten_params(), bb.flatten_params());
        assert_ne!(Backbone::new("b", &small(), 4).unwrap().flatten_params(), bb.flatten_params());
    }

    #[test]
    fn forward_is_deterministic_and_checks_size() {
        let bb = Backbone::new("b", &small(), 5).unwrap();
        let img = Tensor::new(vec![1, 3, 8, 8], (0..192).map(|v| (v as f64 * 0.1).sin()).collect()).unwrap();
        let run = || {
            let mut g = Graph::new();
            let x = g.constant(img.clone());
            let f = bb.forward(&mut g, x).unwrap();
            g.value(f).clone()
        };
        assert_eq!(run(), run());
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 16, 16]));
        assert!(bb.forward(&mut g, x).is_err());
    }

    #[test]
    fn spec_validation() {
        let mut s = small();
        s.input_size = 10;
        assert!(s.validate().is_err());
        s = small();
        s.kernel = 2;
        assert!(s.validate().is_err());
    }
}
