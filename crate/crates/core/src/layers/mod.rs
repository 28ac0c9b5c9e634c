//! Parameterized layers and the convolutional backbone.

mod backbone;
mod linear;
mod norm;

pub use backbone::{Backbone, BackboneSpec, ConvBlock};
pub use linear::Linear;
pub use norm::{NormLayer, NormMode, NormOutput};

use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A named learnable tensor. Names are unique within a model and are the
/// key under which the parameter is bound into a [`Graph`](crate::autodiff::Graph).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

/// Uniform `[-s, s]` with `s = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, -s, s, rng)
}

/// Deterministic generator for one named model component.
///
/// Each component draws from its own stream, so adding or removing a
/// component never shifts the initialization of the others.
pub fn component_rng(seed: u64, component: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in component.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ h))
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
