//! Task losses and the soft parameter-sharing penalty.
//!
//! `L_c` is cross-entropy against one-hot labels and `L_r` the absolute
//! portion error, both averaged over the batch. `L_ps` is the squared L2
//! distance between the lower-layer parameters of the two backbones, and the
//! objective is `λ_c·L_c + λ_r·L_r + λ_ps·L_ps`.

use super::config::LossWeights;
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::layers::{Backbone, Param};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Mean over the batch of `−Σ_i ŷ_i · log softmax(logits)_i`.
pub fn classification_loss(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let shape = g.try_value(logits)?.shape().to_vec();
    let [batch, n] = shape[..] else {
        return Err(Error::InvalidShape {
            op: "classification_loss",
            shape,
            reason: "logits must be [batch, classes]".into(),
        });
    };
    if labels.len() != batch {
        return Err(Error::ShapeMismatch {
            op: "classification_loss",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    let mut one_hot = vec![0.0; batch * n];
    for (i, &y) in labels.iter().enumerate() {
        if y >= n {
            return Err(Error::LabelOutOfRange { label: y, n_classes: n });
        }
        one_hot[i * n + y] = 1.0;
    }
    let target = g.constant(Tensor::new(vec![batch, n], one_hot)?);
    let log_probs = g.log_softmax(logits)?;
    let picked = g.mul(target, log_probs)?;
    let total = g.sum(picked)?;
    g.mul_scalar(total, -1.0 / batch as f64)
}

/// Mean over the batch of `|z − prediction|`; `prediction` is `[batch, 1]`.
pub fn regression_loss(g: &mut Graph, prediction: NodeId, z: &[f64]) -> Result<NodeId> {
    let shape = g.try_value(prediction)?.shape().to_vec();
    if shape != [z.len(), 1] {
        return Err(Error::ShapeMismatch {
            op: "regression_loss",
            lhs: shape,
            rhs: vec![z.len(), 1],
        });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("portion targets must be finite".into()));
    }
    let target = g.constant(Tensor::new(vec![z.len(), 1], z.to_vec())?);
    let diff = g.sub(target, prediction)?;
    let abs = g.abs(diff)?;
    g.mean(abs)
}

/// Number of leading backbone layers covered by a sharing fraction.
pub fn shared_layer_count(total_layers: usize, fraction: f64) -> usize {
    ((fraction * total_layers as f64).ceil() as usize).clamp(1, total_layers)
}

fn shared_pairs<'a>(
    classifier: &'a Backbone,
    regressor: &'a Backbone,
    fraction: f64,
) -> Result<Vec<(&'a Param, &'a Param)>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "shared layer fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let (lc, lr) = (classifier.layers(), regressor.layers());
    if lc.len() != lr.len() {
        return Err(Error::ShapeMismatch {
            op: "soft_sharing_penalty",
            lhs: vec![lc.len()],
            rhs: vec![lr.len()],
        });
    }
    let k = shared_layer_count(lc.len(), fraction);
    let mut pairs = Vec::new();
    for (a, b) in lc.into_iter().zip(lr).take(k) {
        if a.len() != b.len() {
            return Err(Error::ShapeMismatch {
                op: "soft_sharing_penalty",
                lhs: vec![a.len()],
                rhs: vec![b.len()],
            });
        }
        for (pa, pb) in a.into_iter().zip(b) {
            if pa.value.shape() != pb.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "soft_sharing_penalty",
                    lhs: pa.value.shape().to_vec(),
                    rhs: pb.value.shape().to_vec(),
                });
            }
            pairs.push((pa, pb));
        }
    }
    Ok(pairs)
}

/// `Σ (p_c − p_r)²` over the first `⌈fraction · layers⌉` backbone layers,
/// built in `g` so gradients reach both backbones.
pub fn soft_sharing_penalty(
    g: &mut Graph,
    classifier: &Backbone,
    regressor: &Backbone,
    fraction: f64,
) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for (pc, pr) in shared_pairs(classifier, regressor, fraction)? {
        let a = g.param(&pc.name, &pc.value);
        let b = g.param(&pr.name, &pr.value);
        let d = g.sub(a, b)?;
        let sq = g.square(d)?;
        let s = g.sum(sq)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("no shared parameters".into()))
}

/// Value of [`soft_sharing_penalty`] without building a graph.
pub fn soft_sharing_penalty_value(classifier: &Backbone, regressor: &Backbone, fraction: f64) -> Result<f64> {
    Ok(shared_pairs(classifier, regressor, fraction)?
        .into_iter()
        .map(|(a, b)| {
            a.value
                .data()
                .iter()
                .zip(b.value.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_r: f64,
    pub l_ps: f64,
    pub overall: f64,
}

pub fn overall_loss(l_c: f64, l_r: f64, l_ps: f64, weights: &LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    if [l_c, l_r, l_ps].iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "loss terms must be non-negative, got ({l_c}, {l_r}, {l_ps})"
        )));
    }
    Ok(LossBreakdown {
        l_c,
        l_r,
        l_ps,
        overall: weights.classification * l_c + weights.regression * l_r + weights.sharing * l_ps,
    })
}

/// `Σ λ_k · term_k` in the graph, skipping zero weights.
pub fn weighted_sum(g: &mut Graph, terms: &[(NodeId, f64)]) -> Result<Option<NodeId>> {
    let mut total = None;
    for &(node, w) in terms {
        if w == 0.0 {
            continue;
        }
        let scaled = if w == 1.0 { node } else { g.mul_scalar(node, w)? };
        total = Some(match total {
            Some(t) => g.add(t, scaled)?,
            None => scaled,
        });
    }
    Ok(total)
}
