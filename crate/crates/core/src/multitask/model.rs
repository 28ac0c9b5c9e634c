//! The twin-network model: classification and portion backbones, their
//! heads, and the optional cross-domain feature adaptation (fusion) head.

use super::config::{ExperimentMode, LnPlacement, ModelSpec, NormOrder, SharingMode};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::layers::{Backbone, Linear, NormLayer, Param};
use crate::tensor::Tensor;

/// Portion head over the concatenation `(x_p, x_c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    pub ln_c: Option<NormLayer>,
    pub ln_r: Option<NormLayer>,
    pub ln_joint: Option<NormLayer>,
    pub bn: Option<NormLayer>,
    pub fc: Linear,
    pub order: NormOrder,
    pub detach_classifier_features: bool,
    feature_dim: usize,
}

/// Node ids produced by one fusion pass.
#[derive(Debug, Clone, Copy)]
pub struct FusionOutput {
    /// Input to the final fully-connected layer, `[batch, 2·feature_dim]`.
    pub pre_fc: NodeId,
    /// Raw head output, `[batch, 1]`.
    pub output: NodeId,
    /// Batch-norm input when batch norm ran in training mode.
    bn_input: Option<NodeId>,
}

impl FusionHead {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        let f = spec.backbone.feature_dim;
        let o = &spec.fusion;
        let mode = spec.mode;
        let (mut ln_c, mut ln_r, mut ln_joint) = (None, None, None);
        if mode.uses_ln() {
            match o.ln_placement {
                LnPlacement::PreConcat => {
                    ln_c = Some(NormLayer::layer("fusion.ln_c", f, o.norm_epsilon)?);
                    ln_r = Some(NormLayer::layer("fusion.ln_r", f, o.norm_epsilon)?);
                }
                LnPlacement::PostConcat => {
                    ln_joint = Some(NormLayer::layer("fusion.ln", 2 * f, o.norm_epsilon)?);
                }
            }
        }
        let bn = if mode.uses_bn() {
            Some(NormLayer::batch("fusion.bn", 2 * f, o.norm_epsilon, o.bn_momentum)?)
        } else {
            None
        };
        Ok(Self {
            ln_c,
            ln_r,
            ln_joint,
            bn,
            fc: Linear::new("fusion.fc", 2 * f, 1, spec.seed),
            order: o.norm_order,
            detach_classifier_features: o.detach_classifier_features,
            feature_dim: f,
        })
    }

    fn check(&self, g: &Graph, x: NodeId) -> Result<usize> {
        let shape = g.try_value(x)?.shape();
        match *shape {
            [m, f] if f == self.feature_dim => Ok(m),
            _ => Err(Error::ShapeMismatch {
                op: "cdfa_forward",
                lhs: shape.to_vec(),
                rhs: vec![self.feature_dim],
            }),
        }
    }

    /// Batch norm in graph form; running statistics are updated by the caller.
    fn bn_graph(&self, g: &mut Graph, x: NodeId, training: bool) -> Result<NodeId> {
        let bn = self.bn.as_ref().expect("bn present");
        Ok(bn.batch_norm_graph(g, x, training)?.output)
    }

    /// Detach (optional) → per-domain LN → concat `(x_p, x_c)` → joint LN/BN
    /// in the configured order → fully-connected to one output.
    pub fn forward(&self, g: &mut Graph, x_p: NodeId, x_c: NodeId, training: bool) -> Result<FusionOutput> {
        let mp = self.check(g, x_p)?;
        let mc = self.check(g, x_c)?;
        if mp != mc {
            return Err(Error::ShapeMismatch {
                op: "cdfa_forward",
                lhs: vec![mp, self.feature_dim],
                rhs: vec![mc, self.feature_dim],
            });
        }
        let mut x_c = x_c;
        if self.detach_classifier_features {
            x_c = g.detach(x_c)?;
        }
        let mut x_p = x_p;
        if let (Some(ln_r), Some(ln_c)) = (&self.ln_r, &self.ln_c) {
            x_p = ln_r.layer_norm_forward(g, x_p)?.output;
            x_c = ln_c.layer_norm_forward(g, x_c)?.output;
        }
        let mut h = g.concat(&[x_p, x_c], 1)?;
        let mut bn_input = None;
        let mut apply_bn = |g: &mut Graph, h: NodeId| -> Result<NodeId> {
            if self.bn.is_none() {
                return Ok(h);
            }
            if training {
                bn_input = Some(h);
            }
            self.bn_graph(g, h, training)
        };
        match self.order {
            NormOrder::LnThenBn => {
                if let Some(ln) = &self.ln_joint {
                    h = ln.layer_norm_forward(g, h)?.output;
                }
                h = apply_bn(g, h)?;
            }
            NormOrder::BnThenLn => {
                h = apply_bn(g, h)?;
                if let Some(ln) = &self.ln_joint {
                    h = ln.layer_norm_forward(g, h)?.output;
                }
            }
        }
        let output = self.fc.forward(g, h)?;
        Ok(FusionOutput {
            pre_fc: h,
            output,
            bn_input,
        })
    }

    /// Applies the batch-norm running-statistics update for a training pass.
    pub fn commit(&mut self, g: &Graph, out: &FusionOutput) -> Result<()> {
        if let (Some(bn), Some(x)) = (self.bn.as_mut(), out.bn_input) {
            let x = g.try_value(x)?.clone();
            bn.update_running_stats(&x);
        }
        Ok(())
    }

    fn norms(&self) -> impl Iterator<Item = &NormLayer> {
        [&self.ln_c, &self.ln_r, &self.ln_joint, &self.bn]
            .into_iter()
            .flatten()
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = self.norms().flat_map(NormLayer::params).collect();
        out.extend(self.fc.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        for n in [&mut self.ln_c, &mut self.ln_r, &mut self.ln_joint, &mut self.bn]
            .into_iter()
            .flatten()
        {
            out.extend(n.params_mut());
        }
        out.extend(self.fc.params_mut());
        out
    }
}

/// Graph outputs of one model pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub logits: Option<NodeId>,
    /// Portion predictions in kcal, `[batch, 1]`.
    pub portion: Option<NodeId>,
    pub x_c: Option<NodeId>,
    pub x_p: Option<NodeId>,
    pub fusion: Option<FusionOutput>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub classes: Option<Vec<usize>>,
    pub portions: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwinModel {
    spec: ModelSpec,
    /// Classification backbone; in hard-sharing mode the single shared one.
    pub backbone_c: Option<Backbone>,
    pub backbone_r: Option<Backbone>,
    pub head_c: Option<Linear>,
    pub head_r: Option<Linear>,
    pub fusion: Option<FusionHead>,
}

impl TwinModel {
    /// Every component draws its initial weights from its own named stream
    /// of `spec.seed`, so equally named components match across modes.
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mode = spec.mode;
        let f = spec.backbone.feature_dim;
        let seed = spec.seed;
        let backbone_c = if mode.has_classifier() || mode.sharing() == SharingMode::HardSharing {
            Some(Backbone::new("backbone_c", &spec.backbone, seed)?)
        } else {
            None
        };
        let backbone_r = if mode.has_portion() && mode.sharing() != SharingMode::HardSharing {
            Some(Backbone::new("backbone_r", &spec.backbone, seed)?)
        } else {
            None
        };
        let head_c = mode
            .has_classifier()
            .then(|| Linear::new("head_c", f, spec.n_classes, seed));
        let head_r = (mode.has_portion() && !mode.cdfa()).then(|| Linear::new("head_r", f, 1, seed));
        let fusion = if mode.cdfa() {
            Some(FusionHead::new(&spec)?)
        } else {
            None
        };
        Ok(Self {
            spec,
            backbone_c,
            backbone_r,
            head_c,
            head_r,
            fusion,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn mode(&self) -> ExperimentMode {
        self.spec.mode
    }

    pub fn sharing(&self) -> SharingMode {
        self.spec.mode.sharing()
    }

    /// Builds the forward graph without touching model state.
    pub fn forward_graph(&self, g: &mut Graph, images: NodeId, training: bool) -> Result<ForwardOutput> {
        let scale = self.spec.portion_scale;
        let mut out = ForwardOutput {
            logits: None,
            portion: None,
            x_c: None,
            x_p: None,
            fusion: None,
        };
        if let Some(bb) = &self.backbone_c {
            out.x_c = Some(bb.forward(g, images)?);
        }
        out.x_p = match (&self.backbone_r, self.sharing()) {
            (Some(bb), _) => Some(bb.forward(g, images)?),
            (None, SharingMode::HardSharing) => out.x_c,
            (None, _) => None,
        };
        if let (Some(head), Some(x_c)) = (&self.head_c, out.x_c) {
            out.logits = Some(head.forward(g, x_c)?);
        }
        if let (Some(head), Some(x_p)) = (&self.head_r, out.x_p) {
            let raw = head.forward(g, x_p)?;
            out.portion = Some(g.mul_scalar(raw, scale)?);
        }
        if let (Some(fusion), Some(x_p), Some(x_c)) = (&self.fusion, out.x_p, out.x_c) {
            let fo = fusion.forward(g, x_p, x_c, training)?;
            out.portion = Some(g.mul_scalar(fo.output, scale)?);
            out.fusion = Some(fo);
        }
        Ok(out)
    }

    /// Forward pass; in training mode batch-norm running statistics are
    /// updated.
    pub fn forward(&mut self, g: &mut Graph, images: NodeId, training: bool) -> Result<ForwardOutput> {
        let out = self.forward_graph(g, images, training)?;
        if let (Some(fusion), Some(fo)) = (self.fusion.as_mut(), out.fusion.as_ref()) {
            fusion.commit(g, fo)?;
        }
        Ok(out)
    }

    /// One shared backbone feeding both heads. Only valid in hard-sharing mode.
    pub fn hard_sharing_forward(&self, g: &mut Graph, images: NodeId) -> Result<(NodeId, NodeId)> {
        if self.sharing() != SharingMode::HardSharing {
            return Err(Error::ModeMismatch {
                expected: "hps".into(),
                got: self.mode().to_string(),
            });
        }
        let out = self.forward_graph(g, images, true)?;
        Ok((
            out.logits.expect("hps has a classifier"),
            out.portion.expect("hps has a portion head"),
        ))
    }

    /// Inference with batch norm on running statistics: class = argmax of
    /// the logits, portion = portion head output in kcal.
    pub fn predict(&self, images: &Tensor) -> Result<Predictions> {
        let mut g = Graph::no_grad();
        let x = g.constant(images.clone());
        let out = self.forward_graph(&mut g, x, false)?;
        let classes = out.logits.map(|l| {
            let t = g.value(l);
            (0..t.shape()[0]).map(|i| argmax(t.row(i))).collect()
        });
        let portions = out.portion.map(|p| g.value(p).data().to_vec());
        Ok(Predictions { classes, portions })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for bb in [&self.backbone_c, &self.backbone_r].into_iter().flatten() {
            out.extend(bb.params());
        }
        for head in [&self.head_c, &self.head_r].into_iter().flatten() {
            out.extend(head.params());
        }
        if let Some(f) = &self.fusion {
            out.extend(f.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for bb in [&mut self.backbone_c, &mut self.backbone_r].into_iter().flatten() {
            out.extend(bb.params_mut());
        }
        for head in [&mut self.head_c, &mut self.head_r].into_iter().flatten() {
            out.extend(head.params_mut());
        }
        if let Some(f) = &mut self.fusion {
            out.extend(f.params_mut());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Batch-norm layers with their running statistics, by name prefix.
    pub fn batch_norms(&self) -> Vec<(&str, &NormLayer)> {
        self.fusion
            .as_ref()
            .and_then(|f| f.bn.as_ref())
            .map(|bn| vec![("fusion.bn", bn)])
            .unwrap_or_default()
    }

    pub fn batch_norms_mut(&mut self) -> Vec<(&str, &mut NormLayer)> {
        self.fusion
            .as_mut()
            .and_then(|f| f.bn.as_mut())
            .map(|bn| vec![("fusion.bn", bn)])
            .unwrap_or_default()
    }
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::layers::BackboneSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> BackboneSpec {
        BackboneSpec {
            in_channels: 3,
            input_size: 8,
            channels: vec![2],
            kernel: 3,
            feature_dim: 4,
        }
    }

    fn images(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[n, 3, 8, 8], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn components_follow_the_mode() {
        let build = |m| TwinModel::new(ModelSpec::new(m, 5, tiny(), 1)).unwrap();
        let c = build(ExperimentMode::ClassificationOnly);
        assert!(c.backbone_c.is_some() && c.backbone_r.is_none() && c.head_r.is_none());
        let p = build(ExperimentMode::PortionOnly);
        assert!(p.backbone_c.is_none() && p.backbone_r.is_some() && p.head_c.is_none());
        let h = build(ExperimentMode::Hps);
        assert!(h.backbone_r.is_none() && h.head_c.is_some() && h.head_r.is_some());
        let s = build(ExperimentMode::Sps);
        assert!(s.backbone_c.is_some() && s.backbone_r.is_some() && s.fusion.is_none());
        let f = build(ExperimentMode::SpsCdfaLnBn).fusion.unwrap();
        assert!(f.ln_c.is_some() && f.ln_r.is_some() && f.bn.is_some() && f.ln_joint.is_none());
        let f = build(ExperimentMode::SpsCdfaLn).fusion.unwrap();
        assert!(f.ln_c.is_some() && f.bn.is_none());
        let f = build(ExperimentMode::SpsCdfaBn).fusion.unwrap();
        assert!(f.ln_c.is_none() && f.ln_joint.is_none() && f.bn.is_some());
        let f = build(ExperimentMode::SpsCdfa).fusion.unwrap();
        assert!(f.ln_joint.is_none() && f.bn.is_none());
        // Equally named components start identical across modes.
        assert_eq!(c.backbone_c, s.backbone_c);
        assert_eq!(p.backbone_r, s.backbone_r);
        assert_ne!(s.backbone_c.unwrap().flatten_params(), s.backbone_r.unwrap().flatten_params());
    }

    #[test]
    fn hard_sharing_forward_only_in_hps() {
        let m = TwinModel::new(ModelSpec::new(ExperimentMode::Sps, 5, tiny(), 1)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(images(2, 0));
        assert!(matches!(m.hard_sharing_forward(&mut g, x), Err(Error::ModeMismatch { .. })));
        let m = TwinModel::new(ModelSpec::new(ExperimentMode::Hps, 5, tiny(), 1)).unwrap();
        let (logits, portion) = m.hard_sharing_forward(&mut g, x).unwrap();
        assert_eq!(g.value(logits).shape(), &[2, 5]);
        assert_eq!(g.value(portion).shape(), &[2, 1]);
    }

    #[test]
    fn ln_bn_pre_fc_has_zero_batch_mean_in_training() {
        let mut m = TwinModel::new(ModelSpec::new(ExperimentMode::SpsCdfaLnBn, 5, tiny(), 3)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(images(6, 1));
        let out = m.forward(&mut g, x, true).unwrap();
        let h = g.value(out.fusion.unwrap().pre_fc);
        let cols = h.shape()[1];
        for j in 0..cols {
            let mean: f64 = (0..6).map(|i| h.data()[i * cols + j]).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-9, "feature {j} mean {mean}");
        }
        let bn = &m.fusion.as_ref().unwrap().bn.as_ref().unwrap();
        assert!(bn.running_mean.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn prediction_is_batch_size_invariant() {
        let mut m = TwinModel::new(ModelSpec::new(ExperimentMode::SpsCdfaLnBn, 5, tiny(), 3)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(images(4, 2));
        m.forward(&mut g, x, true).unwrap();
        let batch = images(5, 9);
        let all = m.predict(&batch).unwrap();
        let portions = all.portions.unwrap();
        let classes = all.classes.unwrap();
        for i in 0..5 {
            let one = Tensor::new(vec![1, 3, 8, 8], batch.data()[i * 192..(i + 1) * 192].to_vec()).unwrap();
            let p = m.predict(&one).unwrap();
            assert_eq!(p.portions.unwrap()[0].to_bits(), portions[i].to_bits());
            assert_eq!(p.classes.unwrap()[0], classes[i]);
        }
    }

    #[test]
    fn single_task_predictions_leave_other_head_absent() {
        let m = TwinModel::new(ModelSpec::new(ExperimentMode::PortionOnly, 5, tiny(), 3)).unwrap();
        let p = m.predict(&images(2, 0)).unwrap();
        assert!(p.classes.is_none() && p.portions.unwrap().len() == 2);
    }

    #[test]
    fn fusion_head_gradients_match_finite_differences() {
        for placement in [LnPlacement::PreConcat, LnPlacement::PostConcat] {
            let mut spec = ModelSpec::new(ExperimentMode::SpsCdfaLnBn, 3, tiny(), 5);
            spec.fusion.ln_placement = placement;
            let head = FusionHead::new(&spec).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut g = Graph::new();
            let xp = g.leaf(Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng), true);
            let xc = g.leaf(Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng), true);
            let fo = head.forward(&mut g, xp, xc, true).unwrap();
            let sq = g.square(fo.output).unwrap();
            let loss = g.sum(sq).unwrap();
            for leaf in [xp, xc] {
                let r = grad_check(&mut g, loss, leaf, 1e-4).unwrap();
                assert!(r.max_rel_error <= 1e-4, "{placement:?}: {}", r.max_rel_error);
            }
        }
    }

    #[test]
    fn detached_classifier_features_get_no_gradient() {
        let mut spec = ModelSpec::new(ExperimentMode::SpsCdfaLnBn, 3, tiny(), 5);
        spec.fusion.detach_classifier_features = true;
        let head = FusionHead::new(&spec).unwrap();
        let mut g = Graph::new();
        let xp = g.leaf(Tensor::full(&[2, 4], 0.5), true);
        let xc = g.leaf(Tensor::new(vec![2, 4], (0..8).map(f64::from).collect()).unwrap(), true);
        let fo = head.forward(&mut g, xp, xc, true).unwrap();
        let loss = g.sum(fo.output).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(xc).map_or(true, |v| v.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, -1.0]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }
}
