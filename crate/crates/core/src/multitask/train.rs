//! Mini-batch training loop and evaluation.

use super::config::{SharingMode, TrainConfig};
use super::losses::{classification_loss, regression_loss, soft_sharing_penalty, weighted_sum, LossBreakdown};
use super::model::TwinModel;
use super::optim::Adam;
use crate::autodiff::Graph;
use crate::data::{Dataset, LabeledImage, CHANNELS};
use crate::error::{Error, Result};
use crate::layers::component_rng;
use crate::metrics::{EvalRecord, TaskMask};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// One record of the loss trace: epoch means of each term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub l_c: f64,
    pub l_r: f64,
    pub l_ps: f64,
    pub overall: f64,
    pub steps: usize,
}

/// Stacks images into a `[batch, 3, height, width]` tensor.
pub fn batch_tensor(items: &[&LabeledImage]) -> Result<Tensor> {
    let first = items.first().ok_or(Error::EmptyInput("empty batch"))?;
    let (h, w) = (first.height, first.width);
    let plane = CHANNELS * h * w;
    let mut data = vec![0.0; items.len() * plane];
    for (item, dst) in items.iter().zip(data.chunks_exact_mut(plane)) {
        if (item.height, item.width) != (h, w) {
            return Err(Error::ShapeMismatch {
                op: "batch",
                lhs: vec![h, w],
                rhs: vec![item.height, item.width],
            });
        }
        item.write_chw(dst);
    }
    Tensor::new(vec![items.len(), CHANNELS, h, w], data)
}

/// Owns the model and the optimizer state across steps.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: TwinModel,
    pub optimizer: Adam,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(model: TwinModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optimizer: Adam::new(config.weight_decay),
            model,
            config,
        })
    }

    /// One optimizer step on a mini-batch. Terms the mode lacks are
    /// reported as 0; terms with weight 0 are logged but not differentiated.
    pub fn step(&mut self, images: &Tensor, labels: &[usize], z: &[f64], lr: f64) -> Result<LossBreakdown> {
        let weights = self.config.loss_weights;
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let out = self.model.forward_graph(&mut g, x, true)?;
        let mut terms = Vec::new();
        let value = |g: &Graph, id| g.value(id).item();
        let mut b = LossBreakdown {
            l_c: 0.0,
            l_r: 0.0,
            l_ps: 0.0,
            overall: 0.0,
        };
        if let Some(logits) = out.logits {
            let l = classification_loss(&mut g, logits, labels)?;
            b.l_c = value(&g, l);
            terms.push((l, weights.classification));
        }
        if let Some(pred) = out.portion {
            let l = regression_loss(&mut g, pred, z)?;
            b.l_r = value(&g, l);
            terms.push((l, weights.regression));
        }
        if self.model.sharing() == SharingMode::SoftSharing {
            let (Some(bc), Some(br)) = (&self.model.backbone_c, &self.model.backbone_r) else {
                unreachable!("soft sharing builds both backbones")
            };
            let l = soft_sharing_penalty(&mut g, bc, br, self.config.shared_layer_fraction)?;
            b.l_ps = value(&g, l);
            terms.push((l, weights.sharing));
        }
        b.overall = weights.classification * b.l_c + weights.regression * b.l_r + weights.sharing * b.l_ps;
        if !b.overall.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        let Some(loss) = weighted_sum(&mut g, &terms)? else {
            return Err(Error::InvalidArgument(
                "every loss term of this mode has weight 0".into(),
            ));
        };
        let grads = g.backward(loss)?;
        for p in self.model.params_mut() {
            let Some(node) = g.param_node(&p.name) else { continue };
            let Some(grad) = grads.get(node) else { continue };
            self.optimizer.step(p, grad, lr)?;
        }
        if let (Some(fusion), Some(fo)) = (self.model.fusion.as_mut(), out.fusion.as_ref()) {
            fusion.commit(&g, fo)?;
        }
        Ok(b)
    }

    /// Shuffled mini-batch order for a 0-based epoch. A trailing batch of
    /// one item is dropped because batch norm needs two.
    pub fn batch_order(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = component_rng(self.config.seed, &format!("shuffle.epoch{epoch}"));
        order.shuffle(&mut rng);
        order
            .chunks(self.config.batch_size)
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Trains one epoch (0-based index) over `train`.
    pub fn train_epoch(&mut self, train: &Dataset, epoch: usize) -> Result<EpochLog> {
        let lr = self.config.lr_at(epoch);
        let mut sums = [0.0; 4];
        let batches = self.batch_order(train.len(), epoch);
        if batches.is_empty() {
            return Err(Error::EmptyInput("training set smaller than one batch"));
        }
        for (step, idx) in batches.iter().enumerate() {
            let items: Vec<&LabeledImage> = idx.iter().map(|&i| &train.items[i]).collect();
            let images = batch_tensor(&items)?;
            let labels: Vec<usize> = items.iter().map(|it| it.y).collect();
            let z: Vec<f64> = items.iter().map(|it| it.z).collect();
            let b = self.step(&images, &labels, &z, lr).map_err(|e| match e {
                Error::NonFinite { op } => Error::Diverged {
                    epoch: epoch + 1,
                    step: step + 1,
                    detail: format!("non-finite value in `{op}`"),
                },
                other => other,
            })?;
            for (s, v) in sums.iter_mut().zip([b.l_c, b.l_r, b.l_ps, b.overall]) {
                *s += v;
            }
        }
        let n = batches.len() as f64;
        Ok(EpochLog {
            epoch: epoch + 1,
            lr,
            l_c: sums[0] / n,
            l_r: sums[1] / n,
            l_ps: sums[2] / n,
            overall: sums[3] / n,
            steps: batches.len(),
        })
    }

    /// Runs the configured number of epochs, calling `on_epoch` after each.
    pub fn fit_with(&mut self, train: &Dataset, mut on_epoch: impl FnMut(&EpochLog)) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            let log = self.train_epoch(train, epoch)?;
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }

    pub fn fit(&mut self, train: &Dataset) -> Result<Vec<EpochLog>> {
        self.fit_with(train, |_| {})
    }
}

/// Trains a fresh model from `spec`-built `model` on `train`.
pub fn train(model: TwinModel, train: &Dataset, config: &TrainConfig) -> Result<(TwinModel, Vec<EpochLog>)> {
    let mut trainer = Trainer::new(model, config.clone())?;
    let logs = trainer.fit(train)?;
    Ok((trainer.model, logs))
}

/// Which heads a model has, for masking its report.
pub fn task_mask(model: &TwinModel) -> TaskMask {
    TaskMask {
        classification: model.mode().has_classifier(),
        portion: model.mode().has_portion(),
    }
}

/// Predicts every item of `data` in inference mode. A missing head is
/// filled with `usize::MAX` (class) or 0 (portion); mask the report with
/// [`task_mask`].
pub fn evaluate(model: &TwinModel, data: &Dataset, batch_size: usize) -> Result<Vec<EvalRecord>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let mut records = Vec::with_capacity(data.len());
    for chunk in data.items.chunks(batch_size.max(1)) {
        let items: Vec<&LabeledImage> = chunk.iter().collect();
        let pred = model.predict(&batch_tensor(&items)?)?;
        for (i, item) in items.iter().enumerate() {
            records.push(EvalRecord {
                predicted_class: pred.classes.as_ref().map_or(usize::MAX, |c| c[i]),
                true_class: item.y,
                predicted_portion: pred.portions.as_ref().map_or(0.0, |p| p[i]),
                true_portion: item.z,
            });
        }
    }
    Ok(records)
}
