use crate::error::{Error, Result};
use crate::layers::BackboneSpec;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// The eight ablation configurations, one per row of the results table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentMode {
    ClassificationOnly,
    PortionOnly,
    Hps,
    Sps,
    SpsCdfa,
    SpsCdfaBn,
    SpsCdfaLn,
    SpsCdfaLnBn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    /// Independent networks with no coupling term.
    Separate,
    /// One backbone feeding both heads.
    HardSharing,
    /// Two backbones tied by the squared-L2 penalty.
    SoftSharing,
}

impl ExperimentMode {
    pub const ALL: [ExperimentMode; 8] = [
        ExperimentMode::ClassificationOnly,
        ExperimentMode::PortionOnly,
        ExperimentMode::Hps,
        ExperimentMode::Sps,
        ExperimentMode::SpsCdfa,
        ExperimentMode::SpsCdfaBn,
        ExperimentMode::SpsCdfaLn,
        ExperimentMode::SpsCdfaLnBn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentMode::ClassificationOnly => "classification_only",
            ExperimentMode::PortionOnly => "portion_only",
            ExperimentMode::Hps => "hps",
            ExperimentMode::Sps => "sps",
            ExperimentMode::SpsCdfa => "sps_cdfa",
            ExperimentMode::SpsCdfaBn => "sps_cdfa_bn",
            ExperimentMode::SpsCdfaLn => "sps_cdfa_ln",
            ExperimentMode::SpsCdfaLnBn => "sps_cdfa_ln_bn",
        }
    }

    /// Human-readable row label for result tables.
    pub fn label(self) -> &'static str {
        match self {
            ExperimentMode::ClassificationOnly => "Classification",
            ExperimentMode::PortionOnly => "Portion Estimation",
            ExperimentMode::Hps => "HPS",
            ExperimentMode::Sps => "SPS",
            ExperimentMode::SpsCdfa => "SPS+CDFA",
            ExperimentMode::SpsCdfaBn => "SPS+CDFA+BN",
            ExperimentMode::SpsCdfaLn => "SPS+CDFA+LN",
            ExperimentMode::SpsCdfaLnBn => "SPS+CDFA+LN+BN",
        }
    }

    pub fn sharing(self) -> SharingMode {
        match self {
            ExperimentMode::ClassificationOnly | ExperimentMode::PortionOnly => SharingMode::Separate,
            ExperimentMode::Hps => SharingMode::HardSharing,
            _ => SharingMode::SoftSharing,
        }
    }

    pub fn has_classifier(self) -> bool {
        self != ExperimentMode::PortionOnly
    }

    pub fn has_portion(self) -> bool {
        self != ExperimentMode::ClassificationOnly
    }

    pub fn cdfa(self) -> bool {
        matches!(
            self,
            ExperimentMode::SpsCdfa
                | ExperimentMode::SpsCdfaBn
                | ExperimentMode::SpsCdfaLn
                | ExperimentMode::SpsCdfaLnBn
        )
    }

    pub fn uses_ln(self) -> bool {
        matches!(self, ExperimentMode::SpsCdfaLn | ExperimentMode::SpsCdfaLnBn)
    }

    pub fn uses_bn(self) -> bool {
        matches!(self, ExperimentMode::SpsCdfaBn | ExperimentMode::SpsCdfaLnBn)
    }
}

impl fmt::Display for ExperimentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = ExperimentMode::ALL.iter().map(|m| m.name()).collect();
                Error::InvalidArgument(format!(
                    "unknown mode `{s}`; valid modes: {}",
                    valid.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LnPlacement {
    /// Separate layer norms on `x_p` and `x_c` before concatenation.
    PreConcat,
    /// One layer norm over the concatenated vector.
    PostConcat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormOrder {
    LnThenBn,
    BnThenLn,
}

/// Fusion-head options for the cross-domain feature adaptation modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionOptions {
    pub ln_placement: LnPlacement,
    pub norm_order: NormOrder,
    pub detach_classifier_features: bool,
    pub norm_epsilon: f64,
    pub bn_momentum: f64,
}

impl Default for FusionOptions {
    fn default() -> Self {
        Self {
            ln_placement: LnPlacement::PreConcat,
            norm_order: NormOrder::LnThenBn,
            detach_classifier_features: false,
            norm_epsilon: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl FusionOptions {
    pub fn validate(&self) -> Result<()> {
        if self.ln_placement == LnPlacement::PreConcat && self.norm_order == NormOrder::BnThenLn {
            return Err(Error::InvalidArgument(
                "bn_then_ln needs ln_placement = post_concat: batch norm acts on the concatenated vector".into(),
            ));
        }
        if !(self.norm_epsilon > 0.0) {
            return Err(Error::InvalidArgument("norm_epsilon must be > 0".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::InvalidArgument("bn_momentum must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a model's architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub mode: ExperimentMode,
    pub n_classes: usize,
    pub backbone: BackboneSpec,
    pub fusion: FusionOptions,
    /// The portion head predicts in units of this many kcal.
    pub portion_scale: f64,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(mode: ExperimentMode, n_classes: usize, backbone: BackboneSpec, seed: u64) -> Self {
        Self {
            mode,
            n_classes,
            backbone,
            fusion: FusionOptions::default(),
            portion_scale: 100.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.fusion.validate()?;
        if self.n_classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        if !(self.portion_scale > 0.0 && self.portion_scale.is_finite()) {
            return Err(Error::InvalidArgument("portion_scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub classification: f64,
    pub regression: f64,
    pub sharing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            classification: 1.0,
            regression: 1.0,
            sharing: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(classification: f64, regression: f64, sharing: f64) -> Self {
        Self {
            classification,
            regression,
            sharing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("classification", self.classification),
            ("regression", self.regression),
            ("sharing", self.sharing),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "loss weight `{name}` must be finite and non-negative, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Optimization hyperparameters. Defaults are the desk-scale schedule;
/// [`TrainConfig::full_scale`] holds the original ResNet-18 settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub loss_weights: LossWeights,
    pub shared_layer_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            base_lr: 1e-3,
            lr_drop_epochs: vec![20, 40],
            lr_drop_factor: 0.1,
            weight_decay: 1e-4,
            batch_size: 32,
            loss_weights: LossWeights::default(),
            shared_layer_fraction: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// 100 epochs of Adam at 0.1, dropped tenfold after epochs 30, 60 and 90.
    pub fn full_scale() -> Self {
        Self {
            epochs: 100,
            base_lr: 0.1,
            lr_drop_epochs: vec![30, 60, 90],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "lr_drop_epochs must be strictly increasing, got {:?}",
                self.lr_drop_epochs
            ));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return bad("lr_drop_factor must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative".into());
        }
        if !(self.shared_layer_fraction > 0.0 && self.shared_layer_fraction <= 1.0) {
            return bad(format!(
                "shared_layer_fraction must lie in (0, 1], got {}",
                self.shared_layer_fraction
            ));
        }
        self.loss_weights.validate()
    }

    /// Learning rate for a 0-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&d| d <= epoch).count();
        self.base_lr * self.lr_drop_factor.powi(drops as i32)
    }
}
