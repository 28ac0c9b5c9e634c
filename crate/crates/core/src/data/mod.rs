//! Synthetic labeled food-like images, balanced augmentation, stratified
//! splitting and on-disk persistence.

mod augment;
mod generate;
mod image;
mod io;
mod split;

pub use augment::{balanced_augment, AugmentOp};
pub use generate::{
    generate_synthetic_dataset, portion_kcal, recover_object_area, render_object, ClassStyle,
    GeneratorParams, ObjectColors, Shape, Texture, MAX_CLASSES, MAX_PORTION_KCAL,
};
pub use image::{Dataset, LabeledImage, Provenance, Split, CHANNELS};
pub use io::{load_dataset, save_dataset, IMAGE_MAGIC, MANIFEST_VERSION};
pub use split::{assign_splits, split_train_test};

use crate::error::Result;
use serde::{Deserialize, Serialize};

/// End-to-end dataset recipe: generate, split, then balance the train split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    pub test_fraction: f64,
    /// Per-class target for balancing. `None` balances up to the largest class.
    pub augment_target: Option<usize>,
    /// Augment the whole pool before splitting instead of only the train
    /// split. Augmented copies still follow their source into one split.
    pub augment_before_split: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_classes: 21,
            per_class: 100,
            image_size: 32,
            seed: 7,
            test_fraction: 0.2,
            augment_target: None,
            augment_before_split: false,
        }
    }
}

impl DataConfig {
    pub fn generator(&self) -> GeneratorParams {
        GeneratorParams {
            n_classes: self.n_classes,
            per_class: self.per_class,
            image_size: self.image_size,
            seed: self.seed,
        }
    }
}

/// Builds a split, balanced dataset from a recipe.
pub fn build_dataset(config: &DataConfig) -> Result<Dataset> {
    let pool = generate_synthetic_dataset(
        config.n_classes,
        config.per_class,
        config.image_size,
        config.seed,
    )?;
    let aug_seed = config.seed ^ 0xa0a0_a0a0;
    let split_seed = config.seed ^ 0x5151_5151;
    if config.augment_before_split {
        let target = config.augment_target.unwrap_or_else(|| pool.max_class_count());
        let mut all = balanced_augment(&pool, target, aug_seed)?;
        assign_splits(&mut all, config.test_fraction, split_seed)?;
        Ok(all)
    } else {
        let mut pool = pool;
        assign_splits(&mut pool, config.test_fraction, split_seed)?;
        let train = pool.subset(Split::Train);
        let target = config.augment_target.unwrap_or_else(|| train.max_class_count());
        let balanced = balanced_augment(&train, target, aug_seed)?;
        let mut items = balanced.items;
        items.extend(pool.subset(Split::Test).items);
        items.sort_by_key(|it| it.id);
        Ok(Dataset { items, ..pool })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pipeline_balances_train_and_never_augments_test() {
        let cfg = DataConfig {
            n_classes: 3,
            per_class: 10,
            image_size: 16,
            augment_target: Some(12),
            ..DataConfig::default()
        };
        let ds = build_dataset(&cfg).unwrap();
        let train = ds.subset(Split::Train);
        let test = ds.subset(Split::Test);
        assert_eq!(train.class_counts(), vec![12, 12, 12]);
        assert!(test.items.iter().all(|it| it.provenance == Provenance::Original));
        assert_eq!(test.class_counts(), vec![2, 2, 2]);
    }

    #[test]
    fn augment_first_keeps_copies_with_their_source() {
        let cfg = DataConfig {
            n_classes: 2,
            per_class: 6,
            image_size: 16,
            augment_target: Some(15),
            augment_before_split: true,
            ..DataConfig::default()
        };
        let ds = build_dataset(&cfg).unwrap();
        assert_eq!(ds.class_counts(), vec![15, 15]);
        for it in &ds.items {
            if let Provenance::Augmented { source, .. } = it.provenance {
                let src = ds.items.iter().find(|s| s.id == source).unwrap();
                assert_eq!(src.split, it.split);
            }
        }
    }
}
