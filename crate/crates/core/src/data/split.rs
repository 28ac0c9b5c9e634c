use super::image::{Dataset, Provenance, Split};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Stratified assignment of original images to train/test; each augmented
/// copy follows its source.
///
/// Per class, `round(n · test_fraction)` originals (clamped to `[1, n − 1]`)
/// go to test.
pub fn assign_splits(dataset: &mut Dataset, test_fraction: f64, seed: u64) -> Result<()> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_classes()];
    for (idx, it) in dataset.items.iter().enumerate() {
        if it.provenance == Provenance::Original {
            by_class[it.y].push(idx);
        }
    }
    if let Some((k, members)) = by_class.iter().enumerate().find(|(_, m)| m.len() < 2) {
        return Err(Error::InvalidArgument(format!(
            "class {k} has {} original items; at least 2 are needed to split",
            members.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut of_source: HashMap<usize, Split> = HashMap::new();
    for members in &mut by_class {
        let n = members.len();
        let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
        members.shuffle(&mut rng);
        for (rank, &idx) in members.iter().enumerate() {
            let split = if rank < n_test { Split::Test } else { Split::Train };
            dataset.items[idx].split = split;
            of_source.insert(dataset.items[idx].id, split);
        }
    }
    for it in &mut dataset.items {
        if let Provenance::Augmented { source, .. } = it.provenance {
            it.split = *of_source.get(&source).ok_or_else(|| {
                Error::Format(format!("augmented item {} refers to missing source {source}", it.id))
            })?;
        }
    }
    Ok(())
}

/// Returns `(train, test)` with split assignments recorded on every item.
pub fn split_train_test(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut ds = dataset.clone();
    assign_splits(&mut ds, test_fraction, seed)?;
    Ok((ds.subset(Split::Train), ds.subset(Split::Test)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_dataset;
    use std::collections::HashSet;

    #[test]
    fn full_dataset_sized_split() {
        // 2168 items over 21 classes: 5 classes of 104, 16 of 103
        let mut ds = generate_synthetic_dataset(21, 104, 8, 0).unwrap();
        ds.items.retain(|it| it.y < 5 || it.id % 104 != 103);
        assert_eq!(ds.len(), 2168);
        let (train, test) = split_train_test(&ds, 424.0 / 2168.0, 1).unwrap();
        assert!((test.len() as i64 - 424).abs() <= 21, "test size {}", test.len());
        assert_eq!(train.len() + test.len(), 2168);
        assert!(train.class_counts().iter().all(|&c| c > 0));
        assert!(test.class_counts().iter().all(|&c| c > 0));
        let tr: HashSet<usize> = train.items.iter().map(|i| i.id).collect();
        assert!(test.items.iter().all(|i| !tr.contains(&i.id)));
    }

    #[test]
    fn split_is_seeded() {
        let ds = generate_synthetic_dataset(3, 10, 8, 0).unwrap();
        let a = split_train_test(&ds, 0.3, 5).unwrap();
        let b = split_train_test(&ds, 0.3, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_tiny_classes_and_bad_fraction() {
        let ds = generate_synthetic_dataset(3, 1, 8, 0).unwrap();
        assert!(split_train_test(&ds, 0.2, 0).is_err());
        let ds = generate_synthetic_dataset(3, 4, 8, 0).unwrap();
        assert!(split_train_test(&ds, 0.0, 0).is_err());
        assert!(split_train_test(&ds, 1.0, 0).is_err());
    }
}
