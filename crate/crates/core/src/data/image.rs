use super::augment::AugmentOp;
use serde::{Deserialize, Serialize};

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Provenance {
    Original,
    Augmented { source: usize, op: AugmentOp },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Unassigned,
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Unassigned => "unassigned",
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// An image with its class label `y` and portion `z` (kcal).
///
/// Pixels are `height × width × 3` in row-major HWC order, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub y: usize,
    pub z: f64,
    pub provenance: Provenance,
    pub split: Split,
}

impl LabeledImage {
    pub fn pixel(&self, row: usize, col: usize) -> [f32; CHANNELS] {
        let k = (row * self.width + col) * CHANNELS;
        [self.pixels[k], self.pixels[k + 1], self.pixels[k + 2]]
    }

    /// Writes the image into `dst` in CHW order as `f64`.
    pub fn write_chw(&self, dst: &mut [f64]) {
        let plane = self.height * self.width;
        for (p, px) in self.pixels.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                dst[c * plane + p] = f64::from(px[c]);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub items: Vec<LabeledImage>,
    pub generator: Option<super::GeneratorParams>,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for it in &self.items {
            counts[it.y] += 1;
        }
        counts
    }

    pub fn max_class_count(&self) -> usize {
        self.class_counts().into_iter().max().unwrap_or(0)
    }

    pub fn subset(&self, split: Split) -> Dataset {
        Dataset {
            class_names: self.class_names.clone(),
            items: self.items.iter().filter(|it| it.split == split).cloned().collect(),
            generator: self.generator.clone(),
        }
    }

    /// Image side length, if every item is square with the same size.
    pub fn image_size(&self) -> Option<usize> {
        let first = self.items.first()?;
        self.items
            .iter()
            .all(|it| it.height == first.height && it.width == first.height)
            .then_some(first.height)
    }
}
