//! Renders one object per image. The portion follows the
//! `energy = volume × energy density` premise: each class has a density
//! constant and the portion is density × covered area fraction × 984 kcal.

use super::image::{Dataset, LabeledImage, Provenance, Split, CHANNELS};
use crate::error::{Error, Result};
use crate::layers::splitmix64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Portion of a full-frame object with density 1.
pub const MAX_PORTION_KCAL: f64 = 984.0;

const SHAPES: [Shape; 7] = [
    Shape::Disk,
    Shape::Square,
    Shape::Triangle,
    Shape::Diamond,
    Shape::Ring,
    Shape::Cross,
    Shape::Ellipse,
];
const TEXTURES: [Texture; 4] = [Texture::Solid, Texture::HStripes, Texture::VStripes, Texture::Checker];

pub const MAX_CLASSES: usize = SHAPES.len() * TEXTURES.len();

/// Smallest side at which every shape still covers several pixels.
const MIN_IMAGE_SIZE: usize = 8;

/// Background channels stay below this; object pixels always exceed it.
const OBJECT_THRESHOLD: f32 = 0.25;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub n_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Diamond,
    Ring,
    Cross,
    Ellipse,
}

impl Shape {
    /// Membership test in object-normalized coordinates, `u, v ∈ [-1, 1]`.
    fn contains(self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            Shape::Disk => r2 <= 1.0,
            Shape::Square => u.abs() <= 1.0 && v.abs() <= 1.0,
            Shape::Triangle => (-1.0..=1.0).contains(&v) && u.abs() <= (v + 1.0) / 2.0,
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::Ring => (0.25..=1.0).contains(&r2),
            Shape::Cross => {
                (u.abs() <= 0.35 && v.abs() <= 1.0) || (v.abs() <= 0.35 && u.abs() <= 1.0)
            }
            Shape::Ellipse => u * u + 4.0 * v * v <= 1.0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Shape::Disk => "disk",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
            Shape::Ring => "ring",
            Shape::Cross => "cross",
            Shape::Ellipse => "ellipse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Texture {
    Solid,
    HStripes,
    VStripes,
    Checker,
}

impl Texture {
    fn use_secondary(self, row: usize, col: usize, period: usize, phase: usize) -> bool {
        let band = |k: usize| ((k + phase) / period) % 2 == 1;
        match self {
            Texture::Solid => false,
            Texture::HStripes => band(row),
            Texture::VStripes => band(col),
            Texture::Checker => band(row) ^ band(col),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Texture::Solid => "solid",
            Texture::HStripes => "hstripes",
            Texture::VStripes => "vstripes",
            Texture::Checker => "checker",
        }
    }
}

/// Visual family and energy density of one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassStyle {
    pub shape: Shape,
    pub texture: Texture,
    /// Fraction of [`MAX_PORTION_KCAL`] delivered by a full-frame object.
    pub density: f64,
}

impl ClassStyle {
    /// Class `k` of `n`: shapes cycle fastest, textures change every seven
    /// classes, densities are evenly spaced so class 0 carries 0 kcal.
    pub fn for_class(k: usize, n: usize) -> Self {
        Self {
            shape: SHAPES[k % SHAPES.len()],
            texture: TEXTURES[k / SHAPES.len()],
            density: k as f64 / (n - 1) as f64,
        }
    }

    pub fn name(&self) -> String {
        format!("{}-{}", self.shape.name(), self.texture.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectColors {
    pub primary: [f32; CHANNELS],
    pub secondary: [f32; CHANNELS],
    pub background: [f32; CHANNELS],
    pub stripe_period: usize,
    pub stripe_phase: usize,
}

impl ObjectColors {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut primary = [0f32; CHANNELS];
        for c in &mut primary {
            *c = rng.gen_range(0.1..1.0);
        }
        let peak = primary.iter().copied().fold(0.0f32, f32::max);
        let target: f32 = rng.gen_range(0.6..1.0);
        primary.iter_mut().for_each(|c| *c *= target / peak);
        let secondary = primary.map(|c| c * 0.55);
        let mut background = [0f32; CHANNELS];
        for c in &mut background {
            *c = rng.gen_range(0.0..0.1);
        }
        Self {
            primary,
            secondary,
            background,
            stripe_period: rng.gen_range(2..5),
            stripe_phase: rng.gen_range(0..4),
        }
    }
}

/// Draws one object centred at `(cx, cy)` with half-extent `radius` (pixel
/// units) onto a `size × size` canvas. Returns the HWC pixels and the number
/// of object pixels.
pub fn render_object(
    style: &ClassStyle,
    size: usize,
    cx: f64,
    cy: f64,
    radius: f64,
    colors: &ObjectColors,
    rng: &mut ChaCha8Rng,
) -> (Vec<f32>, usize) {
    let mut pixels = vec![0f32; size * size * CHANNELS];
    let mut area = 0;
    for row in 0..size {
        for col in 0..size {
            let u = (col as f64 + 0.5 - cx) / radius;
            let v = (row as f64 + 0.5 - cy) / radius;
            let k = (row * size + col) * CHANNELS;
            let px = &mut pixels[k..k + CHANNELS];
            if style.shape.contains(u, v) {
                area += 1;
                let color = if style
                    .texture
                    .use_secondary(row, col, colors.stripe_period, colors.stripe_phase)
                {
                    colors.secondary
                } else {
                    colors.primary
                };
                px.copy_from_slice(&color);
            } else {
                for (c, p) in px.iter_mut().enumerate() {
                    let noise: f32 = rng.gen_range(-0.03..0.03);
                    *p = (colors.background[c] + noise).clamp(0.0, 0.15);
                }
            }
        }
    }
    (pixels, area)
}

pub fn portion_kcal(density: f64, area: usize, image_area: usize) -> f64 {
    density * (area as f64 / image_area as f64) * MAX_PORTION_KCAL
}

/// Counts object pixels by thresholding the brightest channel.
pub fn recover_object_area(item: &LabeledImage) -> usize {
    item.pixels
        .chunks_exact(CHANNELS)
        .filter(|px| px.iter().copied().fold(0.0f32, f32::max) > OBJECT_THRESHOLD)
        .count()
}

fn render_item(style: &ClassStyle, size: usize, rng: &mut ChaCha8Rng) -> (Vec<f32>, usize) {
    let s = size as f64;
    let radius = rng.gen_range(0.2 * s..0.45 * s);
    let cx = rng.gen_range(radius..=s - radius);
    let cy = rng.gen_range(radius..=s - radius);
    let colors = ObjectColors::random(rng);
    render_object(style, size, cx, cy, radius, &colors, rng)
}

/// `per_class` images for each of `n_classes` classes. Item `i` draws from
/// its own generator seeded by `seed ^ i`, so generation order does not
/// matter.
pub fn generate_synthetic_dataset(n_classes: usize, per_class: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    if !(2..=MAX_CLASSES).contains(&n_classes) {
        return Err(Error::InvalidArgument(format!(
            "n_classes must be in [2, {MAX_CLASSES}], got {n_classes}"
        )));
    }
    if per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be at least 1".into()));
    }
    if image_size < MIN_IMAGE_SIZE {
        return Err(Error::InvalidArgument(format!(
            "image size {image_size} is too small to render shapes (minimum {MIN_IMAGE_SIZE})"
        )));
    }
    let styles: Vec<ClassStyle> = (0..n_classes).map(|k| ClassStyle::for_class(k, n_classes)).collect();
    let mut items = Vec::with_capacity(n_classes * per_class);
    for k in 0..n_classes {
        for j in 0..per_class {
            let id = k * per_class + j;
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ id as u64));
            let (pixels, area) = render_item(&styles[k], image_size, &mut rng);
            items.push(LabeledImage {
                id,
                height: image_size,
                width: image_size,
                pixels,
                y: k,
                z: portion_kcal(styles[k].density, area, image_size * image_size),
                provenance: Provenance::Original,
                split: Split::Unassigned,
            });
        }
    }
    Ok(Dataset {
        class_names: styles.iter().map(ClassStyle::name).collect(),
        items,
        generator: Some(GeneratorParams {
            n_classes,
            per_class,
            image_size,
            seed,
        }),
    })
}
