//! Procedurally rendered shapes with known generative factors.
//!
//! Each image is a filled disc or square on a flat grey background, optionally
//! carrying a small square marker patch. Factor to pixel mapping:
//!
//! - `hue` in [0, 1): HSV hue of the shape at saturation 0.85, value 0.9
//! - `size`: shape radius as a fraction of the image side
//! - `cx`, `cy`: shape centre as fractions of the image side
//! - `background`: grey level in [-1, 1] pixel units
//! - `patch`: whether a `patch_size` square of colour (1, 1, -1) is drawn at
//!   (`patch_x`, `patch_y`), its top-left pixel
//!
//! Edges are anti-aliased by 4x4 supersampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::worlds::dataset::{AnnotatedDataset, Annotation, LabeledImages, Split};

const SUPERSAMPLE: usize = 4;
const PATCH_COLOR: [f32; 3] = [1.0, 1.0, -1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ClassRule {
    /// Label 1 iff hue >= threshold. Hues within `margin` of the threshold are never drawn.
    HueThreshold { threshold: f64, margin: f64 },
    /// Label 1 iff the marker patch is present.
    Patch,
    /// `num_classes` equal hue bins over [0, 1).
    HueBins { num_classes: usize },
}

impl ClassRule {
    pub fn num_classes(&self) -> usize {
        match self {
            ClassRule::HueThreshold { .. } | ClassRule::Patch => 2,
            ClassRule::HueBins { num_classes } => *num_classes,
        }
    }

    pub fn label(&self, f: &ShapeFactors) -> usize {
        match self {
            ClassRule::HueThreshold { threshold, .. } => usize::from(f.hue >= *threshold),
            ClassRule::Patch => usize::from(f.patch),
            ClassRule::HueBins { num_classes } => ((f.hue * *num_classes as f64) as usize).min(num_classes - 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapesDatasetConfig {
    pub num_images: usize,
    pub resolution: usize,
    pub class_rule: ClassRule,
    /// Probability that the background level is tied to the label instead of drawn at random.
    pub confound_strength: f64,
    pub heldout_fraction: f64,
    pub patch_size: usize,
}

impl Default for ShapesDatasetConfig {
    fn default() -> Self {
        Self {
            num_images: 5000,
            resolution: 32,
            class_rule: ClassRule::HueThreshold {
                threshold: 0.35,
                margin: 0.05,
            },
            confound_strength: 0.0,
            heldout_fraction: 0.2,
            patch_size: 5,
        }
    }
}

impl ShapesDatasetConfig {
    /// The small-marker variant: the label is carried only by a 5x5 patch at 32x32.
    pub fn subtle_patch() -> Self {
        Self {
            class_rule: ClassRule::Patch,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_images == 0 {
            return Err(Error::InvalidArgument("num_images must be >= 1".into()));
        }
        if self.resolution < 8 {
            return Err(Error::InvalidArgument("resolution must be >= 8".into()));
        }
        if !(0.0..=1.0).contains(&self.confound_strength) {
            return Err(Error::InvalidArgument("confound_strength must be in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::InvalidArgument("heldout_fraction must be in [0, 1)".into()));
        }
        if self.patch_size == 0 || self.patch_size * 2 > self.resolution {
            return Err(Error::InvalidArgument("patch_size must be in 1..=resolution/2".into()));
        }
        match &self.class_rule {
            ClassRule::HueThreshold { threshold, margin } => {
                if !(*margin >= 0.0) || *threshold - margin <= 0.0 || *threshold + margin >= 1.0 {
                    return Err(Error::InvalidArgument("hue threshold +- margin must lie inside (0, 1)".into()));
                }
            }
            ClassRule::HueBins { num_classes } if *num_classes < 2 => {
                return Err(Error::InvalidArgument("hue_bins needs >= 2 classes".into()));
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeFactors {
    pub hue: f64,
    pub size: f64,
    pub cx: f64,
    pub cy: f64,
    pub square: bool,
    pub background: f64,
    pub patch: bool,
    pub patch_x: usize,
    pub patch_y: usize,
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as u32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn sample_factors(config: &ShapesDatasetConfig, rng: &mut ChaCha8Rng) -> ShapeFactors {
    let r = config.resolution;
    let hue = match &config.class_rule {
        ClassRule::HueThreshold { threshold, margin } => {
            // uniform over [0, 1) minus the excluded band around the threshold
            let lo = threshold - margin;
            let hi = threshold + margin;
            let u = rng.random_range(0.0..(lo + (1.0 - hi)));
            if u < lo { u } else { u - lo + hi }
        }
        _ => rng.random_range(0.0..1.0),
    };
    let size = rng.random_range(0.18..0.32);
    let cx = rng.random_range(size + 0.05..0.95 - size);
    let cy = rng.random_range(size + 0.05..0.95 - size);
    let square = rng.random_bool(0.5);
    let background = rng.random_range(-0.8..0.0);
    let patch = rng.random_bool(0.5);
    let patch_x = rng.random_range(0..=r - config.patch_size);
    let patch_y = rng.random_range(0..=r - config.patch_size);
    ShapeFactors {
        hue,
        size,
        cx,
        cy,
        square,
        background,
        patch,
        patch_x,
        patch_y,
    }
}

pub fn render_shape(f: &ShapeFactors, resolution: usize, patch_size: usize) -> Image {
    let r = resolution;
    let rgb = hsv_to_rgb(f.hue, 0.85, 0.9).map(|c| c * 2.0 - 1.0);
    let mut im = Image::filled(3, r, r, f.background as f32);
    let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for y in 0..r {
        for x in 0..r {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = (x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) / r as f64 - f.cx;
                    let py = (y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) / r as f64 - f.cy;
                    let inside = if f.square {
                        px.abs() <= f.size && py.abs() <= f.size
                    } else {
                        px * px + py * py <= f.size * f.size
                    };
                    hits += usize::from(inside);
                }
            }
            let cover = hits as f64 / n;
            for (c, col) in rgb.iter().enumerate() {
                *im.at_mut(c, y, x) = (f.background * (1.0 - cover) + col * cover) as f32;
            }
        }
    }
    if f.patch {
        for y in f.patch_y..f.patch_y + patch_size {
            for x in f.patch_x..f.patch_x + patch_size {
                for (c, col) in PATCH_COLOR.iter().enumerate() {
                    *im.at_mut(c, y, x) = *col;
                }
            }
        }
    }
    im
}

/// Deterministic given `seed`: same config and seed give identical images, labels and annotations.
pub fn render_shapes_dataset(config: &ShapesDatasetConfig, seed: u64) -> Result<AnnotatedDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_classes = config.class_rule.num_classes();
    let mut images = Vec::with_capacity(config.num_images);
    let mut labels = Vec::with_capacity(config.num_images);
    let mut annotations = Vec::with_capacity(config.num_images);
    let n_held = ((config.num_images as f64) * config.heldout_fraction).round() as usize;
    for i in 0..config.num_images {
        let mut f = sample_factors(config, &mut rng);
        let label = config.class_rule.label(&f);
        if rng.random_bool(config.confound_strength) {
            // background brightness tracks the label without causing it
            let level = label as f64 / (num_classes - 1) as f64;
            f.background = -0.8 + 0.8 * level;
        }
        images.push(render_shape(&f, config.resolution, config.patch_size));
        labels.push(label);
        let split = if i < config.num_images - n_held {
            Split::Train
        } else {
            Split::Heldout
        };
        annotations.push(Annotation {
            path: format!("images/{i:05}.png"),
            label,
            split,
            factors: serde_json::to_value(&f)?,
        });
    }
    Ok(AnnotatedDataset {
        data: LabeledImages::new(images, labels, num_classes)?,
        annotations,
    })
}

/// Recomputes labels from stored factor annotations.
pub fn labels_from_annotations(rule: &ClassRule, annotations: &[Annotation]) -> Result<Vec<usize>> {
    annotations
        .iter()
        .map(|a| {
            let f: ShapeFactors = serde_json::from_value(a.factors.clone())?;
            Ok(rule.label(&f))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(rule: ClassRule) -> ShapesDatasetConfig {
        ShapesDatasetConfig {
            num_images: 64,
            class_rule: rule,
            ..ShapesDatasetConfig::default()
        }
    }

    #[test]
    fn labels_are_recomputable_from_factors() {
        for rule in [
            ShapesDatasetConfig::default().class_rule,
            ClassRule::Patch,
            ClassRule::HueBins { num_classes: 3 },
        ] {
            let d = render_shapes_dataset(&small(rule.clone()), 3).unwrap();
            assert_eq!(labels_from_annotations(&rule, &d.annotations).unwrap(), d.data.labels);
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = render_shapes_dataset(&small(ClassRule::Patch), 9).unwrap();
        let b = render_shapes_dataset(&small(ClassRule::Patch), 9).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.annotations, b.annotations);
        let c = render_shapes_dataset(&small(ClassRule::Patch), 10).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn patch_is_under_four_percent_of_pixels() {
        let c = ShapesDatasetConfig::subtle_patch();
        assert!(((c.patch_size * c.patch_size) as f64) < 0.04 * (c.resolution * c.resolution) as f64);
    }

    #[test]
    fn hue_margin_is_respected() {
        let d = render_shapes_dataset(&small(ShapesDatasetConfig::default().class_rule), 1).unwrap();
        for a in &d.annotations {
            let h = a.factors["hue"].as_f64().unwrap();
            assert!(!(0.30..0.40).contains(&h), "{h}");
        }
    }

    #[test]
    fn pixels_stay_in_range() {
        let d = render_shapes_dataset(&small(ClassRule::Patch), 5).unwrap();
        for im in &d.data.images {
            assert!(im.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
