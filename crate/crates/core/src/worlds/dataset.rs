//! Labeled image collections and their on-disk form.
//!
//! A dataset directory holds `images/*.png` and `annotations.jsonl`, one JSON
//! object per line: `{"path", "label", "split", "factors"}`. User-supplied
//! data can instead be ingested from a directory-per-class folder tree.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledImages {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledImages {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {l} >= num_classes {num_classes}")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn classes_present(&self) -> usize {
        let mut seen = vec![false; self.num_classes];
        for &l in &self.labels {
            seen[l] = true;
        }
        seen.iter().filter(|s| **s).count()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn resolution(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(Image::shape)
    }

    /// Seeded random split into `(train, heldout)`.
    pub fn split(&self, heldout_fraction: f64, seed: u64) -> (Self, Self) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_held = ((self.len() as f64) * heldout_fraction).round() as usize;
        let (held, train) = idx.split_at(n_held.min(self.len()));
        (self.subset(train), self.subset(held))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub path: String,
    pub label: usize,
    pub split: Split,
    #[serde(default)]
    pub factors: serde_json::Value,
}

/// A dataset as stored on disk: images with labels, splits and factor annotations.
#[derive(Debug, Clone, Default)]
pub struct AnnotatedDataset {
    pub data: LabeledImages,
    pub annotations: Vec<Annotation>,
}

impl AnnotatedDataset {
    pub fn split(&self, which: Split) -> LabeledImages {
        let idx: Vec<usize> = self
            .annotations
            .iter()
            .enumerate()
            .filter(|(_, a)| a.split == which)
            .map(|(i, _)| i)
            .collect();
        self.data.subset(&idx)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let ann_path = dir.join("annotations.jsonl");
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?);
        for (im, a) in self.data.images.iter().zip(&self.annotations) {
            im.save_png(&dir.join(&a.path))?;
            serde_json::to_writer(&mut f, a)?;
            f.write_all(b"\n").map_err(|e| Error::io(&ann_path, e))?;
        }
        f.flush().map_err(|e| Error::io(&ann_path, e))
    }

    pub fn load(dir: &Path, num_classes: usize) -> Result<Self> {
        let ann_path = dir.join("annotations.jsonl");
        let f = std::fs::File::open(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
        let mut annotations = Vec::new();
        let mut images = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(&ann_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let a: Annotation = serde_json::from_str(&line)?;
            images.push(Image::load_png(&dir.join(&a.path))?);
            annotations.push(a);
        }
        let labels = annotations.iter().map(|a| a.label).collect();
        Ok(Self {
            data: LabeledImages::new(images, labels, num_classes)?,
            annotations,
        })
    }
}

/// Loads `root/<class>/*.png`; classes are the sorted subdirectory names.
pub fn load_image_folder(root: &Path) -> Result<(LabeledImages, Vec<String>)> {
    let mut classes: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::InvalidArgument(format!("{} has no class subdirectories", root.display())));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
            })
            .collect();
        files.sort();
        for f in files {
            images.push(Image::load_png(&f)?);
            labels.push(label);
        }
    }
    let names = classes
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect::<Vec<_>>();
    Ok((LabeledImages::new(images, labels, names.len())?, names))
}
