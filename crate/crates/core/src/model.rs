//! The narrow interface that discovery, explanation and evaluation run against.
//!
//! Both trained network bundles and analytic oracle worlds implement
//! [`StyleModel`], so attribute search never sees architecture details.

use crate::error::Result;
use crate::image::Image;
use crate::style::{StyleLayout, StyleVectorSet};

pub type Logits = Vec<f64>;

pub trait StyleModel {
    fn layout(&self) -> &StyleLayout;

    fn num_classes(&self) -> usize;

    /// Classifier logits of the images rendered from each style vector set.
    fn logits_from_styles(&self, batch: &[StyleVectorSet]) -> Result<Vec<Logits>>;

    /// Images rendered from each style vector set (no mapping / affine stage).
    fn render_styles(&self, batch: &[StyleVectorSet]) -> Result<Vec<Image>>;

    /// Style vectors used to reconstruct each image (encode, then condition and map).
    fn capture_styles(&self, images: &[Image]) -> Result<Vec<StyleVectorSet>>;

    /// Classifier logits of the given images.
    fn classify_images(&self, images: &[Image]) -> Result<Vec<Logits>>;

    /// Discriminator realness of rendered images, when the model has a discriminator.
    fn realness_from_styles(&self, _batch: &[StyleVectorSet]) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }

    /// Identity of the classifier behind the logits, when it has one.
    fn classifier_id(&self) -> Result<Option<String>> {
        Ok(None)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_first_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }

    #[test]
    fn softmax_is_a_distribution() {
        let p = softmax(&[1000.0, 999.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[0] > p[1] && p[1] > p[2]);
    }
}
