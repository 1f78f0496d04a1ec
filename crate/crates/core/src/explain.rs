//! Per-image counterfactuals built from discovered attributes.
//!
//! Interventions compose as set-to-value edits on distinct coordinates, so a
//! joint counterfactual does not depend on the order attributes are applied.
//! Deltas are measured against the reconstruction rendered from the captured
//! styles, not against the input pixels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::ArtifactHeader;
use crate::attfind::{Attribute, AttributeSet};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{argmax, softmax, Logits, StyleModel};
use crate::models::checkpoint::write_json_atomic;
use crate::style::{apply_intervention, StyleStats, StyleVectorSet};

pub const DEFAULT_K_MAX: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualResult {
    pub original_image: Image,
    pub modified_image: Image,
    pub applied: Vec<Attribute>,
    pub logits_before: Logits,
    pub logits_after: Logits,
    pub target_class: usize,
    pub flipped: bool,
}

pub fn is_flip(before: &[f64], after: &[f64], y: usize) -> bool {
    argmax(after) == y && argmax(before) != y
}

/// Errors unless `stats` is the statistics object `attrs` was discovered with.
pub fn check_stats(attrs: &AttributeSet, stats: &StyleStats) -> Result<()> {
    if attrs.stats_ref != stats.digest() {
        return Err(Error::InvalidArgument(format!(
            "attribute set was built with stats {}, got {}",
            attrs.stats_ref,
            stats.digest()
        )));
    }
    Ok(())
}

/// Applies every attribute of `subset` to a copy of `styles`.
pub fn apply_all<M: StyleModel + ?Sized>(
    model: &M,
    styles: &StyleVectorSet,
    subset: &[Attribute],
    stats: &StyleStats,
    alpha: f64,
) -> Result<StyleVectorSet> {
    for (i, a) in subset.iter().enumerate() {
        if subset[..i].iter().any(|b| b.coord == a.coord) {
            return Err(Error::InvalidArgument(format!(
                "coordinate ({}, {}) appears twice in the subset",
                a.coord.layer, a.coord.channel
            )));
        }
    }
    let mut out = styles.clone();
    for a in subset {
        apply_intervention(&mut out, model.layout(), a.coord, a.direction, stats, alpha)?;
    }
    Ok(out)
}

fn single_logits<M: StyleModel + ?Sized>(model: &M, s: &StyleVectorSet) -> Result<Logits> {
    Ok(model.logits_from_styles(std::slice::from_ref(s))?.remove(0))
}

/// Each attribute's single-intervention change in `C_y` on this image, top `k` descending.
pub fn independent_topk<M: StyleModel + ?Sized>(
    model: &M,
    styles: &StyleVectorSet,
    attrs: &AttributeSet,
    k: usize,
    stats: &StyleStats,
) -> Result<Vec<(Attribute, f64)>> {
    check_stats(attrs, stats)?;
    if attrs.is_empty() {
        return Ok(Vec::new());
    }
    if k > attrs.len() {
        return Err(Error::InvalidArgument(format!("k={k} exceeds {} attributes", attrs.len())));
    }
    let y = attrs.target_class;
    let mut batch = vec![styles.clone()];
    for a in &attrs.attributes {
        batch.push(apply_all(model, styles, std::slice::from_ref(a), stats, attrs.alpha)?);
    }
    let logits = model.logits_from_styles(&batch)?;
    let base = logits[0][y];
    let mut scored: Vec<(Attribute, f64)> = attrs
        .attributes
        .iter()
        .cloned()
        .zip(logits[1..].iter().map(|l| l[y] - base))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.truncate(k);
    Ok(scored)
}

/// Greedily adds the attribute with the largest marginal gain in `C_y` until
/// the prediction flips to `y`, `k_max` attributes are applied, or no
/// remaining attribute has positive gain.
pub fn subset_greedy<M: StyleModel + ?Sized>(
    model: &M,
    styles: &StyleVectorSet,
    attrs: &AttributeSet,
    k_max: usize,
    stats: &StyleStats,
) -> Result<CounterfactualResult> {
    let (applied, logits_before, logits_after, current) = greedy_search(model, styles, attrs, k_max, stats)?;
    let imgs = model.render_styles(&[styles.clone(), current])?;
    let mut imgs = imgs.into_iter();
    let y = attrs.target_class;
    Ok(CounterfactualResult {
        original_image: imgs.next().expect("two renders"),
        modified_image: imgs.next().expect("two renders"),
        flipped: is_flip(&logits_before, &logits_after, y),
        applied,
        logits_before,
        logits_after,
        target_class: y,
    })
}

/// Greedy search without rendering: `(applied, logits_before, logits_after, final styles)`.
pub(crate) fn greedy_search<M: StyleModel + ?Sized>(
    model: &M,
    styles: &StyleVectorSet,
    attrs: &AttributeSet,
    k_max: usize,
    stats: &StyleStats,
) -> Result<(Vec<Attribute>, Logits, Logits, StyleVectorSet)> {
    check_stats(attrs, stats)?;
    let y = attrs.target_class;
    let before = single_logits(model, styles)?;
    if argmax(&before) == y {
        return Err(Error::Precondition(format!("image is already predicted as class {y}")));
    }
    let mut applied: Vec<Attribute> = Vec::new();
    let mut current = styles.clone();
    let mut current_logits = before.clone();
    while applied.len() < k_max {
        let candidates: Vec<&Attribute> = attrs
            .attributes
            .iter()
            .filter(|a| !applied.iter().any(|b| b.coord == a.coord))
            .collect();
        if candidates.is_empty() {
            break;
        }
        let mut batch = Vec::with_capacity(candidates.len());
        for a in &candidates {
            let mut s = current.clone();
            apply_intervention(&mut s, model.layout(), a.coord, a.direction, stats, attrs.alpha)?;
            batch.push(s);
        }
        let logits = model.logits_from_styles(&batch)?;
        let mut best: Option<usize> = None;
        for (i, l) in logits.iter().enumerate() {
            let gain = l[y] - current_logits[y];
            if gain > 0.0 && best.is_none_or(|b| gain > logits[b][y] - current_logits[y]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        applied.push(candidates[b].clone());
        current = batch.swap_remove(b);
        current_logits = logits[b].clone();
        if argmax(&current_logits) == y {
            break;
        }
    }
    Ok((applied, before, current_logits, current))
}

/// Captures `image`, applies every attribute in `subset`, and regenerates.
pub fn render_counterfactual<M: StyleModel + ?Sized>(
    model: &M,
    image: &Image,
    subset: &[Attribute],
    target_class: usize,
    stats: &StyleStats,
    alpha: f64,
) -> Result<CounterfactualResult> {
    let styles = model.capture_styles(std::slice::from_ref(image))?.remove(0);
    counterfactual_from_styles(model, &styles, subset, target_class, stats, alpha)
}

pub fn counterfactual_from_styles<M: StyleModel + ?Sized>(
    model: &M,
    styles: &StyleVectorSet,
    subset: &[Attribute],
    target_class: usize,
    stats: &StyleStats,
    alpha: f64,
) -> Result<CounterfactualResult> {
    if target_class >= model.num_classes() {
        return Err(Error::InvalidArgument(format!("class {target_class} out of range")));
    }
    let modified = apply_all(model, styles, subset, stats, alpha)?;
    let batch = [styles.clone(), modified];
    let logits = model.logits_from_styles(&batch)?;
    let mut imgs = model.render_styles(&batch)?.into_iter();
    Ok(CounterfactualResult {
        original_image: imgs.next().expect("two renders"),
        modified_image: imgs.next().expect("two renders"),
        applied: subset.to_vec(),
        flipped: is_flip(&logits[0], &logits[1], target_class),
        logits_before: logits[0].clone(),
        logits_after: logits[1].clone(),
        target_class,
    })
}

/// JSON written next to the original/counterfactual PNG pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualSidecar {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub header: Option<ArtifactHeader>,
    pub target_class: usize,
    pub original: String,
    pub counterfactual: String,
    pub logits_before: Logits,
    pub logits_after: Logits,
    pub prob_before: f64,
    pub prob_after: f64,
    pub flipped: bool,
    pub applied: Vec<Attribute>,
}

impl CounterfactualResult {
    pub fn sidecar(&self, original: &str, counterfactual: &str) -> CounterfactualSidecar {
        let y = self.target_class;
        CounterfactualSidecar {
            header: None,
            target_class: y,
            original: original.into(),
            counterfactual: counterfactual.into(),
            logits_before: self.logits_before.clone(),
            logits_after: self.logits_after.clone(),
            prob_before: softmax(&self.logits_before)[y],
            prob_after: softmax(&self.logits_after)[y],
            flipped: self.flipped,
            applied: self.applied.clone(),
        }
    }

    /// Writes `<stem>_original.png`, `<stem>_counterfactual.png` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str, header: Option<ArtifactHeader>) -> Result<CounterfactualSidecar> {
        let orig = format!("{stem}_original.png");
        let cf = format!("{stem}_counterfactual.png");
        self.original_image.save_png(&dir.join(&orig))?;
        self.modified_image.save_png(&dir.join(&cf))?;
        let mut side = self.sidecar(&orig, &cf);
        side.header = header;
        write_json_atomic(&dir.join(format!("{stem}.json")), &side)?;
        Ok(side)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attfind::StopReason;
    use crate::style::{Direction, StyleCoordinateId, StyleLayout};
    use crate::worlds::{make_linear_world, OracleWorld};

    fn world(w1: Vec<f64>, b: f64) -> OracleWorld {
        let k = w1.len();
        make_linear_world(StyleLayout::new(vec![k]).unwrap(), vec![vec![0.0; k], w1], vec![0.0, b]).unwrap()
    }

    fn stats(k: usize) -> StyleStats {
        StyleStats::new(vec![0.0; k], vec![1.0; k], 1).unwrap()
    }

    fn attrs(k: usize, dirs: &[(usize, Direction)]) -> AttributeSet {
        AttributeSet {
            header: None,
            target_class: 1,
            selector: "attfind".into(),
            m: dirs.len(),
            t: 1.0,
            alpha: 1.0,
            stats_ref: stats(k).digest(),
            num_images: 1,
            stop_reason: StopReason::ReachedM,
            no_effect: false,
            attributes: dirs
                .iter()
                .enumerate()
                .map(|(rank, &(c, d))| Attribute {
                    coord: StyleCoordinateId::new(0, c),
                    direction: d,
                    mean_delta: 1.0,
                    images_explained: 0,
                    rank,
                })
                .collect(),
        }
    }

    fn origin(k: usize) -> StyleVectorSet {
        StyleVectorSet::new(vec![vec![0.0; k]])
    }

    #[test]
    fn independent_ranks_by_delta() {
        let w = world(vec![0.9, 0.2, 1.5], -5.0);
        let a = attrs(3, &[(0, Direction::Positive), (1, Direction::Positive), (2, Direction::Positive)]);
        let top = independent_topk(&w, &origin(3), &a, 2, &stats(3)).unwrap();
        let got: Vec<usize> = top.iter().map(|(a, _)| a.coord.channel).collect();
        assert_eq!(got, vec![2, 0]);
        assert!((top[0].1 - 1.5).abs() < 1e-12);
    }

    #[test]
    fn greedy_stops_at_flip() {
        let w = world(vec![0.4, 0.4, 0.1], -0.7);
        let a = attrs(3, &[(2, Direction::Positive), (0, Direction::Positive), (1, Direction::Positive)]);
        let r = subset_greedy(&w, &origin(3), &a, 10, &stats(3)).unwrap();
        assert!(r.flipped);
        let picked: Vec<usize> = r.applied.iter().map(|a| a.coord.channel).collect();
        assert_eq!(picked, vec![0, 1]);
    }

    #[test]
    fn greedy_never_applies_non_positive_gain() {
        let w = world(vec![-0.4, 0.0], -0.7);
        let a = attrs(2, &[(0, Direction::Positive), (1, Direction::Positive)]);
        let r = subset_greedy(&w, &origin(2), &a, 10, &stats(2)).unwrap();
        assert!(!r.flipped);
        assert!(r.applied.is_empty());
    }

    #[test]
    fn empty_subset_is_the_reconstruction() {
        let w = world(vec![1.0, 1.0], -1.0);
        let img = w.render(&StyleVectorSet::new(vec![vec![0.25, -0.5]]));
        let r = render_counterfactual(&w, &img, &[], 1, &stats(2), 1.0).unwrap();
        assert_eq!(r.modified_image, r.original_image);
        assert!(r.applied.is_empty());
    }

    #[test]
    fn duplicate_coordinates_are_rejected() {
        let w = world(vec![1.0, 1.0], -1.0);
        let a = attrs(2, &[(0, Direction::Positive), (0, Direction::Negative)]);
        assert!(counterfactual_from_styles(&w, &origin(2), &a.attributes, 1, &stats(2), 1.0).is_err());
    }

    #[test]
    fn mismatched_stats_are_rejected() {
        let w = world(vec![1.0, 1.0], -1.0);
        let a = attrs(2, &[(0, Direction::Positive)]);
        let other = StyleStats::new(vec![0.0; 2], vec![2.0; 2], 1).unwrap();
        assert!(subset_greedy(&w, &origin(2), &a, 3, &other).is_err());
    }
}
