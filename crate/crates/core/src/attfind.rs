//! Greedy discovery of the style coordinates that move a class logit.
//!
//! For every image not predicted as `y` and every coordinate/direction pair,
//! the single-coordinate intervention is rendered and its change in the `y`
//! logit recorded. Rounds pick the pair with the largest mean change over the
//! images still unexplained, then drop every image the pick moved by more
//! than `t`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::warn;

use crate::artifact::ArtifactHeader;
use crate::error::{Error, Result};
use crate::model::{argmax, StyleModel};
use crate::style::{apply_intervention, enumerate_coordinates, Direction, StyleCoordinateId, StyleStats, StyleVectorSet};

pub const DEFAULT_M: usize = 10;
pub const DEFAULT_T: f64 = 1.0;
pub const DEFAULT_ALPHA: f64 = 3.0;
pub const DEFAULT_NUM_IMAGES: usize = 256;

/// Upper bound on style sets sent to the model in one call.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    #[serde(flatten)]
    pub coord: StyleCoordinateId,
    pub direction: Direction,
    pub mean_delta: f64,
    pub images_explained: usize,
    pub rank: usize,
}

/// Why discovery stopped before reaching `M` attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ReachedM,
    ImagesExhausted,
    NoPositiveDelta,
    EmptyImageSet,
    /// Ranked by a non-interventional score instead.
    Ranked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSet {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub header: Option<ArtifactHeader>,
    #[serde(rename = "class")]
    pub target_class: usize,
    pub selector: String,
    #[serde(rename = "M")]
    pub m: usize,
    pub t: f64,
    pub alpha: f64,
    pub stats_ref: String,
    pub num_images: usize,
    pub stop_reason: StopReason,
    /// Set when the first round found no classifier-affecting coordinate.
    pub no_effect: bool,
    pub attributes: Vec<Attribute>,
}

impl AttributeSet {
    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    /// The first `k` attributes by rank.
    pub fn top(&self, k: usize) -> AttributeSet {
        AttributeSet {
            attributes: self.attributes.iter().take(k).cloned().collect(),
            ..self.clone()
        }
    }

    /// Selected `(coordinate, direction)` pairs in rank order.
    pub fn pairs(&self) -> Vec<(StyleCoordinateId, Direction)> {
        self.attributes.iter().map(|a| (a.coord, a.direction)).collect()
    }

    /// Content digest that ignores the header.
    pub fn digest(&self) -> Result<String> {
        let body = AttributeSet {
            header: None,
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&body)?;
        Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
    }

    pub fn validate(&self) -> Result<()> {
        if self.attributes.len() > self.m {
            return Err(Error::InvalidArgument(format!(
                "{} attributes exceed M={}",
                self.attributes.len(),
                self.m
            )));
        }
        for (i, a) in self.attributes.iter().enumerate() {
            if a.rank != i {
                return Err(Error::InvalidArgument(format!("attribute ranks are not contiguous at {i}")));
            }
            if self.attributes[..i].iter().any(|b| b.coord == a.coord) {
                return Err(Error::InvalidArgument(format!("duplicate coordinate {:?}", a.coord)));
            }
        }
        Ok(())
    }
}

/// Per-image logit changes for every searched `(coordinate, direction)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaTable {
    /// Searched pairs in (layer, channel, +1 before -1) order.
    pub keys: Vec<(StyleCoordinateId, Direction)>,
    /// `delta[image][key]`.
    pub delta: Vec<Vec<f64>>,
    /// Mean of `delta[.][key]` over the table's images.
    pub mean_delta: Vec<f64>,
}

impl DeltaTable {
    pub fn is_empty(&self) -> bool {
        self.keys.is_empty() || self.delta.is_empty()
    }

    pub fn num_images(&self) -> usize {
        self.delta.len()
    }

    pub fn get(&self, image: usize, coord: StyleCoordinateId, d: Direction) -> Option<f64> {
        let j = self.keys.iter().position(|&k| k == (coord, d))?;
        self.delta.get(image).map(|row| row[j])
    }

    pub fn mean(&self, coord: StyleCoordinateId, d: Direction) -> Option<f64> {
        let j = self.keys.iter().position(|&k| k == (coord, d))?;
        Some(self.mean_delta[j])
    }

    /// Means restricted to the given image rows, summed in row order.
    fn means_over(&self, rows: &[usize]) -> Vec<f64> {
        let mut m = vec![0.0; self.keys.len()];
        for &r in rows {
            for (acc, v) in m.iter_mut().zip(&self.delta[r]) {
                *acc += v;
            }
        }
        let n = rows.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminatorFilter {
    /// Interventions whose realness falls below this are treated as having no effect.
    pub min_realness: f64,
}

fn logits_chunked<M: StyleModel + ?Sized>(model: &M, batch: &[StyleVectorSet]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(batch.len());
    for chunk in batch.chunks(EVAL_CHUNK) {
        out.extend(model.logits_from_styles(chunk)?);
    }
    Ok(out)
}

fn realness_chunked<M: StyleModel + ?Sized>(model: &M, batch: &[StyleVectorSet]) -> Result<Option<Vec<f64>>> {
    let mut out = Vec::with_capacity(batch.len());
    for chunk in batch.chunks(EVAL_CHUNK) {
        match model.realness_from_styles(chunk)? {
            Some(r) => out.extend(r),
            None => return Ok(None),
        }
    }
    Ok(Some(out))
}

/// `C_y` of each image's own styles; errors if any image is already predicted as `y`.
pub fn baseline_logits<M: StyleModel + ?Sized>(model: &M, styles: &[StyleVectorSet], y: usize) -> Result<Vec<f64>> {
    if y >= model.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "class {y} out of range for {} classes",
            model.num_classes()
        )));
    }
    let logits = logits_chunked(model, styles)?;
    logits
        .iter()
        .enumerate()
        .map(|(i, l)| {
            if argmax(l) == y {
                Err(Error::Precondition(format!("image {i} is already predicted as class {y}")))
            } else {
                Ok(l[y])
            }
        })
        .collect()
}

/// Single-intervention logit changes `C_y(x~) - C_y(x)` for every non-excluded pair.
pub fn compute_deltas<M: StyleModel + ?Sized>(
    model: &M,
    styles: &[StyleVectorSet],
    y: usize,
    excluded: &[StyleCoordinateId],
    stats: &StyleStats,
    alpha: f64,
) -> Result<DeltaTable> {
    compute_deltas_filtered(model, styles, y, excluded, stats, alpha, None)
}

pub fn compute_deltas_filtered<M: StyleModel + ?Sized>(
    model: &M,
    styles: &[StyleVectorSet],
    y: usize,
    excluded: &[StyleCoordinateId],
    stats: &StyleStats,
    alpha: f64,
    filter: Option<DiscriminatorFilter>,
) -> Result<DeltaTable> {
    let layout = model.layout();
    let keys: Vec<(StyleCoordinateId, Direction)> = enumerate_coordinates(layout)
        .into_iter()
        .filter(|c| !excluded.contains(c))
        .flat_map(|c| Direction::BOTH.map(|d| (c, d)))
        .collect();
    if styles.is_empty() || keys.is_empty() {
        return Ok(DeltaTable {
            keys: Vec::new(),
            delta: Vec::new(),
            mean_delta: Vec::new(),
        });
    }
    let base = baseline_logits(model, styles, y)?;
    let mut delta = Vec::with_capacity(styles.len());
    for (s, b) in styles.iter().zip(&base) {
        let mut batch = Vec::with_capacity(keys.len());
        for &(c, d) in &keys {
            let mut v = s.clone();
            apply_intervention(&mut v, layout, c, d, stats, alpha)?;
            batch.push(v);
        }
        let logits = logits_chunked(model, &batch)?;
        let mut row: Vec<f64> = logits.iter().map(|l| l[y] - b).collect();
        if let Some(f) = filter {
            if let Some(real) = realness_chunked(model, &batch)? {
                for (v, r) in row.iter_mut().zip(real) {
                    if r < f.min_realness {
                        *v = 0.0;
                    }
                }
            }
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("intervention logits".into()));
        }
        delta.push(row);
    }
    let rows: Vec<usize> = (0..delta.len()).collect();
    let mut table = DeltaTable {
        keys,
        delta,
        mean_delta: Vec::new(),
    };
    table.mean_delta = table.means_over(&rows);
    Ok(table)
}

/// Zeroes both directions of every coordinate whose two mean deltas are both positive.
pub fn discard_inconsistent(mut table: DeltaTable) -> DeltaTable {
    discard_inconsistent_means(&table.keys, &mut table.mean_delta);
    table
}

fn discard_inconsistent_means(keys: &[(StyleCoordinateId, Direction)], means: &mut [f64]) {
    for i in 0..keys.len() {
        if keys[i].1 != Direction::Positive {
            continue;
        }
        if let Some(j) = keys.iter().position(|&k| k == (keys[i].0, Direction::Negative)) {
            if means[i] > 0.0 && means[j] > 0.0 {
                means[i] = 0.0;
                means[j] = 0.0;
            }
        }
    }
}

/// Index of the largest strictly positive entry; the first wins ties.
fn argmax_positive(means: &[f64], allowed: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &m) in means.iter().enumerate() {
        if !allowed[i] || !(m > 0.0) {
            continue;
        }
        if best.is_none_or(|b| m > means[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttFindConfig {
    pub m: usize,
    pub t: f64,
    pub alpha: f64,
    pub discriminator_filter: Option<DiscriminatorFilter>,
}

impl Default for AttFindConfig {
    fn default() -> Self {
        Self {
            m: DEFAULT_M,
            t: DEFAULT_T,
            alpha: DEFAULT_ALPHA,
            discriminator_filter: None,
        }
    }
}

impl AttFindConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::InvalidArgument("M must be >= 1".into()));
        }
        if !(self.t > 0.0) || !self.t.is_finite() {
            return Err(Error::InvalidArgument(format!("t must be positive, got {}", self.t)));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Discovers up to `M` attributes for class `y` from the given style vectors.
///
/// Per-image deltas do not depend on which images remain, so the table is
/// computed once and each round re-averages it over the remaining rows.
pub fn att_find<M: StyleModel + ?Sized>(
    model: &M,
    styles: &[StyleVectorSet],
    y: usize,
    stats: &StyleStats,
    config: &AttFindConfig,
) -> Result<AttributeSet> {
    config.validate()?;
    let mut set = AttributeSet {
        header: None,
        target_class: y,
        selector: "attfind".into(),
        m: config.m,
        t: config.t,
        alpha: config.alpha,
        stats_ref: stats.digest(),
        num_images: styles.len(),
        stop_reason: StopReason::EmptyImageSet,
        no_effect: false,
        attributes: Vec::new(),
    };
    if styles.is_empty() {
        warn!(class = y, "attribute search over an empty image set");
        return Ok(set);
    }
    let table = compute_deltas_filtered(model, styles, y, &[], stats, config.alpha, config.discriminator_filter)?;
    let mut remaining: Vec<usize> = (0..styles.len()).collect();
    let mut allowed = vec![true; table.keys.len()];
    loop {
        if set.attributes.len() >= config.m {
            set.stop_reason = StopReason::ReachedM;
            break;
        }
        if remaining.is_empty() {
            set.stop_reason = StopReason::ImagesExhausted;
            break;
        }
        let mut means = table.means_over(&remaining);
        for (m, a) in means.iter_mut().zip(&allowed) {
            if !a {
                *m = 0.0;
            }
        }
        discard_inconsistent_means(&table.keys, &mut means);
        let Some(best) = argmax_positive(&means, &allowed) else {
            set.stop_reason = StopReason::NoPositiveDelta;
            set.no_effect = set.attributes.is_empty();
            if set.no_effect {
                warn!(class = y, "no classifier-affecting coordinates found");
            }
            break;
        };
        let (coord, direction) = table.keys[best];
        let before = remaining.len();
        remaining.retain(|&r| !(table.delta[r][best] > config.t));
        for (i, k) in table.keys.iter().enumerate() {
            if k.0 == coord {
                allowed[i] = false;
            }
        }
        set.attributes.push(Attribute {
            coord,
            direction,
            mean_delta: means[best],
            images_explained: before - remaining.len(),
            rank: set.attributes.len(),
        });
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::style::StyleLayout;
    use crate::worlds::{make_linear_world, make_quadratic_world};

    fn linear3() -> crate::worlds::OracleWorld {
        make_linear_world(
            StyleLayout::new(vec![3]).unwrap(),
            vec![vec![0.0; 3], vec![2.0, -1.0, 0.5]],
            vec![0.0, 0.0],
        )
        .unwrap()
    }

    fn unit_stats(k: usize) -> StyleStats {
        StyleStats::new(vec![0.0; k], vec![1.0; k], 1).unwrap()
    }

    fn zeros(n: usize, k: usize) -> Vec<StyleVectorSet> {
        vec![StyleVectorSet::new(vec![vec![0.0; k]]); n]
    }

    #[test]
    fn linear_world_mean_deltas_are_the_weights() {
        let t = compute_deltas(&linear3(), &zeros(4, 3), 1, &[], &unit_stats(3), 1.0).unwrap();
        let expect = [2.0, -2.0, -1.0, 1.0, 0.5, -0.5];
        assert_eq!(t.mean_delta, expect);
        assert_eq!(discard_inconsistent(t.clone()), t);
    }

    #[test]
    fn excluding_everything_gives_empty_table() {
        let all = enumerate_coordinates(StyleModel::layout(&linear3()));
        let t = compute_deltas(&linear3(), &zeros(2, 3), 1, &all, &unit_stats(3), 1.0).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn image_predicted_as_target_is_rejected() {
        let s = vec![StyleVectorSet::new(vec![vec![1.0, 0.0, 0.0]])];
        assert!(compute_deltas(&linear3(), &s, 1, &[], &unit_stats(3), 1.0).is_err());
    }

    #[test]
    fn low_threshold_explains_everything_in_one_pick() {
        let cfg = AttFindConfig {
            m: 3,
            t: 1.0,
            alpha: 1.0,
            discriminator_filter: None,
        };
        let set = att_find(&linear3(), &zeros(5, 3), 1, &unit_stats(3), &cfg).unwrap();
        assert_eq!(set.pairs(), vec![(StyleCoordinateId::new(0, 0), Direction::Positive)]);
        assert_eq!(set.attributes[0].images_explained, 5);
        assert_eq!(set.stop_reason, StopReason::ImagesExhausted);
    }

    #[test]
    fn high_threshold_keeps_all_images() {
        let cfg = AttFindConfig {
            m: 3,
            t: 3.0,
            alpha: 1.0,
            discriminator_filter: None,
        };
        let set = att_find(&linear3(), &zeros(5, 3), 1, &unit_stats(3), &cfg).unwrap();
        let c = StyleCoordinateId::new;
        assert_eq!(
            set.pairs(),
            vec![
                (c(0, 0), Direction::Positive),
                (c(0, 1), Direction::Negative),
                (c(0, 2), Direction::Positive)
            ]
        );
        set.validate().unwrap();
    }

    #[test]
    fn symmetric_quadratic_is_discarded() {
        let w = make_quadratic_world(StyleLayout::new(vec![3]).unwrap(), 1, vec![0.0; 3]).unwrap();
        let t = compute_deltas(&w, &zeros(3, 3), 1, &[], &unit_stats(3), 1.0).unwrap();
        let c = StyleCoordinateId::new(0, 1);
        assert_eq!(t.mean(c, Direction::Positive), Some(1.0));
        let t = discard_inconsistent(t);
        assert_eq!(t.mean(c, Direction::Positive), Some(0.0));
        assert_eq!(t.mean(c, Direction::Negative), Some(0.0));
    }

    #[test]
    fn constant_classifier_gives_empty_flagged_set() {
        let w = make_linear_world(StyleLayout::new(vec![2]).unwrap(), vec![vec![0.0; 2]; 2], vec![1.0, 0.0]).unwrap();
        let set = att_find(&w, &zeros(3, 2), 1, &unit_stats(2), &AttFindConfig::default()).unwrap();
        assert!(set.is_empty());
        assert!(set.no_effect);
    }

    #[test]
    fn json_uses_flat_attribute_fields() {
        let cfg = AttFindConfig {
            m: 1,
            t: 3.0,
            alpha: 1.0,
            discriminator_filter: None,
        };
        let set = att_find(&linear3(), &zeros(1, 3), 1, &unit_stats(3), &cfg).unwrap();
        let v = serde_json::to_value(&set).unwrap();
        assert_eq!(v["class"], 1);
        assert_eq!(v["attributes"][0]["layer"], 0);
        assert_eq!(v["attributes"][0]["channel"], 0);
        assert_eq!(v["attributes"][0]["direction"], 1);
        let back: AttributeSet = serde_json::from_value(v).unwrap();
        assert_eq!(back, set);
    }
}
