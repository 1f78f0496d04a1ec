//! StyleSpace addressing and the single-coordinate intervention primitive.
//!
//! A generator with `n` style layers exposes one style vector per layer. The
//! concatenation of all of them is the flattened StyleSpace of dimension `K`;
//! every scalar in it is addressed by a [`StyleCoordinateId`].

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Per-layer channel counts of a style-based generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleLayout {
    layer_channels: Vec<usize>,
    offsets: Vec<usize>,
}

impl StyleLayout {
    pub fn new(layer_channels: Vec<usize>) -> Result<Self> {
        if layer_channels.is_empty() {
            return Err(Error::InvalidSpec("layout declares no style layers".into()));
        }
        if let Some(l) = layer_channels.iter().position(|&c| c == 0) {
            return Err(Error::InvalidSpec(format!("style layer {l} has zero channels")));
        }
        let mut offsets = Vec::with_capacity(layer_channels.len());
        let mut acc = 0;
        for &c in &layer_channels {
            offsets.push(acc);
            acc += c;
        }
        Ok(Self {
            layer_channels,
            offsets,
        })
    }

    pub fn layer_channels(&self) -> &[usize] {
        &self.layer_channels
    }

    pub fn num_layers(&self) -> usize {
        self.layer_channels.len()
    }

    /// Flattened style dimension `K`.
    pub fn k(&self) -> usize {
        self.offsets.last().unwrap() + self.layer_channels.last().unwrap()
    }

    pub fn contains(&self, coord: StyleCoordinateId) -> bool {
        coord.layer < self.layer_channels.len() && coord.channel < self.layer_channels[coord.layer]
    }

    pub fn flat_index(&self, coord: StyleCoordinateId) -> Result<usize> {
        if !self.contains(coord) {
            return Err(Error::InvalidCoordinate {
                layer: coord.layer,
                channel: coord.channel,
            });
        }
        Ok(self.offsets[coord.layer] + coord.channel)
    }

    pub fn coordinate(&self, flat: usize) -> Result<StyleCoordinateId> {
        if flat >= self.k() {
            return Err(Error::InvalidArgument(format!(
                "flat index {flat} out of range for K={}",
                self.k()
            )));
        }
        let layer = self.offsets.partition_point(|&o| o <= flat) - 1;
        Ok(StyleCoordinateId::new(layer, flat - self.offsets[layer]))
    }
}

/// One scalar channel of one style layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StyleCoordinateId {
    pub layer: usize,
    pub channel: usize,
}

impl StyleCoordinateId {
    pub const fn new(layer: usize, channel: usize) -> Self {
        Self { layer, channel }
    }
}

impl fmt::Display for StyleCoordinateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.layer, self.channel)
    }
}

/// All coordinates of `layout` in (layer, channel) lexicographic order.
pub fn enumerate_coordinates(layout: &StyleLayout) -> Vec<StyleCoordinateId> {
    layout
        .layer_channels()
        .iter()
        .enumerate()
        .flat_map(|(l, &c)| (0..c).map(move |ch| StyleCoordinateId::new(l, ch)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    Positive,
    Negative,
}

impl Direction {
    /// Search order used for tie-breaking: `+1` before `-1`.
    pub const BOTH: [Direction; 2] = [Direction::Positive, Direction::Negative];

    pub fn sign(self) -> f64 {
        match self {
            Direction::Positive => 1.0,
            Direction::Negative => -1.0,
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Direction::Positive => 1,
            Direction::Negative => -1,
        }
    }

    pub fn from_i8(v: i8) -> Result<Self> {
        match v {
            1 => Ok(Direction::Positive),
            -1 => Ok(Direction::Negative),
            other => Err(Error::InvalidArgument(format!("direction must be +1 or -1, got {other}"))),
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            Direction::Positive => Direction::Negative,
            Direction::Negative => Direction::Positive,
        }
    }
}

impl Serialize for Direction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_i8(self.as_i8())
    }
}

impl<'de> Deserialize<'de> for Direction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = i8::deserialize(d)?;
        Direction::from_i8(v).map_err(serde::de::Error::custom)
    }
}

/// The per-layer style vectors of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleVectorSet {
    layers: Vec<Vec<f64>>,
}

impl StyleVectorSet {
    pub fn new(layers: Vec<Vec<f64>>) -> Self {
        Self { layers }
    }

    pub fn zeros(layout: &StyleLayout) -> Self {
        Self::new(layout.layer_channels().iter().map(|&c| vec![0.0; c]).collect())
    }

    pub fn from_flat(layout: &StyleLayout, flat: &[f64]) -> Result<Self> {
        if flat.len() != layout.k() {
            return Err(Error::ShapeMismatch(format!(
                "flat style vector has length {}, layout K={}",
                flat.len(),
                layout.k()
            )));
        }
        let mut layers = Vec::with_capacity(layout.num_layers());
        let mut rest = flat;
        for &c in layout.layer_channels() {
            let (head, tail) = rest.split_at(c);
            layers.push(head.to_vec());
            rest = tail;
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flatten().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn matches(&self, layout: &StyleLayout) -> bool {
        self.layers.len() == layout.num_layers()
            && self
                .layers
                .iter()
                .zip(layout.layer_channels())
                .all(|(v, &c)| v.len() == c)
    }

    pub fn check(&self, layout: &StyleLayout) -> Result<()> {
        if self.matches(layout) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "style vector shape {:?} does not match layout {:?}",
                self.layers.iter().map(Vec::len).collect::<Vec<_>>(),
                layout.layer_channels()
            )))
        }
    }

    pub fn get(&self, coord: StyleCoordinateId) -> Option<f64> {
        self.layers.get(coord.layer)?.get(coord.channel).copied()
    }

    pub(crate) fn set(&mut self, coord: StyleCoordinateId, value: f64) {
        self.layers[coord.layer][coord.channel] = value;
    }
}

/// Per-coordinate population statistics over a set of style vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleStats {
    pub k: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub sample_count: usize,
}

impl StyleStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>, sample_count: usize) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::ShapeMismatch(format!(
                "mean has {} entries, std has {}",
                mean.len(),
                std.len()
            )));
        }
        if std.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::InvalidArgument("std must be non-negative and finite".into()));
        }
        Ok(Self {
            k: mean.len(),
            mean,
            std,
            sample_count,
        })
    }

    /// Short content hash used to tie attribute sets to the stats they were found with.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.k as u64).to_le_bytes());
        h.update((self.sample_count as u64).to_le_bytes());
        for v in self.mean.iter().chain(&self.std) {
            h.update(v.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }

    /// The set-to value for `coord` moved in direction `d`.
    pub fn target_value(&self, flat: usize, d: Direction, alpha: f64) -> f64 {
        self.mean[flat] + d.sign() * alpha * self.std[flat]
    }

    pub fn is_zero_variance(&self, flat: usize) -> bool {
        self.std[flat] == 0.0
    }
}

/// Population mean and standard deviation of every coordinate.
pub fn compute_style_stats(samples: &[StyleVectorSet]) -> Result<StyleStats> {
    if samples.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let shape: Vec<usize> = samples[0].layers().iter().map(Vec::len).collect();
    let k: usize = shape.iter().sum();
    let mut sum = vec![0.0; k];
    for (i, s) in samples.iter().enumerate() {
        if s.layers().iter().map(Vec::len).ne(shape.iter().copied()) {
            return Err(Error::ShapeMismatch(format!("sample {i} differs in shape from sample 0")));
        }
        for (acc, v) in sum.iter_mut().zip(s.layers().iter().flatten()) {
            *acc += v;
        }
    }
    let n = samples.len() as f64;
    let mean: Vec<f64> = sum.into_iter().map(|s| s / n).collect();
    let mut var = vec![0.0; k];
    for s in samples {
        for ((acc, v), m) in var.iter_mut().zip(s.layers().iter().flatten()).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
    StyleStats::new(mean, std, samples.len())
}

/// Result of a single-coordinate intervention.
#[derive(Debug, Clone, PartialEq)]
pub struct Intervened {
    pub styles: StyleVectorSet,
    /// The coordinate has zero population spread, so it was set to its mean.
    pub zero_variance: bool,
}

/// Returns a copy of `styles` with only `coord` set to `mean + d * alpha * std`.
pub fn intervene(
    styles: &StyleVectorSet,
    layout: &StyleLayout,
    coord: StyleCoordinateId,
    d: Direction,
    stats: &StyleStats,
    alpha: f64,
) -> Result<Intervened> {
    let mut out = styles.clone();
    let zero_variance = apply_intervention(&mut out, layout, coord, d, stats, alpha)?;
    Ok(Intervened {
        styles: out,
        zero_variance,
    })
}

/// In-place form of [`intervene`]; returns the zero-variance flag.
pub fn apply_intervention(
    styles: &mut StyleVectorSet,
    layout: &StyleLayout,
    coord: StyleCoordinateId,
    d: Direction,
    stats: &StyleStats,
    alpha: f64,
) -> Result<bool> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    styles.check(layout)?;
    if stats.k != layout.k() {
        return Err(Error::ShapeMismatch(format!(
            "stats K={} but layout K={}",
            stats.k,
            layout.k()
        )));
    }
    let flat = layout.flat_index(coord)?;
    styles.set(coord, stats.target_value(flat, d, alpha));
    Ok(stats.is_zero_variance(flat))
}
