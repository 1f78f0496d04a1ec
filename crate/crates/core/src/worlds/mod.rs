//! Synthetic substrates with known ground truth.
//!
//! [`OracleWorld`] is an analytic classifier over style vectors with a trivial
//! renderer, used to check discovery exactly. [`shapes`] procedurally renders
//! labelled images for end-to-end training runs.

pub mod dataset;
pub mod shapes;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{Logits, StyleModel};
use crate::style::{Direction, StyleCoordinateId, StyleLayout, StyleStats, StyleVectorSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WorldForm {
    Linear,
    /// `logit_y` has a `(s_q - vertex)^2` term on flat coordinate `coord`.
    Quadratic { coord: usize, vertex: f64 },
    /// The classifier reads only `causal`; the data correlates `correlated` with the label.
    Confounded {
        causal: usize,
        correlated: usize,
        strength: f64,
    },
}

/// A coordinate that actually drives a class logit. `sign` is `None` for symmetric terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CausalCoordinate {
    pub class: usize,
    pub coord: StyleCoordinateId,
    pub sign: Option<Direction>,
}

/// `logit_c(s) = bias_c + sum_k linear[c][k] s_k + sum_k curvature[c][k] (s_k - vertex_k)^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleWorld {
    layout: StyleLayout,
    form: WorldForm,
    linear: Vec<Vec<f64>>,
    curvature: Vec<Vec<f64>>,
    bias: Vec<f64>,
    center: Vec<f64>,
    vertex: Vec<f64>,
    spread: Vec<f64>,
}

fn check_rows(rows: &[Vec<f64>], k: usize, what: &str) -> Result<()> {
    if let Some(r) = rows.iter().find(|r| r.len() != k) {
        return Err(Error::ShapeMismatch(format!("{what} row has length {}, K is {k}", r.len())));
    }
    Ok(())
}

impl OracleWorld {
    fn build(
        layout: StyleLayout,
        form: WorldForm,
        linear: Vec<Vec<f64>>,
        curvature: Vec<Vec<f64>>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let k = layout.k();
        if linear.is_empty() {
            return Err(Error::InvalidArgument("a world needs at least one class".into()));
        }
        check_rows(&linear, k, "weight")?;
        check_rows(&curvature, k, "curvature")?;
        if bias.len() != linear.len() || curvature.len() != linear.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} weight rows, {} curvature rows, {} biases",
                linear.len(),
                curvature.len(),
                bias.len()
            )));
        }
        Ok(Self {
            layout,
            form,
            linear,
            curvature,
            bias,
            center: vec![0.0; k],
            vertex: vec![0.0; k],
            spread: vec![1.0; k],
        })
    }

    pub fn form(&self) -> &WorldForm {
        &self.form
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.linear
    }

    pub fn curvature(&self) -> &[Vec<f64>] {
        &self.curvature
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Per-coordinate centre of the data distribution.
    pub fn center(&self) -> &[f64] {
        &self.center
    }

    /// Moves the distribution centre and quadratic vertex of coordinate `flat`.
    pub fn with_center(mut self, flat: usize, value: f64) -> Result<Self> {
        if flat >= self.layout.k() {
            return Err(Error::InvalidArgument(format!("coordinate {flat} out of range")));
        }
        self.center[flat] = value;
        self.vertex[flat] = value;
        if let WorldForm::Quadratic { coord, vertex } = &mut self.form {
            if *coord == flat {
                *vertex = value;
            }
        }
        Ok(self)
    }

    /// Shifts the data centre of coordinate `flat` without moving any quadratic vertex.
    pub fn with_baseline(mut self, flat: usize, value: f64) -> Result<Self> {
        if flat >= self.layout.k() {
            return Err(Error::InvalidArgument(format!("coordinate {flat} out of range")));
        }
        self.center[flat] = value;
        Ok(self)
    }

    /// Sets the constant term of class `class`.
    pub fn with_bias(mut self, class: usize, value: f64) -> Result<Self> {
        if class >= self.bias.len() {
            return Err(Error::InvalidArgument(format!("class {class} out of range")));
        }
        self.bias[class] = value;
        Ok(self)
    }

    pub fn logits_flat(&self, s: &[f64]) -> Logits {
        self.linear
            .iter()
            .zip(&self.curvature)
            .zip(&self.bias)
            .map(|((w, q), b)| {
                let mut acc = *b;
                for (i, &x) in s.iter().enumerate() {
                    acc += w[i] * x;
                    if q[i] != 0.0 {
                        let d = x - self.vertex[i];
                        acc += q[i] * d * d;
                    }
                }
                acc
            })
            .collect()
    }

    pub fn ground_truth(&self) -> Vec<CausalCoordinate> {
        let mut out = Vec::new();
        for c in 0..self.linear.len() {
            for flat in 0..self.layout.k() {
                let coord = self.layout.coordinate(flat).expect("in range");
                let w = self.linear[c][flat];
                if self.curvature[c][flat] != 0.0 {
                    out.push(CausalCoordinate { class: c, coord, sign: None });
                } else if w != 0.0 {
                    let sign = if w > 0.0 { Direction::Positive } else { Direction::Negative };
                    out.push(CausalCoordinate {
                        class: c,
                        coord,
                        sign: Some(sign),
                    });
                }
            }
        }
        out
    }

    /// Population statistics of the declared data distribution.
    pub fn declared_stats(&self) -> StyleStats {
        let mut std = self.spread.clone();
        if let WorldForm::Confounded {
            causal,
            correlated,
            strength,
        } = self.form
        {
            std[causal] = (CAUSAL_SHIFT * CAUSAL_SHIFT + CAUSAL_NOISE * CAUSAL_NOISE).sqrt();
            let m = strength * CORRELATED_SHIFT;
            std[correlated] = (m * m + CORRELATED_NOISE * CORRELATED_NOISE).sqrt();
        }
        StyleStats::new(self.center.clone(), std, usize::MAX).expect("declared stats are valid")
    }

    /// Draws `n` style vectors with their data labels.
    ///
    /// Confounded worlds draw a balanced label first and shift both the causal
    /// and the correlated coordinate towards it; other forms draw every
    /// coordinate independently from `N(center, spread)` and label by argmax.
    pub fn sample(&self, n: usize, seed: u64) -> (Vec<StyleVectorSet>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.layout.k();
        let mut styles = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let mut s: Vec<f64> = (0..k)
                .map(|i| self.center[i] + self.spread[i] * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let label = if let WorldForm::Confounded {
                causal,
                correlated,
                strength,
            } = self.form
            {
                let label = rng.random_range(0..2usize);
                let sign = if label == 1 { 1.0 } else { -1.0 };
                s[causal] = self.center[causal]
                    + sign * CAUSAL_SHIFT
                    + CAUSAL_NOISE * rng.sample::<f64, _>(StandardNormal);
                s[correlated] = self.center[correlated]
                    + sign * strength * CORRELATED_SHIFT
                    + CORRELATED_NOISE * rng.sample::<f64, _>(StandardNormal);
                label
            } else {
                crate::model::argmax(&self.logits_flat(&s))
            };
            styles.push(StyleVectorSet::from_flat(&self.layout, &s).expect("length is K"));
            labels.push(label);
        }
        (styles, labels)
    }
}

const CAUSAL_SHIFT: f64 = 1.0;
const CAUSAL_NOISE: f64 = 0.5;
const CORRELATED_SHIFT: f64 = 1.5;
const CORRELATED_NOISE: f64 = 0.5;

/// `logits = W s + b` with one weight row per class.
pub fn make_linear_world(layout: StyleLayout, weights: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<OracleWorld> {
    let zeros = vec![vec![0.0; layout.k()]; weights.len()];
    OracleWorld::build(layout, WorldForm::Linear, weights, zeros, bias)
}

/// Two classes; `logit_1 = s_q^2 + sum_k linear_k s_k` with `linear_q` ignored, `logit_0 = 0`.
pub fn make_quadratic_world(layout: StyleLayout, q: usize, mut linear: Vec<f64>) -> Result<OracleWorld> {
    let k = layout.k();
    if q >= k {
        return Err(Error::InvalidArgument(format!("quadratic coordinate {q} out of range for K={k}")));
    }
    if linear.len() != k {
        return Err(Error::ShapeMismatch(format!("linear weights have length {}, K is {k}", linear.len())));
    }
    linear[q] = 0.0;
    let mut curv = vec![vec![0.0; k]; 2];
    curv[1][q] = 1.0;
    OracleWorld::build(
        layout,
        WorldForm::Quadratic { coord: q, vertex: 0.0 },
        vec![vec![0.0; k], linear],
        curv,
        vec![0.0, 0.0],
    )
}

/// Two classes; `logit_1 = 2 s_causal`, `logit_0 = 0`. The data correlates
/// `correlated` with the label with the given strength.
pub fn make_confounded_world(
    layout: StyleLayout,
    causal: usize,
    correlated: usize,
    strength: f64,
) -> Result<OracleWorld> {
    let k = layout.k();
    if causal == correlated {
        return Err(Error::InvalidArgument("causal and correlated coordinates must differ".into()));
    }
    if causal >= k || correlated >= k {
        return Err(Error::InvalidArgument(format!("coordinate out of range for K={k}")));
    }
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::InvalidArgument(format!("confound strength {strength} not in [0, 1]")));
    }
    let mut w1 = vec![0.0; k];
    w1[causal] = 2.0;
    OracleWorld::build(
        layout,
        WorldForm::Confounded {
            causal,
            correlated,
            strength,
        },
        vec![vec![0.0; k], w1],
        vec![vec![0.0; k]; 2],
        vec![0.0, 0.0],
    )
}

impl OracleWorld {
    /// Renders a style vector as a `1 x 1 x K` image of its raw values.
    pub fn render(&self, s: &StyleVectorSet) -> Image {
        let flat: Vec<f32> = s.flatten().into_iter().map(|v| v as f32).collect();
        Image::new(1, 1, flat.len(), flat).expect("sized by K")
    }

    fn invert(&self, im: &Image) -> Result<StyleVectorSet> {
        if im.shape() != (1, 1, self.layout.k()) {
            return Err(Error::ShapeMismatch(format!(
                "oracle image {:?}, expected (1, 1, {})",
                im.shape(),
                self.layout.k()
            )));
        }
        let flat: Vec<f64> = im.data.iter().map(|&v| v as f64).collect();
        StyleVectorSet::from_flat(&self.layout, &flat)
    }
}

impl StyleModel for OracleWorld {
    fn layout(&self) -> &StyleLayout {
        &self.layout
    }

    fn num_classes(&self) -> usize {
        self.linear.len()
    }

    fn logits_from_styles(&self, batch: &[StyleVectorSet]) -> Result<Vec<Logits>> {
        batch
            .iter()
            .map(|s| {
                s.check(&self.layout)?;
                Ok(self.logits_flat(&s.flatten()))
            })
            .collect()
    }

    fn render_styles(&self, batch: &[StyleVectorSet]) -> Result<Vec<Image>> {
        batch
            .iter()
            .map(|s| {
                s.check(&self.layout)?;
                Ok(self.render(s))
            })
            .collect()
    }

    fn capture_styles(&self, images: &[Image]) -> Result<Vec<StyleVectorSet>> {
        images.iter().map(|im| self.invert(im)).collect()
    }

    fn classify_images(&self, images: &[Image]) -> Result<Vec<Logits>> {
        let styles = self.capture_styles(images)?;
        self.logits_from_styles(&styles)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(k: usize) -> StyleLayout {
        StyleLayout::new(vec![k]).unwrap()
    }

    #[test]
    fn linear_ground_truth_follows_weights() {
        let w = make_linear_world(single(4), vec![vec![0.0; 4], vec![2.0, -1.0, 0.5, 0.0]], vec![0.0, 0.0]).unwrap();
        let gt: Vec<(usize, i8)> = w
            .ground_truth()
            .iter()
            .filter(|c| c.class == 1)
            .map(|c| (c.coord.channel, c.sign.unwrap().as_i8()))
            .collect();
        assert_eq!(gt, vec![(0, 1), (1, -1), (2, 1)]);
    }

    #[test]
    fn wrong_weight_length_is_rejected() {
        assert!(make_linear_world(single(3), vec![vec![1.0, 2.0]], vec![0.0]).is_err());
        assert!(make_quadratic_world(single(3), 3, vec![0.0; 3]).is_err());
        assert!(make_confounded_world(single(3), 1, 1, 0.5).is_err());
    }

    #[test]
    fn render_capture_round_trip() {
        let w = make_linear_world(single(3), vec![vec![1.0, 0.0, 0.0]], vec![0.0]).unwrap();
        let s = StyleVectorSet::new(vec![vec![0.5, -1.25, 3.0]]);
        let im = w.render(&s);
        assert_eq!(w.capture_styles(&[im]).unwrap()[0], s);
    }

    #[test]
    fn confounded_correlated_coordinate_does_not_move_logits() {
        let w = make_confounded_world(single(4), 0, 1, 0.9).unwrap();
        let a = w.logits_flat(&[0.3, -5.0, 0.0, 0.0]);
        let b = w.logits_flat(&[0.3, 5.0, 0.0, 0.0]);
        assert_eq!(a, b);
    }

    #[test]
    fn shifted_baseline_keeps_vertex() {
        let w = make_quadratic_world(single(2), 0, vec![0.0, 0.0])
            .unwrap()
            .with_baseline(0, 2.0)
            .unwrap();
        assert_eq!(w.logits_flat(&[2.0, 0.0])[1], 4.0);
        assert_eq!(w.declared_stats().mean[0], 2.0);
    }
}
