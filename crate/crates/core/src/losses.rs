//! Adversarial, path-length, reconstruction and classifier losses, and their weighted sum.
//!
//! Every term exists in two forms: a scalar function over plain numbers used
//! for reporting and checks, and a tensor function used inside training.

use candle_core::{Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{images_to_tensor, Image};
use crate::models::networks::{Classifier, Encoder, Generator};
use crate::models::{ConditionVector, ModelBundle};

/// Probability floor applied to the reference distribution of the KL term.
pub const KL_PROB_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_adv: f64,
    pub w_reg: f64,
    pub w_rec_x: f64,
    pub w_lpips: f64,
    pub w_rec_w: f64,
    pub w_cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_adv: 1.0,
            w_reg: 2.0,
            w_rec_x: 1.0,
            w_lpips: 1.0,
            w_rec_w: 1.0,
            w_cls: 1.0,
        }
    }
}

impl LossWeights {
    pub fn unit() -> Self {
        Self {
            w_adv: 1.0,
            w_reg: 1.0,
            w_rec_x: 1.0,
            w_lpips: 1.0,
            w_rec_w: 1.0,
            w_cls: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.w_adv, self.w_reg, self.w_rec_x, self.w_lpips, self.w_rec_w, self.w_cls];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// One training step's loss values. `total` covers the generator side only.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub adv_g: f64,
    pub adv_d: f64,
    pub reg: f64,
    pub rec_x: f64,
    pub lpips: f64,
    pub rec_w: f64,
    pub cls: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [
            self.adv_g, self.adv_d, self.reg, self.rec_x, self.lpips, self.rec_w, self.cls, self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Non-saturating logistic losses: `(softplus(-d_fake), softplus(-d_real) + softplus(d_fake))`.
pub fn adversarial_losses(d_real: f64, d_fake: f64) -> Result<(f64, f64)> {
    if !d_real.is_finite() || !d_fake.is_finite() {
        return Err(Error::NonFinite("discriminator score".into()));
    }
    Ok((softplus(-d_fake), softplus(-d_real) + softplus(d_fake)))
}

/// `KL[p_generated || p_original]` in nats.
pub fn classifier_kl(generated: &ConditionVector, original: &ConditionVector) -> Result<f64> {
    let (p, q) = (generated.probs(), original.probs());
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch(format!("distributions of length {} and {}", p.len(), q.len())));
    }
    let kl = p
        .iter()
        .zip(q)
        .filter(|(pi, qi)| **pi > 0.0 && pi != qi)
        .map(|(pi, qi)| pi * (pi / qi.max(KL_PROB_FLOOR)).ln())
        .sum::<f64>();
    Ok(kl.max(0.0))
}

/// Weighted sum of the generator-side terms of `report`.
pub fn total_loss(report: &LossReport, weights: &LossWeights) -> Result<f64> {
    let terms = [
        (report.adv_g, weights.w_adv),
        (report.reg, weights.w_reg),
        (report.rec_x, weights.w_rec_x),
        (report.lpips, weights.w_lpips),
        (report.rec_w, weights.w_rec_w),
        (report.cls, weights.w_cls),
    ];
    if terms.iter().any(|(t, w)| !t.is_finite() || !w.is_finite()) {
        return Err(Error::NonFinite("loss term".into()));
    }
    Ok(terms.iter().filter(|(_, w)| *w != 0.0).map(|(t, w)| t * w).sum())
}

/// `(rec_x, lpips, rec_w)` between images and their reconstructions.
pub fn reconstruction_loss(bundle: &ModelBundle, x: &[Image], x_prime: &[Image]) -> Result<(f64, f64, f64)> {
    if x.len() != x_prime.len() || x.iter().zip(x_prime).any(|(a, b)| a.shape() != b.shape()) {
        return Err(Error::ShapeMismatch("x and x' must have the same shape".into()));
    }
    let xt = images_to_tensor(x, bundle.dtype(), bundle.device())?;
    let yt = images_to_tensor(x_prime, bundle.dtype(), bundle.device())?;
    let classifier = bundle.classifier().net();
    let rx = tensor::rec_x(&yt, &xt)?.to_scalar_f64()?;
    let lp = tensor::lpips(classifier, &xt, &yt)?.to_scalar_f64()?;
    let e = bundle.encode(x)?;
    let ep = bundle.encode(x_prime)?;
    let n = (e.len() * e.first().map_or(1, Vec::len)) as f64;
    let rw = e
        .iter()
        .flatten()
        .zip(ep.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n;
    Ok((rx, lp, rw))
}

trait ScalarExt {
    fn to_scalar_f64(&self) -> Result<f64>;
}

impl ScalarExt for Tensor {
    fn to_scalar_f64(&self) -> Result<f64> {
        Ok(self.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
    }
}

/// Differentiable tensor forms of each loss term (batch means).
pub mod tensor {
    use super::*;
    use crate::models::layers::softplus;

    pub fn adv_generator(d_fake: &Tensor) -> Result<Tensor> {
        Ok(softplus(&d_fake.neg()?)?.mean_all()?)
    }

    pub fn adv_discriminator(d_real: &Tensor, d_fake: &Tensor) -> Result<Tensor> {
        Ok((softplus(&d_real.neg()?)?.mean_all()? + softplus(d_fake)?.mean_all()?)?)
    }

    pub fn rec_x(x_prime: &Tensor, x: &Tensor) -> Result<Tensor> {
        Ok((x_prime - x)?.abs()?.mean_all()?)
    }

    /// Mean absolute difference between `E(x')` and the (constant) latents of `x`.
    pub fn rec_w(encoder: &Encoder, x_prime: &Tensor, w: &Tensor) -> Result<Tensor> {
        Ok((encoder.forward(x_prime)? - w)?.abs()?.mean_all()?)
    }

    fn unit_normalize_channels(f: &Tensor) -> Result<Tensor> {
        let norm = (f.sqr()?.sum_keepdim(1)? + 1e-10)?.sqrt()?;
        Ok(f.broadcast_div(&norm)?)
    }

    /// Perceptual distance over the classifier's block outputs: channel-normalised
    /// squared difference, summed over channels, averaged over positions and layers.
    pub fn lpips(classifier: &Classifier, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let fx = classifier.features(x)?;
        let fy = classifier.features(y)?;
        let mut acc: Option<Tensor> = None;
        for (a, b) in fx.iter().zip(&fy) {
            let d = (unit_normalize_channels(a)? - unit_normalize_channels(b)?)?
                .sqr()?
                .sum(1)?
                .mean_all()?;
            acc = Some(match acc {
                None => d,
                Some(s) => (s + d)?,
            });
        }
        Ok((acc.unwrap() / fx.len() as f64)?)
    }

    /// `KL[softmax(generated) || softmax(original)]`, batch mean; `original` is a constant.
    pub fn classifier_kl(generated_logits: &Tensor, original_logits: &Tensor) -> Result<Tensor> {
        let log_p = candle_nn::ops::log_softmax(generated_logits, D::Minus1)?;
        let p = log_p.exp()?;
        let q = candle_nn::ops::softmax_last_dim(&original_logits.detach())?;
        let log_q = q.clamp(KL_PROB_FLOOR, 1.0)?.log()?;
        Ok((p * (log_p - log_q)?)?.sum(D::Minus1)?.mean_all()?)
    }
}

/// Central-difference step in latent space for the path-length Jacobian-vector product.
pub const PATH_FD_STEP: f64 = 1e-2;

/// Path-length penalty over a batch, and the batch mean of the path lengths.
#[derive(Debug, Clone)]
pub struct PathPenalty {
    pub penalty: Tensor,
    pub updated_mean: f64,
    pub lengths: Vec<f64>,
}

/// `J v` for each row, by central differences of the generator in latent space.
pub fn jvp_central_difference(
    generator: &Generator,
    w: &Tensor,
    condition: &Tensor,
    v: &Tensor,
    step: f64,
) -> Result<Tensor> {
    let wp = (w + (v * step)?)?;
    let wm = (w - (v * step)?)?;
    let gp = generator.synthesize(&generator.styles(&wp, condition)?)?;
    let gm = generator.synthesize(&generator.styles(&wm, condition)?)?;
    Ok(((gp - gm)? / (2.0 * step))?)
}

/// Per-sample `||J v|| / sqrt(pixels)`.
pub fn path_lengths(jvp: &Tensor) -> Result<Tensor> {
    let b = jvp.dim(0)?;
    let per = jvp.reshape((b, ()))?;
    let pixels = per.dim(1)? as f64;
    Ok((per.sqr()?.sum(1)? / pixels)?.sqrt()?)
}

/// Decay of the path-length running mean per regularisation step.
pub const PATH_MEAN_DECAY: f64 = 0.01;

/// Squared deviation of path lengths from their running mean.
///
/// The running mean is first moved toward this batch's mean length by
/// `decay`, and the penalty is taken against the updated value.
/// `directions` holds one latent-space direction per row of `w`.
pub fn path_regularization(
    generator: &Generator,
    w: &Tensor,
    condition: &Tensor,
    directions: &Tensor,
    running_mean: f64,
    decay: f64,
) -> Result<PathPenalty> {
    if w.dim(0)? == 0 {
        return Err(Error::InvalidArgument("path regularization needs a non-empty batch".into()));
    }
    let jvp = jvp_central_difference(generator, w, condition, directions, PATH_FD_STEP)?;
    let lengths_t = path_lengths(&jvp)?;
    let lengths: Vec<f64> = lengths_t.to_dtype(candle_core::DType::F64)?.to_vec1()?;
    if lengths.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("path lengths".into()));
    }
    let batch_mean = lengths.iter().sum::<f64>() / lengths.len() as f64;
    let updated_mean = running_mean + decay * (batch_mean - running_mean);
    let penalty = (lengths_t - updated_mean)?.sqr()?.mean_all()?;
    Ok(PathPenalty {
        penalty,
        updated_mean,
        lengths,
    })
}

/// `J v` for a single latent by reverse mode: one backward pass per output pixel.
///
/// Exact up to floating point; only practical for toy resolutions.
pub fn jvp_reverse_mode(generator: &Generator, w: &Tensor, condition: &Tensor, v: &[f64]) -> Result<Vec<f64>> {
    if w.dim(0)? != 1 {
        return Err(Error::InvalidArgument("reverse-mode JVP takes a single latent".into()));
    }
    let wv = Var::from_tensor(w)?;
    let out = generator
        .synthesize(&generator.styles(wv.as_tensor(), condition)?)?
        .flatten_all()?;
    let n = out.dim(0)?;
    let mut jv = Vec::with_capacity(n);
    for j in 0..n {
        let grads = out.get(j)?.backward()?;
        let row: Vec<f64> = grads
            .get(wv.as_tensor())
            .map(|g| g.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1())
            .transpose()?
            .unwrap_or_else(|| vec![0.0; v.len()]);
        jv.push(row.iter().zip(v).map(|(a, b)| a * b).sum());
    }
    Ok(jv)
}
