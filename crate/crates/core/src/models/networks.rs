//! The four networks: conditional generator, encoder, discriminator, classifier.

use candle_core::{Tensor, D};
use rand::Rng;

use super::layers::{
    add_channel_bias, conv1x1, conv3x3, downsample2x, leaky_relu, linear, upsample2x, ParamStore,
};
use super::spec::{ClassifierSpec, ConvStackSpec, GeneratorSpec};
use crate::error::{Error, Result};

/// Style-based generator: `w ⊕ condition` → per-layer affine styles → modulated convs.
#[derive(Debug, Clone)]
pub struct Generator {
    spec: GeneratorSpec,
    constant: Tensor,
    affine_w: Vec<Tensor>,
    affine_b: Vec<Tensor>,
    conv_w: Vec<Tensor>,
    conv_b: Vec<Tensor>,
    rgb_w: Tensor,
    rgb_b: Tensor,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(spec: &GeneratorSpec, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let ch = &spec.layer_channels;
        let n = ch.len();
        let in_dim = spec.affine_input_dim();
        let constant = store.normal("const", &[ch[0], 4, 4], 1.0, rng)?;
        let mut affine_w = Vec::with_capacity(n);
        let mut affine_b = Vec::with_capacity(n);
        let mut conv_w = Vec::with_capacity(n);
        let mut conv_b = Vec::with_capacity(n);
        for i in 0..n {
            let out = if i + 1 < n { ch[i + 1] } else { ch[i] };
            affine_w.push(store.normal(
                &format!("affine{i}.weight"),
                &[ch[i], in_dim],
                1.0 / (in_dim as f64).sqrt(),
                rng,
            )?);
            affine_b.push(store.constant(&format!("affine{i}.bias"), &[ch[i]], 1.0)?);
            conv_w.push(store.normal(&format!("conv{i}.weight"), &[9, out, ch[i]], 1.0, rng)?);
            conv_b.push(store.constant(&format!("conv{i}.bias"), &[out], 0.0)?);
        }
        let last = ch[n - 1];
        let rgb_w = store.normal("to_rgb.weight", &[3, last], 1.0 / (last as f64).sqrt(), rng)?;
        let rgb_b = store.constant("to_rgb.bias", &[3], 0.0)?;
        Ok(Self {
            spec: spec.clone(),
            constant,
            affine_w,
            affine_b,
            conv_w,
            conv_b,
            rgb_w,
            rgb_b,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    /// Same parameters without autograd tracking (shares storage).
    pub fn detached(&self) -> Self {
        let d = |v: &[Tensor]| v.iter().map(Tensor::detach).collect();
        Self {
            spec: self.spec.clone(),
            constant: self.constant.detach(),
            affine_w: d(&self.affine_w),
            affine_b: d(&self.affine_b),
            conv_w: d(&self.conv_w),
            conv_b: d(&self.conv_b),
            rgb_w: self.rgb_w.detach(),
            rgb_b: self.rgb_b.detach(),
        }
    }

    /// Per-layer style vectors `(B, C_i)`, affine in `w ⊕ condition`.
    pub fn styles(&self, w: &Tensor, condition: &Tensor) -> Result<Vec<Tensor>> {
        let (b, lat) = w.dims2()?;
        let (bc, nc) = condition.dims2()?;
        if lat != self.spec.latent_dim || nc != self.spec.num_classes || b != bc {
            return Err(Error::ShapeMismatch(format!(
                "w {:?} / condition {:?} do not match latent_dim {} and num_classes {}",
                w.dims(),
                condition.dims(),
                self.spec.latent_dim,
                self.spec.num_classes
            )));
        }
        let input = Tensor::cat(&[w, condition], 1)?;
        self.affine_w
            .iter()
            .zip(&self.affine_b)
            .map(|(aw, ab)| linear(&input, aw, ab))
            .collect()
    }

    /// Renders `(B, 3, R, R)` images in `[-1, 1]` from per-layer styles.
    pub fn synthesize(&self, styles: &[Tensor]) -> Result<Tensor> {
        let n = self.spec.layer_channels.len();
        if styles.len() != n {
            return Err(Error::ShapeMismatch(format!("expected {n} style layers, got {}", styles.len())));
        }
        let b = styles[0].dim(0)?;
        for (i, s) in styles.iter().enumerate() {
            if s.dims() != [b, self.spec.layer_channels[i]] {
                return Err(Error::ShapeMismatch(format!(
                    "style layer {i} has shape {:?}, expected [{b}, {}]",
                    s.dims(),
                    self.spec.layer_channels[i]
                )));
            }
        }
        let (c0, h0, w0) = self.constant.dims3()?;
        let mut x = self.constant.unsqueeze(0)?.broadcast_as((b, c0, h0, w0))?.contiguous()?;
        for i in 0..n {
            if i > 0 {
                x = upsample2x(&x)?;
            }
            x = modulated_conv(&x, &styles[i], &self.conv_w[i])?;
            x = leaky_relu(&add_channel_bias(&x, &self.conv_b[i])?)?;
        }
        let rgb = add_channel_bias(&conv1x1(&x, &self.rgb_w)?, &self.rgb_b)?;
        Ok(rgb.tanh()?)
    }

    /// Weight tensor of the affine map of style layer `i`; columns `latent_dim..` are the condition block.
    pub fn affine_weight(&self, i: usize) -> &Tensor {
        &self.affine_w[i]
    }
}

/// Input-modulated, output-demodulated 3x3 convolution.
fn modulated_conv(x: &Tensor, style: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (b, c) = style.dims2()?;
    let xm = x.broadcast_mul(&style.reshape((b, c, 1, 1))?)?;
    let y = conv3x3(&xm, weight)?;
    let wsq = weight.sqr()?.sum(0)?; // (out, in)
    let demod = (style.sqr()?.matmul(&wsq.t()?)? + 1e-8)?.sqrt()?.recip()?; // (B, out)
    let o = demod.dim(1)?;
    Ok(y.broadcast_mul(&demod.reshape((b, o, 1, 1))?)?)
}

/// Conv → lrelu → 2x average-pool blocks down to 4x4.
#[derive(Debug, Clone)]
pub struct ConvStack {
    spec: ConvStackSpec,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl ConvStack {
    pub fn new<R: Rng + ?Sized>(
        spec: &ConvStackSpec,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut cin = 3;
        for (i, &c) in spec.channels.iter().enumerate() {
            let std = (2.0 / (9.0 * cin as f64)).sqrt();
            weights.push(store.normal(&format!("{prefix}block{i}.weight"), &[9, c, cin], std, rng)?);
            biases.push(store.constant(&format!("{prefix}block{i}.bias"), &[c], 0.0)?);
            cin = c;
        }
        Ok(Self {
            spec: spec.clone(),
            weights,
            biases,
        })
    }

    fn detached(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            weights: self.weights.iter().map(Tensor::detach).collect(),
            biases: self.biases.iter().map(Tensor::detach).collect(),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let r = self.spec.image_resolution;
        if c != 3 || h != r || w != r {
            return Err(Error::ShapeMismatch(format!(
                "expected (B, 3, {r}, {r}) images, got {:?}",
                x.dims()
            )));
        }
        Ok(())
    }

    /// Output of every block; the last one is at 4x4.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut out = Vec::with_capacity(self.weights.len());
        let mut h = x.clone();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if i > 0 {
                h = downsample2x(&h)?;
            }
            h = leaky_relu(&add_channel_bias(&conv3x3(&h, w)?, b)?)?;
            out.push(h.clone());
        }
        Ok(out)
    }

    pub fn last_channels(&self) -> usize {
        *self.spec.channels.last().unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    stack: ConvStack,
    head_w: Tensor,
    head_b: Tensor,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        spec: &ConvStackSpec,
        latent_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let stack = ConvStack::new(spec, "", store, rng)?;
        let fan_in = stack.last_channels() * 16;
        let head_w = store.normal("head.weight", &[latent_dim, fan_in], 1.0 / (fan_in as f64).sqrt(), rng)?;
        let head_b = store.constant("head.bias", &[latent_dim], 0.0)?;
        Ok(Self { stack, head_w, head_b })
    }

    pub fn detached(&self) -> Self {
        Self {
            stack: self.stack.detached(),
            head_w: self.head_w.detach(),
            head_b: self.head_b.detach(),
        }
    }

    /// Latents rescaled to unit root-mean-square per row, so their scale cannot drift.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.stack.features(x)?.pop().unwrap();
        let w = linear(&h.flatten_from(1)?, &self.head_w, &self.head_b)?;
        let rms = (w.sqr()?.mean_keepdim(1)? + 1e-8)?.sqrt()?;
        Ok(w.broadcast_div(&rms)?)
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    stack: ConvStack,
    head_w: Tensor,
    head_b: Tensor,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(spec: &ConvStackSpec, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let stack = ConvStack::new(spec, "", store, rng)?;
        let fan_in = stack.last_channels() * 16;
        let head_w = store.normal("head.weight", &[1, fan_in], 1.0 / (fan_in as f64).sqrt(), rng)?;
        let head_b = store.constant("head.bias", &[1], 0.0)?;
        Ok(Self { stack, head_w, head_b })
    }

    pub fn detached(&self) -> Self {
        Self {
            stack: self.stack.detached(),
            head_w: self.head_w.detach(),
            head_b: self.head_b.detach(),
        }
    }

    /// Realness scores `(B,)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.stack.features(x)?.pop().unwrap();
        Ok(linear(&h.flatten_from(1)?, &self.head_w, &self.head_b)?.squeeze(1)?)
    }
}

/// Small CNN classifier; its intermediate features double as the perceptual backbone.
#[derive(Debug, Clone)]
pub struct Classifier {
    spec: ClassifierSpec,
    stack: ConvStack,
    head_w: Tensor,
    head_b: Tensor,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(spec: &ClassifierSpec, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let stack = ConvStack::new(&spec.stack(), "", store, rng)?;
        let c = stack.last_channels();
        let head_w = store.normal("head.weight", &[spec.num_classes, c], 1.0 / (c as f64).sqrt(), rng)?;
        let head_b = store.constant("head.bias", &[spec.num_classes], 0.0)?;
        Ok(Self {
            spec: spec.clone(),
            stack,
            head_w,
            head_b,
        })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn detached(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            stack: self.stack.detached(),
            head_w: self.head_w.detach(),
            head_b: self.head_b.detach(),
        }
    }

    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.stack.features(x)
    }

    pub fn logits_from_features(&self, feats: &[Tensor]) -> Result<Tensor> {
        let last = feats.last().ok_or_else(|| Error::InvalidArgument("no features".into()))?;
        let pooled = last.mean(D::Minus1)?.mean(D::Minus1)?;
        linear(&pooled, &self.head_w, &self.head_b)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.logits_from_features(&self.features(x)?)
    }
}
