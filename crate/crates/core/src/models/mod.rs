//! Generator, encoder, discriminator and frozen classifier behind one bundle.

pub mod checkpoint;
pub mod layers;
pub mod networks;
pub mod spec;

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{images_to_tensor, tensor_to_images, Image};
use crate::losses::LossWeights;
use crate::model::{Logits, StyleModel};
use crate::style::{StyleLayout, StyleVectorSet};

use self::checkpoint::{decode_blob, encode_blob, read_file, write_atomic, write_json_atomic, TensorMap};
use self::layers::ParamStore;
use self::networks::{Classifier, Discriminator, Encoder, Generator};
pub use self::spec::{BundleSpec, ClassifierSpec, ConvStackSpec, GeneratorSpec};

/// Batch size used for inference-only passes.
pub const INFER_BATCH: usize = 64;

/// Classifier output used as the generator's conditioning signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionVector(Vec<f64>);

impl ConditionVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidArgument("condition entries must be finite and >= 0".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-5 {
            return Err(Error::InvalidArgument(format!("condition must sum to 1, sums to {s}")));
        }
        Ok(Self(probs))
    }

    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        Self::new(crate::model::softmax(logits))
    }

    pub fn one_hot(num_classes: usize, class: usize) -> Result<Self> {
        if class >= num_classes {
            return Err(Error::InvalidArgument(format!("class {class} >= {num_classes}")));
        }
        let mut v = vec![0.0; num_classes];
        v[class] = 1.0;
        Ok(Self(v))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }
}

fn rows_to_tensor(rows: &[Vec<f64>], width: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut flat = Vec::with_capacity(rows.len() * width);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != width {
            return Err(Error::ShapeMismatch(format!("row {i} has length {}, expected {width}", r.len())));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("input row {i}")));
        }
        flat.extend_from_slice(r);
    }
    Ok(Tensor::from_vec(flat, (rows.len(), width), device)?.to_dtype(dtype)?)
}

fn tensor_to_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2()?)
}

/// A trained classifier whose parameters never change once it is frozen.
#[derive(Debug, Clone)]
pub struct FrozenClassifier {
    spec: ClassifierSpec,
    store: ParamStore,
    net: Classifier,
    pub heldout_accuracy: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierManifest {
    pub format_version: u32,
    pub spec: ClassifierSpec,
    pub heldout_accuracy: Option<f64>,
    pub seed: u64,
    pub parameter_hash: String,
    pub blob: String,
}

impl FrozenClassifier {
    /// Freshly initialised (untrained) classifier; used by training and tests.
    pub fn init(spec: &ClassifierSpec, seed: u64, dtype: DType, device: &Device) -> Result<(Self, Classifier)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(dtype, device);
        let tracked = Classifier::new(spec, &mut store, &mut rng)?;
        let net = tracked.detached();
        Ok((
            Self {
                spec: spec.clone(),
                store,
                net,
                heldout_accuracy: None,
                seed,
            },
            tracked,
        ))
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn net(&self) -> &Classifier {
        &self.net
    }

    pub(crate) fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn parameter_hash(&self) -> Result<String> {
        self.store.hash()
    }

    pub fn logits_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.net.forward(x)
    }

    pub fn classify(&self, images: &[Image]) -> Result<Vec<Logits>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_BATCH) {
            let x = images_to_tensor(chunk, self.store.dtype(), self.store.device())?;
            out.extend(tensor_to_rows(&self.net.forward(&x)?)?);
        }
        Ok(out)
    }

    /// Copy with independent parameter storage, converted to `dtype`.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let (fresh, _) = Self::init(&self.spec, self.seed, dtype, self.store.device())?;
        fresh.store.import("", &self.store.export()?)?;
        Ok(Self {
            heldout_accuracy: self.heldout_accuracy,
            ..fresh
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let blob = "classifier.bin";
        write_atomic(&dir.join(blob), &encode_blob(&self.store.export()?))?;
        let manifest = ClassifierManifest {
            format_version: checkpoint::BLOB_VERSION,
            spec: self.spec.clone(),
            heldout_accuracy: self.heldout_accuracy,
            seed: self.seed,
            parameter_hash: self.parameter_hash()?,
            blob: blob.into(),
        };
        write_json_atomic(&dir.join("classifier.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("classifier.json");
        let manifest: ClassifierManifest = serde_json::from_slice(&read_file(&mpath)?)?;
        let data = decode_blob(&read_file(&dir.join(&manifest.blob))?)?;
        let (mut c, _) = Self::init(&manifest.spec, manifest.seed, DType::F32, &Device::Cpu)?;
        c.store.import("", &data)?;
        c.heldout_accuracy = manifest.heldout_accuracy;
        Ok(c)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub spec: BundleSpec,
    pub classifier_spec: ClassifierSpec,
    pub training_step: u64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub cst_enabled: bool,
    pub pl_mean: f64,
    pub classifier_hash: String,
    pub classifier_heldout_accuracy: Option<f64>,
    pub parameter_hash: String,
    pub blob: String,
}

/// Generator, encoder and discriminator trained against one frozen classifier.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    spec: BundleSpec,
    layout: StyleLayout,
    pub(crate) generator: Generator,
    pub(crate) encoder: Encoder,
    pub(crate) discriminator: Discriminator,
    g_infer: Generator,
    e_infer: Encoder,
    d_infer: Discriminator,
    classifier: FrozenClassifier,
    pub(crate) g_store: ParamStore,
    pub(crate) e_store: ParamStore,
    pub(crate) d_store: ParamStore,
    pub training_step: u64,
    pub cst_enabled: bool,
    /// Running mean of path lengths for the path regulariser.
    pub pl_mean: f64,
    pub seed: u64,
    pub loss_weights: LossWeights,
}

impl ModelBundle {
    pub fn new(spec: &BundleSpec, classifier: FrozenClassifier, cst_enabled: bool, seed: u64) -> Result<Self> {
        Self::with_dtype(spec, classifier, cst_enabled, seed, DType::F32)
    }

    pub fn with_dtype(
        spec: &BundleSpec,
        classifier: FrozenClassifier,
        cst_enabled: bool,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        spec.validate()?;
        let cs = classifier.spec();
        if cs.image_resolution != spec.generator.image_resolution || cs.num_classes != spec.generator.num_classes {
            return Err(Error::InvalidSpec(format!(
                "classifier ({}px, {} classes) does not match generator ({}px, {} classes)",
                cs.image_resolution,
                cs.num_classes,
                spec.generator.image_resolution,
                spec.generator.num_classes
            )));
        }
        let classifier = if classifier.store.dtype() == dtype {
            classifier
        } else {
            classifier.to_dtype(dtype)?
        };
        let device = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g_store = ParamStore::new(dtype, &device);
        let mut e_store = ParamStore::new(dtype, &device);
        let mut d_store = ParamStore::new(dtype, &device);
        let generator = Generator::new(&spec.generator, &mut g_store, &mut rng)?;
        let encoder = Encoder::new(&spec.encoder(), spec.generator.latent_dim, &mut e_store, &mut rng)?;
        let discriminator = Discriminator::new(&spec.discriminator(), &mut d_store, &mut rng)?;
        Ok(Self {
            spec: spec.clone(),
            layout: spec.generator.layout()?,
            g_infer: generator.detached(),
            e_infer: encoder.detached(),
            d_infer: discriminator.detached(),
            generator,
            encoder,
            discriminator,
            classifier,
            g_store,
            e_store,
            d_store,
            training_step: 0,
            cst_enabled,
            pl_mean: 0.0,
            seed,
            loss_weights: LossWeights::default(),
        })
    }

    pub fn spec(&self) -> &BundleSpec {
        &self.spec
    }

    pub fn classifier(&self) -> &FrozenClassifier {
        &self.classifier
    }

    pub fn dtype(&self) -> DType {
        self.g_store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.g_store.device()
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    /// Trainable parameters of the generator, encoder and discriminator, in that order.
    pub fn parameter_stores(&self) -> [&ParamStore; 3] {
        [&self.g_store, &self.e_store, &self.d_store]
    }

    pub fn classifier_hash(&self) -> Result<String> {
        self.classifier.parameter_hash()
    }

    /// Hash of every trainable parameter (generator, encoder, discriminator).
    pub fn parameter_hash(&self) -> Result<String> {
        Ok(format!(
            "{}:{}:{}",
            &self.g_store.hash()?[..16],
            &self.e_store.hash()?[..16],
            &self.d_store.hash()?[..16]
        ))
    }

    pub(crate) fn stores(&self) -> [(&'static str, &ParamStore); 3] {
        [
            ("generator.", &self.g_store),
            ("encoder.", &self.e_store),
            ("discriminator.", &self.d_store),
        ]
    }

    /// Conditioning input for a batch of classifier logits: softmax, or zeros without CST.
    pub fn condition_from_logits(&self, logits: &Tensor) -> Result<Tensor> {
        if self.cst_enabled {
            Ok(candle_nn::ops::softmax_last_dim(logits)?)
        } else {
            Ok(logits.zeros_like()?)
        }
    }

    fn image_tensor(&self, images: &[Image]) -> Result<Tensor> {
        let r = self.spec.generator.image_resolution;
        for (i, im) in images.iter().enumerate() {
            if im.shape() != (3, r, r) {
                return Err(Error::ShapeMismatch(format!(
                    "image {i} is {:?}, bundle expects (3, {r}, {r})",
                    im.shape()
                )));
            }
        }
        images_to_tensor(images, self.dtype(), self.device())
    }

    pub fn styles_to_tensors(&self, batch: &[StyleVectorSet]) -> Result<Vec<Tensor>> {
        for s in batch {
            s.check(&self.layout)?;
        }
        (0..self.layout.num_layers())
            .map(|l| {
                let rows: Vec<Vec<f64>> = batch.iter().map(|s| s.layers()[l].clone()).collect();
                rows_to_tensor(&rows, self.layout.layer_channels()[l], self.dtype(), self.device())
            })
            .collect()
    }

    pub fn tensors_to_styles(layers: &[Tensor]) -> Result<Vec<StyleVectorSet>> {
        let per_layer: Vec<Vec<Vec<f64>>> = layers.iter().map(tensor_to_rows).collect::<Result<_>>()?;
        let b = per_layer.first().map_or(0, Vec::len);
        Ok((0..b)
            .map(|i| StyleVectorSet::new(per_layer.iter().map(|l| l[i].clone()).collect()))
            .collect())
    }

    pub fn classify(&self, images: &[Image]) -> Result<Vec<Logits>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_BATCH) {
            let x = self.image_tensor(chunk)?;
            out.extend(tensor_to_rows(&self.classifier.logits_tensor(&x)?)?);
        }
        Ok(out)
    }

    pub fn encode(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_BATCH) {
            let x = self.image_tensor(chunk)?;
            out.extend(tensor_to_rows(&self.e_infer.forward(&x)?)?);
        }
        Ok(out)
    }

    /// Generates images from latents and conditions; also returns the styles used.
    pub fn generate(
        &self,
        w: &[Vec<f64>],
        conditions: &[ConditionVector],
    ) -> Result<(Vec<Image>, Vec<StyleVectorSet>)> {
        if w.len() != conditions.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} latents but {} conditions",
                w.len(),
                conditions.len()
            )));
        }
        let g = &self.spec.generator;
        let mut images = Vec::with_capacity(w.len());
        let mut styles = Vec::with_capacity(w.len());
        for (wc, cc) in w.chunks(INFER_BATCH).zip(conditions.chunks(INFER_BATCH)) {
            let wt = rows_to_tensor(wc, g.latent_dim, self.dtype(), self.device())?;
            let crows: Vec<Vec<f64>> = cc.iter().map(|c| c.probs().to_vec()).collect();
            let ct = rows_to_tensor(&crows, g.num_classes, self.dtype(), self.device())?;
            let ct = if self.cst_enabled { ct } else { ct.zeros_like()? };
            let s = self.g_infer.styles(&wt, &ct)?;
            images.extend(tensor_to_images(&self.g_infer.synthesize(&s)?)?);
            styles.extend(Self::tensors_to_styles(&s)?);
        }
        Ok((images, styles))
    }

    pub fn generate_from_styles(&self, batch: &[StyleVectorSet]) -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(INFER_BATCH) {
            let s = self.styles_to_tensors(chunk)?;
            out.extend(tensor_to_images(&self.g_infer.synthesize(&s)?)?);
        }
        Ok(out)
    }

    pub fn discriminate(&self, images: &[Image]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_BATCH) {
            let x = self.image_tensor(chunk)?;
            let scores: Vec<f64> = self.d_infer.forward(&x)?.to_dtype(DType::F64)?.to_vec1()?;
            out.extend(scores);
        }
        Ok(out)
    }

    /// Encodes, conditions on `C(x)` and maps to styles: the styles of `G(E(x), C(x))`.
    pub fn capture(&self, images: &[Image]) -> Result<Vec<StyleVectorSet>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_BATCH) {
            let x = self.image_tensor(chunk)?;
            let w = self.e_infer.forward(&x)?;
            let c = self.condition_from_logits(&self.classifier.logits_tensor(&x)?)?;
            out.extend(Self::tensors_to_styles(&self.g_infer.styles(&w, &c)?)?);
        }
        Ok(out)
    }

    /// `G(E(x), C(x))` for every image.
    pub fn reconstruct(&self, images: &[Image]) -> Result<Vec<Image>> {
        let styles = self.capture(images)?;
        self.generate_from_styles(&styles)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut all = TensorMap::new();
        for (prefix, store) in self.stores() {
            for (k, v) in store.export()? {
                all.insert(format!("{prefix}{k}"), v);
            }
        }
        for (k, v) in self.classifier.store.export()? {
            all.insert(format!("classifier.{k}"), v);
        }
        let blob = "bundle.bin";
        write_atomic(&dir.join(blob), &encode_blob(&all))?;
        write_json_atomic(&dir.join("bundle.json"), &self.manifest()?)
    }

    pub fn manifest(&self) -> Result<BundleManifest> {
        Ok(BundleManifest {
            format_version: checkpoint::BLOB_VERSION,
            spec: self.spec.clone(),
            classifier_spec: self.classifier.spec().clone(),
            training_step: self.training_step,
            loss_weights: self.loss_weights.clone(),
            seed: self.seed,
            cst_enabled: self.cst_enabled,
            pl_mean: self.pl_mean,
            classifier_hash: self.classifier_hash()?,
            classifier_heldout_accuracy: self.classifier.heldout_accuracy,
            parameter_hash: self.parameter_hash()?,
            blob: "bundle.bin".into(),
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: BundleManifest = serde_json::from_slice(&read_file(&dir.join("bundle.json"))?)?;
        let data = decode_blob(&read_file(&dir.join(&manifest.blob))?)?;
        let (classifier, _) = FrozenClassifier::init(&manifest.classifier_spec, 0, DType::F32, &Device::Cpu)?;
        classifier.store.import("classifier.", &data)?;
        let classifier = FrozenClassifier {
            heldout_accuracy: manifest.classifier_heldout_accuracy,
            ..classifier
        };
        if classifier.parameter_hash()? != manifest.classifier_hash {
            return Err(Error::Checkpoint("classifier hash does not match manifest".into()));
        }
        let mut bundle = Self::new(&manifest.spec, classifier, manifest.cst_enabled, manifest.seed)?;
        for (prefix, store) in bundle.stores() {
            store.import(prefix, &data)?;
        }
        bundle.training_step = manifest.training_step;
        bundle.pl_mean = manifest.pl_mean;
        bundle.loss_weights = manifest.loss_weights;
        Ok(bundle)
    }
}

impl StyleModel for ModelBundle {
    fn layout(&self) -> &StyleLayout {
        &self.layout
    }

    fn num_classes(&self) -> usize {
        self.spec.generator.num_classes
    }

    fn logits_from_styles(&self, batch: &[StyleVectorSet]) -> Result<Vec<Logits>> {
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(INFER_BATCH) {
            let s = self.styles_to_tensors(chunk)?;
            let img = self.g_infer.synthesize(&s)?;
            out.extend(tensor_to_rows(&self.classifier.logits_tensor(&img)?)?);
        }
        Ok(out)
    }

    fn render_styles(&self, batch: &[StyleVectorSet]) -> Result<Vec<Image>> {
        self.generate_from_styles(batch)
    }

    fn capture_styles(&self, images: &[Image]) -> Result<Vec<StyleVectorSet>> {
        self.capture(images)
    }

    fn classify_images(&self, images: &[Image]) -> Result<Vec<Logits>> {
        self.classify(images)
    }

    fn realness_from_styles(&self, batch: &[StyleVectorSet]) -> Result<Option<Vec<f64>>> {
        let images = self.generate_from_styles(batch)?;
        Ok(Some(self.discriminate(&images)?))
    }

    fn classifier_id(&self) -> Result<Option<String>> {
        Ok(Some(self.classifier_hash()?))
    }
}
