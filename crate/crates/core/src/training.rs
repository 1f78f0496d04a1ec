//! Joint generator/encoder vs discriminator training, and classifier training.
//!
//! Each step reconstructs `x' = G(E(x), C(x))`, updates the discriminator on
//! `x` (real) vs `x'` (fake), then updates generator and encoder on the
//! adversarial, reconstruction, classifier-KL and (lazily) path-length terms.
//! The classifier only ever appears as a constant.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::error::{Error, Result};
use crate::image::{images_to_tensor, Image};
use crate::losses::{self, tensor as lt, LossReport, LossWeights};
use crate::models::layers::ParamStore;
use crate::models::{ClassifierSpec, FrozenClassifier, ModelBundle};
use crate::worlds::dataset::LabeledImages;

/// Held-out accuracy a classifier needs before a generator may be trained against it.
pub const MIN_CLASSIFIER_ACCURACY: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr_ge: f64,
    pub lr_d: f64,
    pub weights: LossWeights,
    pub cst_enabled: bool,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub reg_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr_ge: 2e-3,
            lr_d: 2e-3,
            weights: LossWeights::default(),
            cst_enabled: true,
            seed: 0,
            checkpoint_every: 1000,
            reg_interval: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.lr_ge >= 0.0) || !(self.lr_d >= 0.0) {
            return Err(Error::InvalidArgument("learning rates must be >= 0".into()));
        }
        if self.reg_interval == 0 {
            return Err(Error::InvalidArgument("reg_interval must be >= 1".into()));
        }
        self.weights.validate()
    }

    /// Weights actually applied: the classifier term is dropped without CST.
    pub fn effective_weights(&self) -> LossWeights {
        if self.cst_enabled {
            self.weights.clone()
        } else {
            LossWeights {
                w_cls: 0.0,
                ..self.weights.clone()
            }
        }
    }
}

/// Shared forward pass of one step.
pub struct Reconstruction {
    pub x: Tensor,
    pub logits_x: Tensor,
    pub condition: Tensor,
    pub w: Tensor,
    pub x_prime: Tensor,
}

pub fn reconstruct_batch(bundle: &ModelBundle, x: &Tensor) -> Result<Reconstruction> {
    let logits_x = bundle.classifier().logits_tensor(x)?;
    let condition = bundle.condition_from_logits(&logits_x)?;
    let w = bundle.encoder.forward(x)?;
    let styles = bundle.generator.styles(&w, &condition)?;
    let x_prime = bundle.generator.synthesize(&styles)?;
    Ok(Reconstruction {
        x: x.clone(),
        logits_x,
        condition,
        w,
        x_prime,
    })
}

pub fn discriminator_loss(bundle: &ModelBundle, r: &Reconstruction) -> Result<Tensor> {
    let d_real = bundle.discriminator.forward(&r.x)?;
    let d_fake = bundle.discriminator.forward(&r.x_prime.detach())?;
    lt::adv_discriminator(&d_real, &d_fake)
}

/// Generator-side terms; `cls` is `None` without CST, `reg` only when directions are given.
pub struct GeneratorTerms {
    pub adv_g: Tensor,
    pub rec_x: Tensor,
    pub lpips: Tensor,
    pub rec_w: Tensor,
    pub cls: Option<Tensor>,
    pub reg: Option<(Tensor, f64)>,
}

pub fn generator_terms(
    bundle: &ModelBundle,
    r: &Reconstruction,
    path_directions: Option<&Tensor>,
) -> Result<GeneratorTerms> {
    let classifier = bundle.classifier().net();
    let adv_g = lt::adv_generator(&bundle.discriminator.forward(&r.x_prime)?)?;
    let rec_x = lt::rec_x(&r.x_prime, &r.x)?;
    let feats_prime = classifier.features(&r.x_prime)?;
    let lpips = lt::lpips(classifier, &r.x, &r.x_prime)?;
    let rec_w = lt::rec_w(&bundle.encoder, &r.x_prime, &r.w.detach())?;
    let cls = if bundle.cst_enabled {
        let logits_prime = classifier.logits_from_features(&feats_prime)?;
        Some(lt::classifier_kl(&logits_prime, &r.logits_x)?)
    } else {
        None
    };
    let reg = match path_directions {
        Some(dirs) => {
            let p = losses::path_regularization(
                &bundle.generator,
                &r.w.detach(),
                &r.condition,
                dirs,
                bundle.pl_mean,
                losses::PATH_MEAN_DECAY,
            )?;
            Some((p.penalty, p.updated_mean))
        }
        None => None,
    };
    Ok(GeneratorTerms {
        adv_g,
        rec_x,
        lpips,
        rec_w,
        cls,
        reg,
    })
}

fn weighted(t: &Tensor, w: f64) -> Result<Option<Tensor>> {
    Ok(if w == 0.0 { None } else { Some((t * w)?) })
}

impl GeneratorTerms {
    pub fn weighted_total(&self, weights: &LossWeights) -> Result<Tensor> {
        let mut parts = vec![
            weighted(&self.adv_g, weights.w_adv)?,
            weighted(&self.rec_x, weights.w_rec_x)?,
            weighted(&self.lpips, weights.w_lpips)?,
            weighted(&self.rec_w, weights.w_rec_w)?,
        ];
        if let Some(c) = &self.cls {
            parts.push(weighted(c, weights.w_cls)?);
        }
        if let Some((r, _)) = &self.reg {
            parts.push(weighted(r, weights.w_reg)?);
        }
        let mut acc = (self.adv_g.zeros_like())?;
        for p in parts.into_iter().flatten() {
            acc = (acc + p)?;
        }
        Ok(acc)
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn sample_directions<R: Rng>(rng: &mut R, rows: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let v: Vec<f32> = (0..rows * dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, (rows, dim), device)?.to_dtype(dtype)?)
}

fn adam(vars: Vec<candle_core::Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?)
}

/// Optimiser state and RNG for one training run over one bundle.
pub struct Trainer {
    config: TrainConfig,
    opt_ge: AdamW,
    opt_d: AdamW,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(bundle: &ModelBundle, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if bundle.cst_enabled != config.cst_enabled {
            return Err(Error::InvalidArgument(format!(
                "bundle cst_enabled={} but config cst_enabled={}",
                bundle.cst_enabled, config.cst_enabled
            )));
        }
        let mut ge = bundle.g_store.vars();
        ge.extend(bundle.e_store.vars());
        let opt_ge = adam(ge, config.lr_ge)?;
        let opt_d = adam(bundle.d_store.vars(), config.lr_d)?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a11);
        Ok(Self {
            config,
            opt_ge,
            opt_d,
            rng,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// One discriminator update followed by one generator+encoder update.
    pub fn step(&mut self, bundle: &mut ModelBundle, batch: &[Image]) -> Result<LossReport> {
        let x = images_to_tensor(batch, bundle.dtype(), bundle.device())?;
        let r = reconstruct_batch(bundle, &x)?;

        let loss_d = discriminator_loss(bundle, &r)?;
        let adv_d = scalar(&loss_d)?;
        if !adv_d.is_finite() {
            return Err(Error::NonFinite(format!("discriminator loss at step {}", bundle.training_step)));
        }
        let grads = loss_d.backward()?;
        self.opt_d.step(&grads)?;

        let weights = self.config.effective_weights();
        let do_reg = weights.w_reg > 0.0 && bundle.training_step % self.config.reg_interval == 0;
        let dirs = if do_reg {
            Some(sample_directions(
                &mut self.rng,
                batch.len(),
                bundle.spec().generator.latent_dim,
                bundle.dtype(),
                bundle.device(),
            )?)
        } else {
            None
        };
        let terms = generator_terms(bundle, &r, dirs.as_ref())?;
        let total_t = terms.weighted_total(&weights)?;

        let mut report = LossReport {
            adv_g: scalar(&terms.adv_g)?,
            adv_d,
            reg: terms.reg.as_ref().map(|(t, _)| scalar(t)).transpose()?.unwrap_or(0.0),
            rec_x: scalar(&terms.rec_x)?,
            lpips: scalar(&terms.lpips)?,
            rec_w: scalar(&terms.rec_w)?,
            cls: terms.cls.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
            total: scalar(&total_t)?,
        };
        // report the exact weighted sum of the recorded terms
        report.total = losses::total_loss(&report, &weights).unwrap_or(f64::NAN);
        if !report.is_finite() {
            return Err(Error::NonFinite(format!(
                "generator loss at step {}: {report:?}",
                bundle.training_step
            )));
        }
        let grads = total_t.backward()?;
        self.opt_ge.step(&grads)?;
        if let Some((_, m)) = terms.reg {
            bundle.pl_mean = m;
        }
        bundle.training_step += 1;
        Ok(report)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub rows: Vec<(u64, LossReport)>,
}

pub const LOG_HEADER: [&str; 9] = ["step", "adv_g", "adv_d", "reg", "rec_x", "lpips", "rec_w", "cls", "total"];

impl TrainingLog {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(LOG_HEADER)?;
        for (step, r) in &self.rows {
            w.write_record([
                step.to_string(),
                r.adv_g.to_string(),
                r.adv_d.to_string(),
                r.reg.to_string(),
                r.rec_x.to_string(),
                r.lpips.to_string(),
                r.rec_w.to_string(),
                r.cls.to_string(),
                r.total.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::models::checkpoint::write_atomic(path, self.to_csv()?.as_bytes())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let f = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::InvalidArgument(format!("bad training log field {i}")))
            };
            rows.push((
                f(0)? as u64,
                LossReport {
                    adv_g: f(1)?,
                    adv_d: f(2)?,
                    reg: f(3)?,
                    rec_x: f(4)?,
                    lpips: f(5)?,
                    rec_w: f(6)?,
                    cls: f(7)?,
                    total: f(8)?,
                },
            ));
        }
        Ok(Self { rows })
    }
}

/// Runs `config.steps` steps over shuffled minibatches.
///
/// With `out_dir`, the bundle is checkpointed there every `checkpoint_every`
/// steps and at the end, and the log is written to `train_log.csv`.
pub fn train(
    bundle: &mut ModelBundle,
    dataset: &[Image],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainingLog> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    let r = bundle.spec().generator.image_resolution;
    if let Some((i, im)) = dataset.iter().enumerate().find(|(_, im)| im.shape() != (3, r, r)) {
        return Err(Error::ShapeMismatch(format!(
            "dataset image {i} is {:?}, generator resolution is {r}",
            im.shape()
        )));
    }
    let mut trainer = Trainer::new(bundle, config.clone())?;
    bundle.loss_weights = config.effective_weights();
    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order = (0..dataset.len()).collect();
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            batch.push(dataset[order[cursor]].clone());
            cursor += 1;
        }
        let report = trainer.step(bundle, &batch)?;
        if step % 100 == 0 || step + 1 == config.steps {
            info!(
                step,
                total = report.total,
                rec_x = report.rec_x,
                cls = report.cls,
                adv_d = report.adv_d,
                "train step"
            );
        }
        log.rows.push((bundle.training_step - 1, report));
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
                bundle.save(dir)?;
                log.write_csv(&dir.join("train_log.csv"))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        bundle.save(dir)?;
        log.write_csv(&dir.join("train_log.csv"))?;
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub spec: ClassifierSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            spec: ClassifierSpec::default(),
            epochs: 3,
            batch_size: 32,
            lr: 2e-3,
            seed: 0,
        }
    }
}

pub fn accuracy(classifier: &FrozenClassifier, data: &LabeledImages) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("accuracy over an empty set".into()));
    }
    let logits = classifier.classify(&data.images)?;
    let correct = logits
        .iter()
        .zip(&data.labels)
        .filter(|(l, &y)| crate::model::argmax(l) == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Cross-entropy training; returns the frozen classifier with its held-out accuracy recorded.
pub fn train_classifier(
    train: &LabeledImages,
    heldout: &LabeledImages,
    config: &ClassifierTrainConfig,
) -> Result<FrozenClassifier> {
    config.spec.validate()?;
    if train.num_classes != config.spec.num_classes {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, classifier spec {}",
            train.num_classes, config.spec.num_classes
        )));
    }
    if train.classes_present() < 2 {
        return Err(Error::Precondition("classifier training needs at least 2 classes present".into()));
    }
    let r = config.spec.image_resolution;
    if train.resolution() != Some((3, r, r)) {
        return Err(Error::ShapeMismatch(format!(
            "training images are {:?}, classifier expects (3, {r}, {r})",
            train.resolution()
        )));
    }
    let device = Device::Cpu;
    let (mut frozen, tracked) = FrozenClassifier::init(&config.spec, config.seed, DType::F32, &device)?;
    let store: &ParamStore = frozen.store();
    let mut opt = AdamW::new(
        store.vars(),
        ParamsAdamW {
            lr: config.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let imgs: Vec<Image> = chunk.iter().map(|&i| train.images[i].clone()).collect();
            let labels: Vec<u32> = chunk.iter().map(|&i| train.labels[i] as u32).collect();
            let x = images_to_tensor(&imgs, DType::F32, &device)?;
            let y = Tensor::new(labels.as_slice(), &device)?;
            let loss = candle_nn::loss::cross_entropy(&tracked.forward(&x)?, &y)?;
            opt.backward_step(&loss)?;
            total += scalar(&loss)?;
            batches += 1;
        }
        info!(epoch, loss = total / batches as f64, "classifier epoch");
    }
    let acc = if heldout.is_empty() { None } else { Some(accuracy(&frozen, heldout)?) };
    frozen.heldout_accuracy = acc;
    Ok(frozen)
}

/// Refuses classifiers whose recorded held-out accuracy is below [`MIN_CLASSIFIER_ACCURACY`].
pub fn check_classifier_gate(classifier: &FrozenClassifier) -> Result<()> {
    match classifier.heldout_accuracy {
        Some(a) if a >= MIN_CLASSIFIER_ACCURACY => Ok(()),
        Some(a) => Err(Error::Precondition(format!(
            "classifier held-out accuracy {a:.3} is below {MIN_CLASSIFIER_ACCURACY}; refusing to train the generator"
        ))),
        None => Err(Error::Precondition("classifier has no recorded held-out accuracy".into())),
    }
}

pub fn default_run_dir(base: &Path, name: &str) -> PathBuf {
    base.join(name)
}
