//! Directory-to-directory pipeline steps shared by the command line and the
//! end-to-end checks. Every step writes its effective config next to its outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::info;

use crate::artifact::{write_effective_config, ArtifactHeader};
use crate::attfind::AttributeSet;
use crate::error::{Error, Result};
use crate::eval::{
    discover_all, evaluate_sets, pool_stats, prepare, run_attfind, run_wu, AblationTable, EvalConfig, Prepared,
    SelectorRun,
};
use crate::explain::subset_greedy;
use crate::model::{argmax, StyleModel};
use crate::models::checkpoint::{read_file, write_atomic, write_json_atomic};
use crate::models::{BundleSpec, FrozenClassifier, ModelBundle};
use crate::report::{build_attribute_strip, emit_html_report, save_explanation, save_strip, ReportOutcome, SufficiencySummary};
use crate::style::StyleStats;
use crate::training::{check_classifier_gate, train, train_classifier, ClassifierTrainConfig, TrainConfig};
use crate::worlds::dataset::{AnnotatedDataset, LabeledImages, Split};
use crate::worlds::shapes::{render_shapes_dataset, ShapesDatasetConfig};

/// Dataset metadata written next to `annotations.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub num_classes: usize,
    pub resolution: usize,
    pub seed: u64,
    pub config: Option<ShapesDatasetConfig>,
}

pub fn make_dataset(out: &Path, name: &str, config: &ShapesDatasetConfig, seed: u64, command: &str) -> Result<AnnotatedDataset> {
    let data = render_shapes_dataset(config, seed)?;
    data.save(out)?;
    let info = DatasetInfo {
        name: name.into(),
        num_classes: config.class_rule.num_classes(),
        resolution: config.resolution,
        seed,
        config: Some(config.clone()),
    };
    write_json_atomic(&out.join("dataset.json"), &info)?;
    write_effective_config(&out.join("config.json"), command, &(config, seed))?;
    Ok(data)
}

pub fn load_dataset(dir: &Path) -> Result<(AnnotatedDataset, DatasetInfo)> {
    let info: DatasetInfo = serde_json::from_slice(&read_file(&dir.join("dataset.json"))?)?;
    Ok((AnnotatedDataset::load(dir, info.num_classes)?, info))
}

/// Trains and saves a classifier; the returned flag says whether it passes the accuracy gate.
pub fn train_classifier_step(
    dataset_dir: &Path,
    out: &Path,
    config: &ClassifierTrainConfig,
    command: &str,
) -> Result<(FrozenClassifier, bool)> {
    let (data, info) = load_dataset(dataset_dir)?;
    let mut cfg = config.clone();
    cfg.spec.num_classes = info.num_classes;
    cfg.spec.image_resolution = info.resolution;
    let c = train_classifier(&data.split(Split::Train), &data.split(Split::Heldout), &cfg)?;
    c.save(out)?;
    write_effective_config(&out.join("config.json"), command, &cfg)?;
    let ok = check_classifier_gate(&c).is_ok();
    info!(accuracy = ?c.heldout_accuracy, passes_gate = ok, "classifier trained");
    Ok((c, ok))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanStepConfig {
    pub spec: BundleSpec,
    pub train: TrainConfig,
}

pub fn train_gan_step(
    dataset_dir: &Path,
    classifier_dir: &Path,
    out: &Path,
    config: &GanStepConfig,
    command: &str,
) -> Result<ModelBundle> {
    let (data, info) = load_dataset(dataset_dir)?;
    let classifier = FrozenClassifier::load(classifier_dir)?;
    check_classifier_gate(&classifier)?;
    let mut spec = config.spec.clone();
    spec.generator.num_classes = info.num_classes;
    spec.generator.image_resolution = info.resolution;
    let mut bundle = ModelBundle::new(&spec, classifier, config.train.cst_enabled, config.train.seed)?;
    write_effective_config(&out.join("config.json"), command, config)?;
    train(&mut bundle, &data.split(Split::Train).images, &config.train, Some(out))?;
    Ok(bundle)
}

/// Discovery images come from the training split, evaluation images from the held-out split.
pub fn discovery_and_eval(data: &AnnotatedDataset, num_eval: usize) -> (LabeledImages, LabeledImages) {
    let train = data.split(Split::Train);
    let held = data.split(Split::Heldout);
    let n = held.len().min(num_eval);
    let idx: Vec<usize> = (0..n).collect();
    (train, held.subset(&idx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub eval: EvalConfig,
    pub num_eval_images: usize,
    pub seed: u64,
    /// Restricts discovery to one class; all classes when absent.
    pub class: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            eval: EvalConfig::default(),
            num_eval_images: 256,
            seed: 0,
            class: None,
        }
    }
}

/// Captured training images, at most `cap` per dataset label.
fn discovery_pool<M: StyleModel + ?Sized>(model: &M, images: &LabeledImages, cap: usize) -> Result<Prepared> {
    let mut idx = Vec::new();
    for c in 0..images.num_classes {
        idx.extend(images.labels.iter().enumerate().filter(|(_, &l)| l == c).map(|(i, _)| i).take(cap));
    }
    idx.sort_unstable();
    prepare(model, &images.subset(&idx).images)
}

fn write_attrs(run: &Path, sets: &[AttributeSet], stats: &StyleStats, header: &ArtifactHeader) -> Result<()> {
    for a in sets {
        let mut a = a.clone();
        a.header = Some(header.clone());
        write_json_atomic(&run.join("attrs").join(format!("class_{}.json", a.target_class)), &a)?;
    }
    write_json_atomic(&run.join("stats.json"), stats)
}

pub fn load_attrs(run: &Path) -> Result<(Vec<AttributeSet>, StyleStats)> {
    let stats: StyleStats = serde_json::from_slice(&read_file(&run.join("stats.json"))?)?;
    let mut sets = Vec::new();
    let dir = run.join("attrs");
    let mut paths: Vec<_> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("json"))
        .collect();
    paths.sort();
    for p in paths {
        sets.push(serde_json::from_slice::<AttributeSet>(&read_file(&p)?)?);
    }
    sets.sort_by_key(|a| a.target_class);
    Ok((sets, stats))
}

/// Attribute search for every class (or one) with `selector` "attfind" or "wu".
pub fn attfind_step(
    bundle: &ModelBundle,
    data: &AnnotatedDataset,
    run: &Path,
    config: &RunConfig,
    selector: &str,
    command: &str,
) -> Result<Vec<AttributeSet>> {
    let header = write_effective_config(&run.join("config.json"), command, config)?;
    let (train, _) = discovery_and_eval(data, config.num_eval_images);
    let discovery = discovery_pool(bundle, &train, config.eval.num_images.max(64))?;
    let stats = pool_stats(&discovery)?;
    let mut sets = match selector {
        "attfind" => discover_all(bundle, &discovery, &stats, &config.eval)?,
        "wu" => (0..bundle.num_classes())
            .map(|y| {
                crate::eval::wu_selector(
                    bundle.layout(),
                    &discovery.styles,
                    &discovery.predictions,
                    y,
                    config.eval.m,
                    config.eval.alpha,
                    &stats,
                )
            })
            .collect::<Result<_>>()?,
        other => return Err(Error::InvalidArgument(format!("unknown selector {other}"))),
    };
    if let Some(c) = config.class {
        sets.retain(|a| a.target_class == c);
        if sets.is_empty() {
            return Err(Error::InvalidArgument(format!("class {c} out of range")));
        }
    }
    write_attrs(run, &sets, &stats, &header)?;
    Ok(sets)
}

pub fn eval_step(bundle: &ModelBundle, data: &AnnotatedDataset, run: &Path, dataset_name: &str, command: &str) -> Result<SufficiencySummary> {
    let config: crate::artifact::EffectiveConfig<RunConfig> = serde_json::from_slice(&read_file(&run.join("config.json"))?)?;
    let config = config.config;
    let (attrs, stats) = load_attrs(run)?;
    let (_, eval_images) = discovery_and_eval(data, config.num_eval_images);
    let evaluation = prepare(bundle, &eval_images.images)?;
    let (reports, aggregate) = evaluate_sets(bundle, &evaluation, &attrs, config.eval.k_max, &stats)?;
    let header = ArtifactHeader::new(command, &config)?;
    let summary = SufficiencySummary {
        header: Some(header),
        dataset: dataset_name.into(),
        reports,
        aggregate,
    };
    write_json_atomic(&run.join("tables/sufficiency.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualsConfig {
    pub strip_count: usize,
    pub num_explanations: usize,
    pub gif: bool,
}

impl Default for VisualsConfig {
    fn default() -> Self {
        Self {
            strip_count: 3,
            num_explanations: 6,
            gif: false,
        }
    }
}

/// Writes strips for every discovered attribute and a few per-image explanations.
pub fn build_visuals(bundle: &ModelBundle, data: &AnnotatedDataset, run: &Path, visuals: &VisualsConfig, command: &str) -> Result<()> {
    let config: crate::artifact::EffectiveConfig<RunConfig> = serde_json::from_slice(&read_file(&run.join("config.json"))?)?;
    let config = config.config;
    let header = ArtifactHeader::new(command, &(config.clone(), visuals))?;
    let (attrs, stats) = load_attrs(run)?;
    let (_, eval_images) = discovery_and_eval(data, config.num_eval_images);
    let evaluation = prepare(bundle, &eval_images.images)?;
    for a in &attrs {
        let pool: Vec<_> = evaluation
            .styles
            .iter()
            .zip(&evaluation.predictions)
            .filter(|(_, p)| **p != a.target_class)
            .map(|(s, _)| s.clone())
            .collect();
        if pool.is_empty() {
            continue;
        }
        for rank in 0..a.len() {
            let strip = build_attribute_strip(bundle, a, rank, &pool, visuals.strip_count, &stats)?;
            save_strip(run, &strip, visuals.gif, Some(header.clone()))?;
        }
    }
    let logits = bundle.logits_from_styles(&evaluation.styles)?;
    for (i, (s, l)) in evaluation.styles.iter().zip(&logits).enumerate().take(visuals.num_explanations) {
        let pred = argmax(l);
        // explain towards the runner-up class
        let target = (0..l.len()).filter(|&c| c != pred).max_by(|&a, &b| l[a].total_cmp(&l[b]).then(b.cmp(&a)));
        let Some(target) = target else { continue };
        let Some(a) = attrs.iter().find(|a| a.target_class == target) else { continue };
        let r = subset_greedy(bundle, s, a, config.eval.k_max, &stats)?;
        save_explanation(run, &format!("image_{i:03}"), &r, Some(header.clone()))?;
    }
    Ok(())
}

pub fn report_step(run: &Path) -> Result<ReportOutcome> {
    emit_html_report(run)
}

/// Three-column comparison written to `tables/ablation.json` and `tables/ablation.txt`.
pub fn ablation_step(
    cst: &ModelBundle,
    no_cst: &ModelBundle,
    data: &AnnotatedDataset,
    run: &Path,
    dataset_name: &str,
    config: &RunConfig,
    command: &str,
) -> Result<(AblationTable, [SelectorRun; 3])> {
    if cst.classifier_hash()? != no_cst.classifier_hash()? {
        return Err(Error::Precondition("bundles were trained against different classifiers".into()));
    }
    let header = write_effective_config(&run.join("config.json"), command, config)?;
    let (train, eval_images) = discovery_and_eval(data, config.num_eval_images);
    let cap = config.eval.num_images.max(64);
    let cst_disc = discovery_pool(cst, &train, cap)?;
    let cst_eval = prepare(cst, &eval_images.images)?;
    let cst_run = run_attfind(cst, &cst_disc, &cst_eval, &config.eval)?;
    let wu_run = run_wu(cst, &cst_disc, &cst_eval, &config.eval)?;
    let nc_disc = discovery_pool(no_cst, &train, cap)?;
    let nc_eval = prepare(no_cst, &eval_images.images)?;
    let nc_run = run_attfind(no_cst, &nc_disc, &nc_eval, &config.eval)?;
    let mut table = AblationTable::from_runs(dataset_name, config.eval.k_max, Some(&wu_run), Some(&nc_run), Some(&cst_run));
    table.header = Some(header);
    write_json_atomic(&run.join("tables/ablation.json"), &table)?;
    write_atomic(&run.join("tables/ablation.txt"), table.render_text().as_bytes())?;
    Ok((table, [wu_run, nc_run, cst_run]))
}
