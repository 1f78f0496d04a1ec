//! Flip-fraction evaluation, the value-difference baseline selector, and the
//! CST / no-CST / baseline comparison table.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifact::ArtifactHeader;
use crate::attfind::{att_find, AttFindConfig, Attribute, AttributeSet, DiscriminatorFilter, StopReason};
use crate::error::{Error, Result};
use crate::explain::greedy_search;
use crate::image::Image;
use crate::model::{argmax, StyleModel};
use crate::style::{compute_style_stats, Direction, StyleLayout, StyleStats, StyleVectorSet};

/// Greedy strategy used for flipping; recorded in every report.
pub const STRATEGY: &str = "subset_greedy";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub header: Option<ArtifactHeader>,
    /// `None` for an aggregate over several target classes.
    pub target_class: Option<usize>,
    pub selector: String,
    pub strategy: String,
    pub k_max: usize,
    pub flip_fraction: f64,
    /// Entry `k` is the fraction flipped with at most `k` attributes; entry 0 is always 0.
    pub per_k_fractions: Vec<f64>,
    pub num_images: usize,
    pub attrs_ref: String,
}

impl SufficiencyReport {
    pub fn is_monotone(&self) -> bool {
        self.per_k_fractions.windows(2).all(|w| w[0] <= w[1])
    }
}

/// Fraction of images whose prediction greedy subset selection flips to the
/// attribute set's class, for every budget `0..=k_max`.
///
/// Greedy picks do not depend on the budget, so one search with `k_max`
/// yields every smaller budget as a prefix.
pub fn sufficiency<M: StyleModel + ?Sized>(
    model: &M,
    styles: &[StyleVectorSet],
    attrs: &AttributeSet,
    k_max: usize,
    stats: &StyleStats,
) -> Result<SufficiencyReport> {
    if styles.is_empty() {
        return Err(Error::InvalidArgument("sufficiency needs at least one image".into()));
    }
    let top = attrs.top(k_max);
    let mut flipped_at = vec![0usize; k_max + 1];
    for s in styles {
        let (applied, before, after, _) = greedy_search(model, s, &top, k_max, stats)?;
        if crate::explain::is_flip(&before, &after, attrs.target_class) {
            flipped_at[applied.len()] += 1;
        }
    }
    let n = styles.len() as f64;
    let mut cum = 0usize;
    let per_k: Vec<f64> = flipped_at
        .iter()
        .map(|c| {
            cum += c;
            cum as f64 / n
        })
        .collect();
    Ok(SufficiencyReport {
        header: None,
        target_class: Some(attrs.target_class),
        selector: attrs.selector.clone(),
        strategy: STRATEGY.into(),
        k_max,
        flip_fraction: per_k[k_max],
        per_k_fractions: per_k,
        num_images: styles.len(),
        attrs_ref: attrs.digest()?,
    })
}

/// Image-weighted combination of per-class reports with a common `k_max`.
pub fn aggregate(reports: &[SufficiencyReport]) -> Result<SufficiencyReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to aggregate".into()))?;
    if reports.iter().any(|r| r.k_max != first.k_max) {
        return Err(Error::InvalidArgument("reports have different k_max".into()));
    }
    let total: usize = reports.iter().map(|r| r.num_images).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("reports cover no images".into()));
    }
    let per_k: Vec<f64> = (0..=first.k_max)
        .map(|k| {
            let flips: f64 = reports
                .iter()
                .map(|r| (r.per_k_fractions[k] * r.num_images as f64).round())
                .sum();
            flips / total as f64
        })
        .collect();
    let mut h = Sha256::new();
    for r in reports {
        h.update(r.attrs_ref.as_bytes());
    }
    Ok(SufficiencyReport {
        header: None,
        target_class: None,
        selector: first.selector.clone(),
        strategy: first.strategy.clone(),
        k_max: first.k_max,
        flip_fraction: per_k[first.k_max],
        per_k_fractions: per_k,
        num_images: total,
        attrs_ref: hex::encode(&h.finalize()[..8]),
    })
}

/// Ranks coordinates by `|mean(y) - mean(not y)| / pooled std` of their values.
///
/// The pooled std is the square root of the mean of the two group variances.
/// No interventions are rendered. Zero-score coordinates are never selected.
pub fn wu_selector(
    layout: &StyleLayout,
    styles: &[StyleVectorSet],
    labels: &[usize],
    y: usize,
    m: usize,
    alpha: f64,
    stats: &StyleStats,
) -> Result<AttributeSet> {
    if styles.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} styles, {} labels", styles.len(), labels.len())));
    }
    let n_y = labels.iter().filter(|&&l| l == y).count();
    if n_y == 0 || n_y == labels.len() {
        return Err(Error::Precondition(
            "the baseline selector needs both the target class and another class present".into(),
        ));
    }
    let k = layout.k();
    let mut sums = [vec![0.0; k], vec![0.0; k]];
    let mut counts = [0usize; 2];
    let flat: Vec<Vec<f64>> = styles
        .iter()
        .map(|s| {
            s.check(layout)?;
            Ok(s.flatten())
        })
        .collect::<Result<_>>()?;
    for (v, &l) in flat.iter().zip(labels) {
        let g = usize::from(l == y);
        counts[g] += 1;
        for (a, x) in sums[g].iter_mut().zip(v) {
            *a += x;
        }
    }
    let means: Vec<Vec<f64>> = (0..2).map(|g| sums[g].iter().map(|s| s / counts[g] as f64).collect()).collect();
    let mut sq = [vec![0.0; k], vec![0.0; k]];
    for (v, &l) in flat.iter().zip(labels) {
        let g = usize::from(l == y);
        for i in 0..k {
            let d = v[i] - means[g][i];
            sq[g][i] += d * d;
        }
    }
    let mut scored: Vec<(usize, f64, Direction)> = (0..k)
        .map(|i| {
            let var0 = sq[0][i] / counts[0] as f64;
            let var1 = sq[1][i] / counts[1] as f64;
            let pooled = ((var0 + var1) / 2.0).sqrt();
            let diff = means[1][i] - means[0][i];
            let score = if pooled > 0.0 { diff.abs() / pooled } else { 0.0 };
            let d = if diff >= 0.0 { Direction::Positive } else { Direction::Negative };
            (i, score, d)
        })
        .filter(|(_, s, _)| *s > 0.0 && s.is_finite())
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(m);
    let attributes = scored
        .into_iter()
        .enumerate()
        .map(|(rank, (i, score, direction))| {
            Ok(Attribute {
                coord: layout.coordinate(i)?,
                direction,
                mean_delta: score,
                images_explained: 0,
                rank,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttributeSet {
        header: None,
        target_class: y,
        selector: "wu".into(),
        m,
        t: 0.0,
        alpha,
        stats_ref: stats.digest(),
        num_images: styles.len(),
        stop_reason: StopReason::Ranked,
        no_effect: attributes.is_empty(),
        attributes,
    })
}

/// Up to `n` indices whose label is not `y`, alternating over the other classes.
pub fn select_balanced(labels: &[usize], num_classes: usize, y: usize, n: usize) -> Vec<usize> {
    let mut per: Vec<std::collections::VecDeque<usize>> = vec![Default::default(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l != y && l < num_classes {
            per[l].push_back(i);
        }
    }
    let mut out = Vec::new();
    while out.len() < n && per.iter().any(|q| !q.is_empty()) {
        for q in per.iter_mut() {
            if out.len() == n {
                break;
            }
            if let Some(i) = q.pop_front() {
                out.push(i);
            }
        }
    }
    out.sort_unstable();
    out
}

/// Captured styles of an image set with the predictions on their reconstructions.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub styles: Vec<StyleVectorSet>,
    pub predictions: Vec<usize>,
}

pub fn prepare<M: StyleModel + ?Sized>(model: &M, images: &[Image]) -> Result<Prepared> {
    let mut styles = Vec::with_capacity(images.len());
    for chunk in images.chunks(256) {
        styles.extend(model.capture_styles(chunk)?);
    }
    let predictions = model.logits_from_styles(&styles)?.iter().map(|l| argmax(l)).collect();
    Ok(Prepared { styles, predictions })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(rename = "M")]
    pub m: usize,
    pub t: f64,
    pub alpha: f64,
    pub k_max: usize,
    /// Discovery images per target class.
    pub num_images: usize,
    #[serde(default)]
    pub discriminator_min_realness: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            m: crate::attfind::DEFAULT_M,
            t: crate::attfind::DEFAULT_T,
            alpha: crate::attfind::DEFAULT_ALPHA,
            k_max: crate::explain::DEFAULT_K_MAX,
            num_images: crate::attfind::DEFAULT_NUM_IMAGES,
            discriminator_min_realness: None,
        }
    }
}

impl EvalConfig {
    pub fn attfind(&self) -> AttFindConfig {
        AttFindConfig {
            m: self.m,
            t: self.t,
            alpha: self.alpha,
            discriminator_filter: self
                .discriminator_min_realness
                .map(|min_realness| DiscriminatorFilter { min_realness }),
        }
    }
}

/// Everything one selector produced over all target classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorRun {
    pub selector: String,
    pub stats: StyleStats,
    pub attrs: Vec<AttributeSet>,
    pub reports: Vec<SufficiencyReport>,
    pub aggregate: Option<SufficiencyReport>,
}

/// Statistics over the whole discovery pool, which spans all classes.
pub fn pool_stats(discovery: &Prepared) -> Result<StyleStats> {
    compute_style_stats(&discovery.styles)
}

fn pick(styles: &[StyleVectorSet], idx: &[usize]) -> Vec<StyleVectorSet> {
    idx.iter().map(|&i| styles[i].clone()).collect()
}

/// Sufficiency of each class's attribute set over the evaluation images not predicted as that class.
pub fn evaluate_sets<M: StyleModel + ?Sized>(
    model: &M,
    evaluation: &Prepared,
    attrs: &[AttributeSet],
    k_max: usize,
    stats: &StyleStats,
) -> Result<(Vec<SufficiencyReport>, Option<SufficiencyReport>)> {
    let mut reports = Vec::new();
    for a in attrs {
        let idx: Vec<usize> = (0..evaluation.predictions.len())
            .filter(|&i| evaluation.predictions[i] != a.target_class)
            .collect();
        if idx.is_empty() {
            continue;
        }
        reports.push(sufficiency(model, &pick(&evaluation.styles, &idx), a, k_max, stats)?);
    }
    let agg = if reports.is_empty() { None } else { Some(aggregate(&reports)?) };
    Ok((reports, agg))
}

/// Attribute search for every class over balanced discovery images.
pub fn discover_all<M: StyleModel + ?Sized>(
    model: &M,
    discovery: &Prepared,
    stats: &StyleStats,
    config: &EvalConfig,
) -> Result<Vec<AttributeSet>> {
    let af = config.attfind();
    (0..model.num_classes())
        .map(|y| {
            let idx = select_balanced(&discovery.predictions, model.num_classes(), y, config.num_images);
            att_find(model, &pick(&discovery.styles, &idx), y, stats, &af)
        })
        .collect()
}

pub fn run_attfind<M: StyleModel + ?Sized>(
    model: &M,
    discovery: &Prepared,
    evaluation: &Prepared,
    config: &EvalConfig,
) -> Result<SelectorRun> {
    let stats = pool_stats(discovery)?;
    let attrs = discover_all(model, discovery, &stats, config)?;
    let (reports, aggregate) = evaluate_sets(model, evaluation, &attrs, config.k_max, &stats)?;
    Ok(SelectorRun {
        selector: "attfind".into(),
        stats,
        attrs,
        reports,
        aggregate,
    })
}

/// The baseline: per class, rank by value difference between predicted groups.
pub fn run_wu<M: StyleModel + ?Sized>(
    model: &M,
    discovery: &Prepared,
    evaluation: &Prepared,
    config: &EvalConfig,
) -> Result<SelectorRun> {
    let stats = pool_stats(discovery)?;
    let attrs = (0..model.num_classes())
        .map(|y| {
            wu_selector(
                model.layout(),
                &discovery.styles,
                &discovery.predictions,
                y,
                config.m,
                config.alpha,
                &stats,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let (reports, aggregate) = evaluate_sets(model, evaluation, &attrs, config.k_max, &stats)?;
    Ok(SelectorRun {
        selector: "wu".into(),
        stats,
        attrs,
        reports,
        aggregate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub wu: Option<f64>,
    pub no_cst: Option<f64>,
    pub cst: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub header: Option<ArtifactHeader>,
    pub k_max: usize,
    pub num_images: usize,
    pub strategy: String,
    pub rows: Vec<AblationRow>,
}

pub const TABLE_COLUMNS: [&str; 3] = ["Wu baseline", "w/o CST", "CST"];

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.1}%", 100.0 * x)).unwrap_or_else(|| "-".into())
}

impl AblationTable {
    /// Plain-text rendering: one row per dataset/class, one column per method.
    pub fn render_text(&self) -> String {
        let name_w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(7);
        let mut out = format!("Flip fraction with top-{} attributes\n", self.k_max);
        out += &format!("{:<name_w$}", "Dataset");
        for c in TABLE_COLUMNS {
            out += &format!("  {c:>12}");
        }
        out.push('\n');
        for r in &self.rows {
            out += &format!("{:<name_w$}", r.name);
            for v in [r.wu, r.no_cst, r.cst] {
                out += &format!("  {:>12}", pct(v));
            }
            out.push('\n');
        }
        out
    }

    /// Builds the table from up to three selector runs.
    pub fn from_runs(
        dataset: &str,
        k_max: usize,
        wu: Option<&SelectorRun>,
        no_cst: Option<&SelectorRun>,
        cst: Option<&SelectorRun>,
    ) -> Self {
        let runs = [wu, no_cst, cst];
        let frac = |run: Option<&SelectorRun>, class: Option<usize>| -> Option<f64> {
            let run = run?;
            match class {
                None => run.aggregate.as_ref().map(|r| r.flip_fraction),
                Some(y) => run
                    .reports
                    .iter()
                    .find(|r| r.target_class == Some(y))
                    .map(|r| r.flip_fraction),
            }
        };
        let classes: std::collections::BTreeSet<usize> = runs
            .iter()
            .flatten()
            .flat_map(|r| r.reports.iter().filter_map(|x| x.target_class))
            .collect();
        let mut rows = vec![AblationRow {
            name: dataset.to_string(),
            wu: frac(wu, None),
            no_cst: frac(no_cst, None),
            cst: frac(cst, None),
        }];
        if classes.len() > 1 {
            for y in classes {
                rows.push(AblationRow {
                    name: format!("{dataset} -> class {y}"),
                    wu: frac(wu, Some(y)),
                    no_cst: frac(no_cst, Some(y)),
                    cst: frac(cst, Some(y)),
                });
            }
        }
        let num_images = runs
            .iter()
            .flatten()
            .filter_map(|r| r.aggregate.as_ref().map(|a| a.num_images))
            .max()
            .unwrap_or(0);
        Self {
            header: None,
            k_max,
            num_images,
            strategy: STRATEGY.into(),
            rows,
        }
    }
}

/// All three columns for one dataset. The baseline column uses the CST model's style space.
pub fn ablation_compare<M: StyleModel + ?Sized>(
    dataset: &str,
    cst: &M,
    no_cst: &M,
    discovery_images: &[Image],
    eval_images: &[Image],
    config: &EvalConfig,
) -> Result<(AblationTable, [SelectorRun; 3])> {
    let (a, b) = (cst.classifier_id()?, no_cst.classifier_id()?);
    if a != b {
        return Err(Error::Precondition(format!(
            "bundles use different classifiers ({a:?} vs {b:?})"
        )));
    }
    let cst_disc = prepare(cst, discovery_images)?;
    let cst_eval = prepare(cst, eval_images)?;
    let cst_run = run_attfind(cst, &cst_disc, &cst_eval, config)?;
    let wu_run = run_wu(cst, &cst_disc, &cst_eval, config)?;
    let nc_disc = prepare(no_cst, discovery_images)?;
    let nc_eval = prepare(no_cst, eval_images)?;
    let nc_run = run_attfind(no_cst, &nc_disc, &nc_eval, config)?;
    let table = AblationTable::from_runs(dataset, config.k_max, Some(&wu_run), Some(&nc_run), Some(&cst_run));
    Ok((table, [wu_run, nc_run, cst_run]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worlds::make_linear_world;

    #[test]
    fn balanced_selection_alternates() {
        let labels = [0, 0, 0, 2, 2, 1, 1];
        assert_eq!(select_balanced(&labels, 3, 1, 4), vec![0, 1, 3, 4]);
        assert_eq!(select_balanced(&labels, 3, 0, 10), vec![3, 4, 5, 6]);
    }

    #[test]
    fn separating_coordinate_is_ranked_first() {
        let layout = StyleLayout::new(vec![3]).unwrap();
        let mut styles = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let l = i % 2;
            let noise = if (i / 2) % 2 == 0 { 1.0 } else { -1.0 };
            styles.push(StyleVectorSet::new(vec![vec![noise, 3.0 * l as f64 + noise, 0.0]]));
            labels.push(l);
        }
        let stats = compute_style_stats(&styles).unwrap();
        let a = wu_selector(&layout, &styles, &labels, 1, 3, 1.0, &stats).unwrap();
        assert_eq!(a.attributes[0].coord.channel, 1);
        assert!((a.attributes[0].mean_delta - 3.0).abs() < 1e-12);
        assert_eq!(a.attributes[0].direction, Direction::Positive);
        // identical across classes: score 0, never selected
        assert!(a.attributes.iter().all(|x| x.coord.channel != 2));
    }

    #[test]
    fn constant_classifier_never_flips() {
        let layout = StyleLayout::new(vec![2]).unwrap();
        let w = make_linear_world(layout.clone(), vec![vec![0.0; 2]; 2], vec![1.0, 0.0]).unwrap();
        let stats = StyleStats::new(vec![0.0; 2], vec![1.0; 2], 1).unwrap();
        let styles = vec![StyleVectorSet::new(vec![vec![0.0; 2]]); 4];
        let attrs = att_find(&w, &styles, 1, &stats, &AttFindConfig::default()).unwrap();
        let r = sufficiency(&w, &styles, &attrs, 10, &stats).unwrap();
        assert_eq!(r.flip_fraction, 0.0);
        assert_eq!(r.per_k_fractions.len(), 11);
        assert!(sufficiency(&w, &[], &attrs, 10, &stats).is_err());
    }

    #[test]
    fn aggregate_weights_by_images() {
        let mk = |n, f: Vec<f64>| SufficiencyReport {
            header: None,
            target_class: Some(0),
            selector: "attfind".into(),
            strategy: STRATEGY.into(),
            k_max: 1,
            flip_fraction: f[1],
            per_k_fractions: f,
            num_images: n,
            attrs_ref: "x".into(),
        };
        let a = aggregate(&[mk(2, vec![0.0, 1.0]), mk(6, vec![0.0, 0.5])]).unwrap();
        assert_eq!(a.num_images, 8);
        assert!((a.flip_fraction - 5.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn table_has_three_method_columns() {
        let t = AblationTable {
            header: None,
            k_max: 10,
            num_images: 256,
            strategy: STRATEGY.into(),
            rows: vec![AblationRow {
                name: "shapes".into(),
                wu: Some(0.1),
                no_cst: Some(0.25),
                cst: Some(0.9),
            }],
        };
        let text = t.render_text();
        for c in TABLE_COLUMNS {
            assert!(text.contains(c));
        }
        assert!(text.contains("90.0%"));
    }
}
