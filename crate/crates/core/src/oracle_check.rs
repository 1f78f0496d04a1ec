//! Property suites over analytic oracle worlds.
//!
//! Includes a deliberately naive transcription of the attribute search that
//! recomputes every delta with one model call per intervened image, each
//! round, so the optimised search can be compared against it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attfind::{att_find, compute_deltas, discard_inconsistent, AttFindConfig};
use crate::error::Result;
use crate::eval::{sufficiency, wu_selector};
use crate::explain::{independent_topk, subset_greedy};
use crate::model::{argmax, StyleModel};
use crate::style::{
    compute_style_stats, enumerate_coordinates, intervene, Direction, StyleCoordinateId, StyleLayout, StyleStats,
    StyleVectorSet,
};
use crate::worlds::{make_confounded_world, make_linear_world, make_quadratic_world, OracleWorld, WorldForm};

/// Naive attribute search: stops at `m` picks, when no images remain, or
/// when no strictly positive mean delta is left.
pub fn literal_att_find<M: StyleModel + ?Sized>(
    model: &M,
    images: &[StyleVectorSet],
    y: usize,
    m: usize,
    t: f64,
    stats: &StyleStats,
    alpha: f64,
) -> Result<Vec<(StyleCoordinateId, Direction)>> {
    let layout = model.layout().clone();
    let mut selected: Vec<(StyleCoordinateId, Direction)> = Vec::new();
    let mut x: Vec<StyleVectorSet> = images.to_vec();
    while selected.len() < m && !x.is_empty() {
        let mut best: Option<((StyleCoordinateId, Direction), f64)> = None;
        let mut means: Vec<((StyleCoordinateId, Direction), f64)> = Vec::new();
        for s in enumerate_coordinates(&layout) {
            if selected.iter().any(|(c, _)| *c == s) {
                continue;
            }
            for d in [Direction::Positive, Direction::Negative] {
                let mut total = 0.0;
                for img in &x {
                    let base = model.logits_from_styles(std::slice::from_ref(img))?[0][y];
                    let changed = intervene(img, &layout, s, d, stats, alpha)?.styles;
                    let after = model.logits_from_styles(std::slice::from_ref(&changed))?[0][y];
                    total += after - base;
                }
                means.push(((s, d), total / x.len() as f64));
            }
        }
        // both directions raising the logit: discard the coordinate
        for i in (0..means.len()).step_by(2) {
            if means[i].1 > 0.0 && means[i + 1].1 > 0.0 {
                means[i].1 = 0.0;
                means[i + 1].1 = 0.0;
            }
        }
        for &(key, v) in &means {
            if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
                best = Some((key, v));
            }
        }
        let Some(((s, d), _)) = best else { break };
        selected.push((s, d));
        let mut keep = Vec::new();
        for img in x {
            let base = model.logits_from_styles(std::slice::from_ref(&img))?[0][y];
            let changed = intervene(&img, &layout, s, d, stats, alpha)?.styles;
            let after = model.logits_from_styles(std::slice::from_ref(&changed))?[0][y];
            if !(after - base > t) {
                keep.push(img);
            }
        }
        x = keep;
    }
    Ok(selected)
}

/// One randomised world with images already filtered to predictions other than `y`.
#[derive(Debug, Clone)]
pub struct WorldCase {
    pub world: OracleWorld,
    pub images: Vec<StyleVectorSet>,
    pub y: usize,
    pub stats: StyleStats,
    pub config: AttFindConfig,
}

fn random_layout(rng: &mut ChaCha8Rng, k: usize) -> StyleLayout {
    let mut layers = Vec::new();
    let mut left = k;
    while left > 0 {
        let c = rng.random_range(1..=left.min(6));
        layers.push(c);
        left -= c;
    }
    StyleLayout::new(layers).expect("nonempty")
}

/// A dyadic grid value, so sums and means in both searches are exact and ties really occur.
fn grid(rng: &mut ChaCha8Rng) -> f64 {
    [-1.0, -0.5, 0.0, 0.5, 1.0][rng.random_range(0..5)]
}

/// Builds a random linear, quadratic or confounded world (by `index % 3`),
/// with K <= 16 and at most 32 images.
pub fn random_world_case(seed: u64, index: usize) -> Result<WorldCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(index as u64));
    let k = rng.random_range(3..=16);
    let layout = random_layout(&mut rng, k);
    let on_grid = index % 2 == 0;
    let world = match index % 3 {
        0 => {
            let classes = rng.random_range(2..=3);
            let w: Vec<Vec<f64>> = (0..classes)
                .map(|_| {
                    (0..k)
                        .map(|_| if on_grid { grid(&mut rng) } else { rng.random_range(-2.0..2.0) })
                        .collect()
                })
                .collect();
            make_linear_world(layout.clone(), w, vec![0.0; classes])?
        }
        1 => {
            let q = rng.random_range(0..k);
            let lin: Vec<f64> = (0..k)
                .map(|_| if on_grid { grid(&mut rng) } else { rng.random_range(-1.5..1.5) })
                .collect();
            make_quadratic_world(layout.clone(), q, lin)?
        }
        _ => {
            let causal = rng.random_range(0..k);
            let correlated = (causal + rng.random_range(1..k)) % k;
            make_confounded_world(layout.clone(), causal, correlated, rng.random_range(0.0..1.0))?
        }
    };
    let y = rng.random_range(0..world.num_classes());
    let (pool, _) = world.sample(96, rng.random());
    let pool: Vec<StyleVectorSet> = if on_grid {
        pool.iter()
            .map(|_| {
                let flat: Vec<f64> = (0..k).map(|_| grid(&mut rng)).collect();
                StyleVectorSet::from_flat(&layout, &flat)
            })
            .collect::<Result<_>>()?
    } else {
        pool
    };
    let stats = if on_grid || matches!(world.form(), WorldForm::Quadratic { .. }) {
        world.declared_stats()
    } else {
        compute_style_stats(&pool)?
    };
    let n = rng.random_range(1..=32);
    let logits = world.logits_from_styles(&pool)?;
    let images: Vec<StyleVectorSet> = pool
        .into_iter()
        .zip(logits)
        .filter(|(_, l)| argmax(l) != y)
        .map(|(s, _)| s)
        .take(n)
        .collect();
    let config = AttFindConfig {
        m: rng.random_range(1..=k.min(8)),
        t: if on_grid { 0.5 * rng.random_range(1..=6) as f64 } else { rng.random_range(0.2..4.0) },
        alpha: if on_grid { 1.0 } else { rng.random_range(0.5..3.0) },
        discriminator_filter: None,
    };
    Ok(WorldCase {
        world,
        images,
        y,
        stats,
        config,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed,
        detail,
    }
}

/// Optimised and naive search agree exactly on `num_worlds` random worlds.
pub fn check_attfind_equivalence(seed: u64, num_worlds: usize) -> Result<CheckResult> {
    let mut mismatches = Vec::new();
    let mut nonempty = 0;
    for i in 0..num_worlds {
        let c = random_world_case(seed, i)?;
        let fast = att_find(&c.world, &c.images, c.y, &c.stats, &c.config)?.pairs();
        let slow = literal_att_find(
            &c.world,
            &c.images,
            c.y,
            c.config.m,
            c.config.t,
            &c.stats,
            c.config.alpha,
        )?;
        nonempty += usize::from(!fast.is_empty());
        if fast != slow {
            mismatches.push(i);
        }
    }
    Ok(result(
        "attfind_equivalence",
        mismatches.is_empty(),
        format!("{num_worlds} worlds, {nonempty} with picks, mismatches at {mismatches:?}"),
    ))
}

/// Symmetric quadratic coordinates are never picked; off the vertex they become selectable.
pub fn check_quadratic_discard(seed: u64, num_worlds: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for i in 0..num_worlds {
        let k = rng.random_range(2..=12);
        let layout = StyleLayout::new(vec![k]).expect("k >= 2");
        let q = rng.random_range(0..k);
        let lin: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let world = make_quadratic_world(layout.clone(), q, lin)?;
        let stats = world.declared_stats();
        let (pool, labels) = world.sample(64, rng.random());
        let images: Vec<StyleVectorSet> = pool.into_iter().zip(labels).filter(|(_, l)| *l == 0).map(|(s, _)| s).collect();
        let alpha = rng.random_range(0.5..2.5);
        let cfg = AttFindConfig {
            m: k,
            t: 1e9,
            alpha,
            discriminator_filter: None,
        };
        let qc = layout.coordinate(q)?;
        let set = att_find(&world, &images, 1, &stats, &cfg)?;
        if set.attributes.iter().any(|a| a.coord == qc) {
            failures.push(format!("world {i}: symmetric coordinate selected"));
        }
        // off the vertex: every image gains going away from it and loses going towards it
        let pure = make_quadratic_world(layout.clone(), q, vec![0.0; k])?
            .with_baseline(q, 2.0)?
            .with_bias(0, 10.0)?;
        let pstats = StyleStats::new(pure.center().to_vec(), vec![1.0; k], 1)?;
        let at_baseline: Vec<StyleVectorSet> = (0..4)
            .map(|_| StyleVectorSet::from_flat(&layout, pure.center()))
            .collect::<Result<_>>()?;
        let table = discard_inconsistent(compute_deltas(&pure, &at_baseline, 1, &[], &pstats, 1.0)?);
        let up = table.mean(qc, Direction::Positive).unwrap_or(0.0);
        let down = table.mean(qc, Direction::Negative).unwrap_or(0.0);
        let picked = att_find(
            &pure,
            &at_baseline,
            1,
            &pstats,
            &AttFindConfig {
                m: 1,
                t: 1e9,
                alpha: 1.0,
                discriminator_filter: None,
            },
        )?
        .pairs();
        if !(up > 0.0 && down < 0.0) || picked != vec![(qc, Direction::Positive)] {
            failures.push(format!("world {i}: shifted baseline gave +{up} / -{down}, picked {picked:?}"));
        }
    }
    Ok(result(
        "quadratic_discard",
        failures.is_empty(),
        if failures.is_empty() {
            format!("{num_worlds} worlds")
        } else {
            failures.join("; ")
        },
    ))
}

/// The interventional search ignores the correlated coordinate; the value-difference baseline ranks it top-2.
pub fn check_confounded_separation(seed: u64, strength: f64) -> Result<CheckResult> {
    let layout = StyleLayout::new(vec![4, 4]).expect("valid");
    let (causal, correlated) = (2, 5);
    let world = make_confounded_world(layout.clone(), causal, correlated, strength)?;
    let (styles, _) = world.sample(400, seed);
    let preds: Vec<usize> = world.logits_from_styles(&styles)?.iter().map(|l| argmax(l)).collect();
    let stats = compute_style_stats(&styles)?;
    let wu = wu_selector(&layout, &styles, &preds, 1, 2, 2.0, &stats)?;
    let x: Vec<StyleVectorSet> = styles
        .iter()
        .zip(&preds)
        .filter(|(_, p)| **p != 1)
        .map(|(s, _)| s.clone())
        .collect();
    let af = att_find(
        &world,
        &x,
        1,
        &stats,
        &AttFindConfig {
            m: 10,
            t: 1.0,
            alpha: 2.0,
            discriminator_filter: None,
        },
    )?;
    let c_causal = layout.coordinate(causal)?;
    let c_corr = layout.coordinate(correlated)?;
    let wu_has_corr = wu.attributes.iter().any(|a| a.coord == c_corr);
    let wu_top = wu.attributes.first().map(|a| a.coord);
    let af_coords: Vec<StyleCoordinateId> = af.attributes.iter().map(|a| a.coord).collect();
    let af_ok = af_coords == vec![c_causal];
    let passed = if strength >= 0.5 {
        wu_has_corr && af_ok
    } else {
        af_ok && wu_top == Some(c_causal)
    };
    Ok(result(
        &format!("confounded_separation_{strength}"),
        passed,
        format!(
            "baseline top-2 {:?}, search picks {:?}",
            wu.attributes.iter().map(|a| a.coord).collect::<Vec<_>>(),
            af_coords
        ),
    ))
}

/// Random single interventions change exactly one element, or none at fixed points.
pub fn check_intervention_purity(seed: u64, calls: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0usize;
    let mut fixed_points = 0usize;
    for _ in 0..calls {
        let k = rng.random_range(1..=24);
        let layout = random_layout(&mut rng, k);
        let flat: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let s = StyleVectorSet::from_flat(&layout, &flat)?;
        let mean: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let std: Vec<f64> = (0..k)
            .map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..2.0) })
            .collect();
        let stats = StyleStats::new(mean, std, 2)?;
        let flat_idx = rng.random_range(0..k);
        let coord = layout.coordinate(flat_idx)?;
        let d = if rng.random_bool(0.5) { Direction::Positive } else { Direction::Negative };
        let alpha = rng.random_range(0.1..4.0);
        // plant fixed points now and then
        let s = if rng.random_bool(0.05) {
            let mut f = flat.clone();
            f[flat_idx] = stats.target_value(flat_idx, d, alpha);
            StyleVectorSet::from_flat(&layout, &f)?
        } else {
            s
        };
        let out = intervene(&s, &layout, coord, d, &stats, alpha)?.styles;
        let diffs: Vec<usize> = s
            .flatten()
            .iter()
            .zip(out.flatten())
            .enumerate()
            .filter(|(_, (a, b))| **a != *b)
            .map(|(i, _)| i)
            .collect();
        match diffs.as_slice() {
            [] => fixed_points += 1,
            [i] if *i == flat_idx => {}
            _ => bad += 1,
        }
    }
    Ok(result(
        "intervention_purity",
        bad == 0,
        format!("{calls} calls, {fixed_points} fixed points, {bad} violations"),
    ))
}

/// Flip fractions never decrease with the budget, greedy prefixes nest, and
/// the first greedy pick matches the best single attribute.
pub fn check_greedy_properties(seed: u64, num_worlds: usize) -> Result<CheckResult> {
    let mut failures = Vec::new();
    for i in 0..num_worlds {
        let c = random_world_case(seed ^ 0xabc, i)?;
        if c.images.is_empty() {
            continue;
        }
        let attrs = att_find(&c.world, &c.images, c.y, &c.stats, &c.config)?;
        let k_max = attrs.len().max(1);
        let rep = sufficiency(&c.world, &c.images, &attrs, k_max, &c.stats)?;
        if !rep.is_monotone() {
            failures.push(format!("world {i}: per-k not monotone"));
        }
        for img in &c.images {
            let mut prev: Option<Vec<StyleCoordinateId>> = None;
            for k in 1..=k_max {
                let r = subset_greedy(&c.world, img, &attrs, k, &c.stats)?;
                let coords: Vec<StyleCoordinateId> = r.applied.iter().map(|a| a.coord).collect();
                if let Some(p) = &prev {
                    if !coords.starts_with(p) {
                        failures.push(format!("world {i}: budget {k} is not an extension"));
                    }
                }
                if r.applied.iter().zip(r.applied.iter().skip(1)).any(|(a, b)| a.coord == b.coord) {
                    failures.push(format!("world {i}: repeated attribute"));
                }
                prev = Some(coords);
            }
            if !attrs.is_empty() {
                let top = independent_topk(&c.world, img, &attrs, 1, &c.stats)?;
                let g = subset_greedy(&c.world, img, &attrs, 1, &c.stats)?;
                if let (Some((a, delta)), Some(first)) = (top.first(), g.applied.first()) {
                    if *delta > 0.0 && a.coord != first.coord {
                        // an exact tie may legitimately break the other way
                        let again = independent_topk(&c.world, img, &attrs, attrs.len(), &c.stats)?;
                        let tied = again.iter().any(|(b, d)| b.coord == first.coord && *d == *delta);
                        if !tied {
                            failures.push(format!("world {i}: independent and greedy disagree on first pick"));
                        }
                    }
                }
            }
        }
    }
    Ok(result(
        "greedy_properties",
        failures.is_empty(),
        if failures.is_empty() {
            format!("{num_worlds} worlds")
        } else {
            failures.join("; ")
        },
    ))
}

/// Each world's logits match a separate evaluation of its declared form at 100 random points.
pub fn check_logit_forms(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..30 {
        let c = random_world_case(seed ^ 0x5151, i)?;
        let w = &c.world;
        let k = w.layout().k();
        for _ in 0..100 {
            let s: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0..4.0)).collect();
            let got = w.logits_flat(&s);
            let expect: Vec<f64> = match w.form() {
                WorldForm::Linear => w
                    .weights()
                    .iter()
                    .zip(w.bias())
                    .map(|(row, b)| b + row.iter().zip(&s).map(|(a, x)| a * x).sum::<f64>())
                    .collect(),
                WorldForm::Quadratic { coord, vertex } => {
                    let lin: f64 = w.weights()[1].iter().zip(&s).map(|(a, x)| a * x).sum();
                    vec![0.0, (s[*coord] - vertex).powi(2) + lin]
                }
                WorldForm::Confounded { causal, .. } => vec![0.0, 2.0 * s[*causal]],
            };
            for (a, b) in got.iter().zip(&expect) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(result("logit_forms", worst <= 1e-9, format!("max abs error {worst:e}")))
}

/// Runs every suite.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    Ok(vec![
        check_attfind_equivalence(seed, 24)?,
        check_quadratic_discard(seed, 12)?,
        check_confounded_separation(seed, 0.9)?,
        check_confounded_separation(seed, 0.0)?,
        check_intervention_purity(seed, 10_000)?,
        check_greedy_properties(seed, 12)?,
        check_logit_forms(seed)?,
    ])
}
