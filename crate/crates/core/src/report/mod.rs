//! Static visual artifacts: per-attribute strips, per-image explanation
//! panels, and an HTML report that only lays out what earlier steps wrote.
//!
//! Run directory layout read and written here:
//!
//! ```text
//! config.json                       effective config of the producing run
//! attrs/class_<y>.json              attribute sets
//! tables/sufficiency.json           per-class and aggregate flip fractions
//! tables/ablation.json              optional three-column comparison
//! strips/class_<y>/attr_<rank>.png  (+ .json, optional .gif)
//! explanations/<name>.png           (+ .json)
//! report.html
//! ```

pub mod font;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact::ArtifactHeader;
use crate::attfind::{Attribute, AttributeSet};
use crate::error::{Error, Result};
use crate::eval::{AblationTable, SufficiencyReport};
use crate::explain::{check_stats, counterfactual_from_styles, CounterfactualResult};
use crate::image::{hconcat, vconcat, Image};
use crate::model::{softmax, Logits, StyleModel};
use crate::models::checkpoint::{write_atomic, write_json_atomic};
use crate::style::{StyleStats, StyleVectorSet};

pub const UPSCALE: usize = 4;
const GAP: usize = 2;
const BACKGROUND: f32 = 1.0;

/// Exit status of a report emission that had to leave sections out.
pub const PARTIAL_EXIT_CODE: i32 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct StripExemplar {
    pub pool_index: usize,
    pub original: Image,
    pub counterfactual: Image,
    pub logits_before: Logits,
    pub logits_after: Logits,
    pub prob_before: f64,
    pub prob_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeStrip {
    pub target_class: usize,
    pub attribute: Attribute,
    pub exemplars: Vec<StripExemplar>,
}

/// Pool images with the largest single-attribute change in `C_y`, best first.
pub fn build_attribute_strip<M: StyleModel + ?Sized>(
    model: &M,
    attrs: &AttributeSet,
    rank: usize,
    pool: &[StyleVectorSet],
    count: usize,
    stats: &StyleStats,
) -> Result<AttributeStrip> {
    check_stats(attrs, stats)?;
    let attribute = attrs
        .attributes
        .get(rank)
        .ok_or_else(|| Error::InvalidArgument(format!("rank {rank} out of range for {} attributes", attrs.len())))?
        .clone();
    if pool.is_empty() {
        return Err(Error::InvalidArgument("exemplar pool is empty".into()));
    }
    let y = attrs.target_class;
    let mut scored = Vec::with_capacity(pool.len());
    for (i, s) in pool.iter().enumerate() {
        let changed = crate::explain::apply_all(model, s, std::slice::from_ref(&attribute), stats, attrs.alpha)?;
        let logits = model.logits_from_styles(&[s.clone(), changed])?;
        scored.push((i, logits[1][y] - logits[0][y]));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut exemplars = Vec::new();
    for &(i, _) in scored.iter().take(count.max(1)) {
        let r: CounterfactualResult =
            counterfactual_from_styles(model, &pool[i], std::slice::from_ref(&attribute), y, stats, attrs.alpha)?;
        exemplars.push(StripExemplar {
            pool_index: i,
            prob_before: softmax(&r.logits_before)[y],
            prob_after: softmax(&r.logits_after)[y],
            original: r.original_image,
            counterfactual: r.modified_image,
            logits_before: r.logits_before,
            logits_after: r.logits_after,
        });
    }
    Ok(AttributeStrip {
        target_class: y,
        attribute,
        exemplars,
    })
}

/// Upscaled image with its class probability burned into the top-left corner.
pub fn overlay(img: &Image, prob: f64) -> Image {
    let mut big = img.upscale(UPSCALE);
    font::draw_text(&mut big, &font::format_prob(prob), 0, 0, 2);
    big
}

fn as_rgb(img: &Image) -> Image {
    if img.channels == 3 {
        return img.clone();
    }
    let plane: Vec<f32> = img.data[..img.height * img.width].to_vec();
    let data = [plane.clone(), plane.clone(), plane].concat();
    Image::new(3, img.height, img.width, data).expect("sized")
}

impl AttributeStrip {
    /// Originals on the top row, counterfactuals below, one column per exemplar.
    pub fn to_image(&self) -> Result<Image> {
        let top: Vec<Image> = self
            .exemplars
            .iter()
            .map(|e| overlay(&as_rgb(&e.original), e.prob_before))
            .collect();
        let bottom: Vec<Image> = self
            .exemplars
            .iter()
            .map(|e| overlay(&as_rgb(&e.counterfactual), e.prob_after))
            .collect();
        vconcat(&[hconcat(&top, GAP, BACKGROUND)?, hconcat(&bottom, GAP, BACKGROUND)?], GAP, BACKGROUND)
    }

    pub fn manifest(&self, image: &str, gif: Option<String>) -> StripManifest {
        StripManifest {
            header: None,
            target_class: self.target_class,
            attribute: self.attribute.clone(),
            image: image.into(),
            gif,
            exemplars: self
                .exemplars
                .iter()
                .map(|e| ExemplarRecord {
                    pool_index: e.pool_index,
                    prob_before: e.prob_before,
                    prob_after: e.prob_after,
                    logits_before: e.logits_before.clone(),
                    logits_after: e.logits_after.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarRecord {
    pub pool_index: usize,
    pub prob_before: f64,
    pub prob_after: f64,
    pub logits_before: Logits,
    pub logits_after: Logits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StripManifest {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub header: Option<ArtifactHeader>,
    #[serde(rename = "class")]
    pub target_class: usize,
    pub attribute: Attribute,
    pub image: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gif: Option<String>,
    pub exemplars: Vec<ExemplarRecord>,
}

/// Two-frame looping GIF alternating original and counterfactual.
pub fn encode_flip_gif(original: &Image, counterfactual: &Image) -> Result<Vec<u8>> {
    use image::codecs::gif::{GifEncoder, Repeat};
    use image::{Delay, Frame, RgbaImage};
    let mut out = Vec::new();
    {
        let mut enc = GifEncoder::new(&mut out);
        enc.set_repeat(Repeat::Infinite)?;
        for im in [original, counterfactual] {
            let rgb = as_rgb(im).to_rgb8();
            let rgba = RgbaImage::from_fn(rgb.width(), rgb.height(), |x, y| {
                let p = rgb.get_pixel(x, y).0;
                image::Rgba([p[0], p[1], p[2], 255])
            });
            enc.encode_frame(Frame::from_parts(rgba, 0, 0, Delay::from_numer_denom_ms(700, 1)))?;
        }
    }
    Ok(out)
}

pub fn strip_dir(run: &Path, class: usize) -> PathBuf {
    run.join("strips").join(format!("class_{class}"))
}

/// Writes `strips/class_<y>/attr_<rank>.{png,json}` and optionally a GIF of the first exemplar.
pub fn save_strip(run: &Path, strip: &AttributeStrip, gif: bool, header: Option<ArtifactHeader>) -> Result<StripManifest> {
    let dir = strip_dir(run, strip.target_class);
    let stem = format!("attr_{}", strip.attribute.rank);
    let png = format!("{stem}.png");
    strip.to_image()?.save_png(&dir.join(&png))?;
    let gif_name = match (gif, strip.exemplars.first()) {
        (true, Some(e)) => {
            let name = format!("{stem}.gif");
            let bytes = encode_flip_gif(
                &overlay(&as_rgb(&e.original), e.prob_before),
                &overlay(&as_rgb(&e.counterfactual), e.prob_after),
            )?;
            write_atomic(&dir.join(&name), &bytes)?;
            Some(name)
        }
        _ => None,
    };
    let mut m = strip.manifest(&png, gif_name);
    m.header = header;
    write_json_atomic(&dir.join(format!("{stem}.json")), &m)?;
    Ok(m)
}

/// Side-by-side panel of an explanation with burned-in probabilities of the target class.
pub fn explanation_panel(r: &CounterfactualResult) -> Result<Image> {
    let y = r.target_class;
    hconcat(
        &[
            overlay(&as_rgb(&r.original_image), softmax(&r.logits_before)[y]),
            overlay(&as_rgb(&r.modified_image), softmax(&r.logits_after)[y]),
        ],
        GAP,
        BACKGROUND,
    )
}

/// Writes `explanations/<name>.png` (the panel), the raw pair and a JSON sidecar.
pub fn save_explanation(run: &Path, name: &str, r: &CounterfactualResult, header: Option<ArtifactHeader>) -> Result<()> {
    let dir = run.join("explanations");
    explanation_panel(r)?.save_png(&dir.join(format!("{name}.png")))?;
    r.save(&dir, name, header)?;
    Ok(())
}

/// Contents of `tables/sufficiency.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficiencySummary {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub header: Option<ArtifactHeader>,
    pub dataset: String,
    pub reports: Vec<SufficiencyReport>,
    pub aggregate: Option<SufficiencyReport>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportOutcome {
    pub path: PathBuf,
    pub missing: Vec<String>,
}

impl ReportOutcome {
    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }

    pub fn exit_code(&self) -> i32 {
        if self.is_complete() {
            0
        } else {
            PARTIAL_EXIT_CODE
        }
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn sorted_entries(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).collect())
        .unwrap_or_default();
    v.sort();
    v
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Option<Result<T>> {
    if !path.exists() {
        return None;
    }
    Some(
        std::fs::read(path)
            .map_err(|e| Error::io(path, e))
            .and_then(|b| serde_json::from_slice(&b).map_err(Error::from)),
    )
}

fn load_attrs(run: &Path) -> Result<Vec<AttributeSet>> {
    let mut out = Vec::new();
    for p in sorted_entries(&run.join("attrs")) {
        if p.extension().and_then(|e| e.to_str()) == Some("json") {
            if let Some(a) = read_json::<AttributeSet>(&p) {
                out.push(a?);
            }
        }
    }
    out.sort_by_key(|a| a.target_class);
    Ok(out)
}

const STYLE: &str = "body{font-family:sans-serif;margin:2em;max-width:70em}\
figure{display:inline-block;margin:0.5em;vertical-align:top}\
figcaption{font-size:0.85em}\
table{border-collapse:collapse}td,th{border:1px solid #999;padding:0.2em 0.6em;text-align:right}\
th:first-child,td:first-child{text-align:left}\
.missing{color:#a00;font-weight:bold}pre{background:#f4f4f4;padding:0.5em;overflow-x:auto}";

fn missing(html: &mut String, missing: &mut Vec<String>, what: &str) {
    let _ = writeln!(html, "<p class=\"missing\">missing section: {}</p>", esc(what));
    missing.push(what.to_string());
}

fn table_html(t: &AblationTable) -> String {
    let mut h = String::from("<table>\n<tr><th>Dataset</th>");
    for c in crate::eval::TABLE_COLUMNS {
        let _ = write!(h, "<th>{}</th>", esc(c));
    }
    h.push_str("</tr>\n");
    for r in &t.rows {
        let _ = write!(h, "<tr><td>{}</td>", esc(&r.name));
        for v in [r.wu, r.no_cst, r.cst] {
            let cell = v.map(|x| format!("{:.1}%", 100.0 * x)).unwrap_or_else(|| "-".into());
            let _ = write!(h, "<td>{cell}</td>");
        }
        h.push_str("</tr>\n");
    }
    h.push_str("</table>\n");
    h
}

/// Lays out `report.html` from the artifacts in `run`. Never computes numbers
/// itself; absent inputs become explicit "missing section" placeholders.
pub fn emit_html_report(run: &Path) -> Result<ReportOutcome> {
    let mut html = String::new();
    let mut gaps = Vec::new();
    html.push_str("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Counterfactual explanation report</title>");
    let _ = writeln!(html, "<style>{STYLE}</style></head><body>");
    html.push_str("<h1>Counterfactual explanation report</h1>\n");

    html.push_str("<h2 id=\"sufficiency\">Flip fraction</h2>\n");
    let ablation = read_json::<AblationTable>(&run.join("tables/ablation.json")).transpose()?;
    let summary = read_json::<SufficiencySummary>(&run.join("tables/sufficiency.json")).transpose()?;
    let table = match (&ablation, &summary) {
        (Some(t), _) => Some(t.clone()),
        (None, Some(s)) => s.aggregate.as_ref().map(|agg| {
            let run = crate::eval::SelectorRun {
                selector: agg.selector.clone(),
                stats: StyleStats::new(vec![], vec![], 0).expect("empty stats"),
                attrs: vec![],
                reports: s.reports.clone(),
                aggregate: Some(agg.clone()),
            };
            let (wu, cst) = if agg.selector == "wu" { (Some(&run), None) } else { (None, Some(&run)) };
            AblationTable::from_runs(&s.dataset, agg.k_max, wu, None, cst)
        }),
        (None, None) => None,
    };
    match table {
        Some(t) => {
            let _ = writeln!(
                html,
                "<p>Fraction of images whose prediction flips to the target class when up to {} attributes are changed \
                 (greedy subset selection, {} images).</p>",
                t.k_max, t.num_images
            );
            html.push_str(&table_html(&t));
            if let Some(s) = &summary {
                html.push_str("<table>\n<tr><th>Target class</th><th>Images</th><th>Flip fraction by budget k = 0..k_max</th></tr>\n");
                for r in &s.reports {
                    let per: Vec<String> = r.per_k_fractions.iter().map(|v| format!("{v:.3}")).collect();
                    let _ = writeln!(
                        html,
                        "<tr><td>{}</td><td>{}</td><td>{}</td></tr>",
                        r.target_class.map(|c| c.to_string()).unwrap_or_else(|| "all".into()),
                        r.num_images,
                        per.join(" ")
                    );
                }
                html.push_str("</table>\n");
            }
        }
        None => missing(&mut html, &mut gaps, "tables/sufficiency.json"),
    }

    html.push_str("<h2 id=\"attributes\">Attributes per class</h2>\n");
    let attrs = load_attrs(run)?;
    if attrs.is_empty() {
        missing(&mut html, &mut gaps, "attrs/class_<y>.json");
    }
    for a in &attrs {
        let _ = writeln!(
            html,
            "<h3 id=\"class-{y}\">Class {y} ({} attributes, selector {}, t={}, alpha={})</h3>",
            a.len(),
            esc(&a.selector),
            a.t,
            a.alpha,
            y = a.target_class
        );
        if a.is_empty() {
            html.push_str("<p>No classifier-affecting coordinates were found for this class.</p>\n");
        }
        for attr in &a.attributes {
            let rel = format!("strips/class_{}/attr_{}.png", a.target_class, attr.rank);
            if run.join(&rel).exists() {
                let _ = writeln!(
                    html,
                    "<figure><img src=\"{rel}\" alt=\"attribute {rank}\"><figcaption>#{rank}: layer {l}, channel {c}, direction {d:+}, mean logit change {m:.3}</figcaption></figure>",
                    rank = attr.rank,
                    l = attr.coord.layer,
                    c = attr.coord.channel,
                    d = attr.direction.as_i8(),
                    m = attr.mean_delta
                );
                let gif = format!("strips/class_{}/attr_{}.gif", a.target_class, attr.rank);
                if run.join(&gif).exists() {
                    let _ = writeln!(html, "<a href=\"{gif}\">animation</a>");
                }
            } else {
                missing(&mut html, &mut gaps, &rel);
            }
        }
    }

    html.push_str("<h2 id=\"explanations\">Per-image explanations</h2>\n");
    let mut panels = 0;
    for p in sorted_entries(&run.join("explanations")) {
        let Some(name) = p.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(stem) = name.strip_suffix(".json") else { continue };
        let side: crate::explain::CounterfactualSidecar = match read_json(&p) {
            Some(r) => r?,
            None => continue,
        };
        let panel = format!("explanations/{stem}.png");
        if !run.join(&panel).exists() {
            missing(&mut html, &mut gaps, &panel);
            continue;
        }
        let applied: Vec<String> = side
            .applied
            .iter()
            .map(|a| format!("({}, {}, {:+})", a.coord.layer, a.coord.channel, a.direction.as_i8()))
            .collect();
        let _ = writeln!(
            html,
            "<figure><img src=\"{panel}\" alt=\"{s}\"><figcaption>{s}: class {y} probability {pb} to {pa}{flip}; applied {ap}</figcaption></figure>",
            s = esc(stem),
            y = side.target_class,
            pb = font::format_prob(side.prob_before),
            pa = font::format_prob(side.prob_after),
            flip = if side.flipped { " (flipped)" } else { "" },
            ap = if applied.is_empty() { "nothing".into() } else { applied.join(" ") }
        );
        panels += 1;
    }
    if panels == 0 {
        missing(&mut html, &mut gaps, "explanations/");
    }

    html.push_str("<h2 id=\"config\">Config</h2>\n");
    match std::fs::read_to_string(run.join("config.json")) {
        Ok(c) => {
            let _ = writeln!(html, "<pre>{}</pre>", esc(c.trim_end()));
        }
        Err(_) => missing(&mut html, &mut gaps, "config.json"),
    }
    html.push_str("</body></html>\n");
    let path = run.join("report.html");
    write_atomic(&path, html.as_bytes())?;
    Ok(ReportOutcome { path, missing: gaps })
}

/// Relative `src`/`href` targets in an HTML file that do not exist on disk.
pub fn broken_links(html_path: &Path) -> Result<Vec<String>> {
    let html = std::fs::read_to_string(html_path).map_err(|e| Error::io(html_path, e))?;
    let base = html_path.parent().unwrap_or_else(|| Path::new("."));
    let mut broken = Vec::new();
    for attr in ["src=\"", "href=\""] {
        let mut rest = html.as_str();
        while let Some(i) = rest.find(attr) {
            rest = &rest[i + attr.len()..];
            let end = rest.find('"').unwrap_or(rest.len());
            let target = &rest[..end];
            if !target.contains("://") && !target.starts_with('#') && !base.join(target).exists() {
                broken.push(target.to_string());
            }
            rest = &rest[end..];
        }
    }
    Ok(broken)
}

/// Every `<img src>` target in an HTML file.
pub fn image_links(html_path: &Path) -> Result<Vec<String>> {
    let html = std::fs::read_to_string(html_path).map_err(|e| Error::io(html_path, e))?;
    Ok(html
        .split("<img src=\"")
        .skip(1)
        .filter_map(|s| s.split('"').next())
        .map(str::to_string)
        .collect())
}
