//! `stylecf`: dataset generation, training, attribute discovery, explanation,
//! evaluation and reporting.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 partial report.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use stylecf_core::artifact::write_effective_config;
use stylecf_core::attfind::AttributeSet;
use stylecf_core::eval::EvalConfig;
use stylecf_core::explain::{independent_topk, subset_greedy, DEFAULT_K_MAX};
use stylecf_core::image::Image;
use stylecf_core::losses::LossWeights;
use stylecf_core::models::{BundleSpec, ClassifierSpec, ModelBundle};
use stylecf_core::oracle_check;
use stylecf_core::pipeline::{self, GanStepConfig, RunConfig, VisualsConfig};
use stylecf_core::report::{broken_links, save_explanation};
use stylecf_core::training::{ClassifierTrainConfig, TrainConfig};
use stylecf_core::worlds::shapes::{ClassRule, ShapesDatasetConfig};
use stylecf_core::StyleModel;
use tracing::info;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

/// Environment variable naming the compute device. Only `cpu` is supported.
const DEVICE_ENV: &str = "STYLECF_DEVICE";

#[derive(Parser, Debug)]
#[command(name = "stylecf", version, about = "Classifier-specific counterfactual explanations in StyleSpace")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a procedural shapes dataset.
    MakeDataset(MakeDatasetArgs),
    /// Train the frozen classifier that will be explained.
    TrainClassifier(TrainClassifierArgs),
    /// Train generator, encoder and discriminator against a frozen classifier.
    TrainGan(TrainGanArgs),
    /// Discover per-class attributes.
    Attfind(AttfindArgs),
    /// Explain one image.
    Explain(ExplainArgs),
    /// Flip fraction of a run's attributes on held-out images.
    EvalSufficiency(EvalArgs),
    /// Select attributes by value difference between classes instead of by intervention.
    BaselineWu(AttfindArgs),
    /// Baseline, no-CST and CST flip fractions side by side.
    AblationCompare(AblationArgs),
    /// Run every oracle-world property suite.
    OracleCheck(OracleArgs),
    /// Build strips and explanations, then emit report.html.
    Report(ReportArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Rule {
    Hue,
    Patch,
    HueBins,
}

#[derive(Args, Debug, Serialize)]
struct MakeDatasetArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_enum, default_value = "hue")]
    #[serde(skip)]
    rule: Rule,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 5000)]
    num_images: usize,
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    #[arg(long, default_value_t = 0.0)]
    confound: f64,
    #[arg(long, default_value_t = 0.2)]
    heldout_fraction: f64,
    /// Side of the square marker patch, at most half the resolution.
    #[arg(long, default_value_t = 5)]
    patch_size: usize,
    #[arg(long, default_value = "shapes")]
    name: String,
}

#[derive(Args, Debug)]
struct TrainClassifierArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    /// Comma-separated block channels.
    #[arg(long, value_delimiter = ',', default_value = "16,32,32,32")]
    channels: Vec<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Args, Debug)]
struct TrainGanArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Train without the classifier condition and classifier loss.
    #[arg(long)]
    no_cst: bool,
    #[arg(long)]
    cls_weight: Option<f64>,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    reg_interval: u64,
    #[arg(long, default_value_t = 1000)]
    checkpoint_every: u64,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
}

#[derive(Args, Debug)]
struct AttfindArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    class: Option<usize>,
    #[arg(long = "M", default_value_t = 10)]
    m: usize,
    #[arg(long, default_value_t = 1.0)]
    t: f64,
    #[arg(long, default_value_t = 3.0)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_K_MAX)]
    k_max: usize,
    /// Discovery images per target class.
    #[arg(long, default_value_t = 256)]
    num_images: usize,
    #[arg(long, default_value_t = 256)]
    num_eval: usize,
    /// Ignore interventions the discriminator scores below this realness.
    #[arg(long)]
    discriminator_filter: Option<f64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Strategy {
    Subset,
    Independent,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Run directory holding attrs/ and stats.json.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    class: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K_MAX)]
    k_max: usize,
    #[arg(long, value_enum, default_value = "subset")]
    strategy: Strategy,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args, Debug)]
struct AblationArgs {
    #[arg(long)]
    cst: PathBuf,
    #[arg(long)]
    no_cst_bundle: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long = "M", default_value_t = 10)]
    m: usize,
    #[arg(long, default_value_t = 1.0)]
    t: f64,
    #[arg(long, default_value_t = 3.0)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_K_MAX)]
    k_max: usize,
    #[arg(long, default_value_t = 256)]
    num_images: usize,
    #[arg(long, default_value_t = 256)]
    num_eval: usize,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the results as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
    /// With a bundle and dataset, strips and explanations are rendered first.
    #[arg(long, requires = "dataset")]
    bundle: Option<PathBuf>,
    #[arg(long, requires = "bundle")]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    strips: usize,
    #[arg(long, default_value_t = 6)]
    explanations: usize,
    /// Also write two-frame GIFs.
    #[arg(long)]
    gif: bool,
}

fn command_line() -> String {
    std::env::args().skip(1).collect::<Vec<_>>().join(" ")
}

fn check_device() -> anyhow::Result<()> {
    match std::env::var(DEVICE_ENV) {
        Ok(d) if !d.eq_ignore_ascii_case("cpu") => bail!("{DEVICE_ENV}={d} is not supported; only cpu is available"),
        _ => Ok(()),
    }
}

fn usage_error(msg: &str) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(EXIT_USAGE)
}

fn eval_config(a: &AttfindArgs) -> RunConfig {
    RunConfig {
        eval: EvalConfig {
            m: a.m,
            t: a.t,
            alpha: a.alpha,
            k_max: a.k_max,
            num_images: a.num_images,
            discriminator_min_realness: a.discriminator_filter,
        },
        num_eval_images: a.num_eval,
        seed: a.seed,
        class: a.class,
    }
}

fn validate_eval(c: &RunConfig) -> Result<(), String> {
    c.eval.attfind().validate().map_err(|e| e.to_string())?;
    if c.eval.k_max == 0 {
        return Err("--k-max must be >= 1".into());
    }
    Ok(())
}

fn load_bundle(dir: &Path) -> anyhow::Result<ModelBundle> {
    ModelBundle::load(dir).with_context(|| format!("loading bundle from {}", dir.display()))
}

fn run(cmd: Command) -> anyhow::Result<u8> {
    let line = command_line();
    match cmd {
        Command::MakeDataset(a) => {
            let class_rule = match a.rule {
                Rule::Hue => ShapesDatasetConfig::default().class_rule,
                Rule::Patch => ClassRule::Patch,
                Rule::HueBins => ClassRule::HueBins { num_classes: a.classes },
            };
            let cfg = ShapesDatasetConfig {
                num_images: a.num_images,
                resolution: a.resolution,
                class_rule,
                confound_strength: a.confound,
                heldout_fraction: a.heldout_fraction,
                patch_size: a.patch_size,
                ..ShapesDatasetConfig::default()
            };
            let d = pipeline::make_dataset(&a.out, &a.name, &cfg, a.seed, &line)?;
            info!(images = d.data.len(), out = %a.out.display(), "dataset written");
        }
        Command::TrainClassifier(a) => {
            let cfg = ClassifierTrainConfig {
                spec: ClassifierSpec {
                    channels: a.channels,
                    ..ClassifierSpec::default()
                },
                epochs: a.epochs,
                batch_size: a.batch_size,
                lr: a.lr,
                seed: a.seed,
            };
            let (c, ok) = pipeline::train_classifier_step(&a.dataset, &a.out, &cfg, &line)?;
            println!("held-out accuracy: {:.4}", c.heldout_accuracy.unwrap_or(f64::NAN));
            if !ok {
                bail!("classifier is below the accuracy gate; generator training will refuse it");
            }
        }
        Command::TrainGan(a) => {
            let spec = match a.preset {
                Preset::Desk => BundleSpec::desk_cpu(),
                Preset::Full => BundleSpec::default(),
            };
            let weights = LossWeights {
                w_cls: if a.no_cst { 0.0 } else { a.cls_weight.unwrap_or(1.0) },
                ..LossWeights::default()
            };
            let cfg = GanStepConfig {
                spec,
                train: TrainConfig {
                    steps: a.steps,
                    batch_size: a.batch_size,
                    lr_ge: a.lr,
                    lr_d: a.lr,
                    weights,
                    cst_enabled: !a.no_cst,
                    seed: a.seed,
                    checkpoint_every: a.checkpoint_every,
                    reg_interval: a.reg_interval,
                },
            };
            let b = pipeline::train_gan_step(&a.dataset, &a.classifier, &a.out, &cfg, &line)?;
            info!(steps = b.training_step, out = %a.out.display(), "bundle written");
        }
        Command::Attfind(a) | Command::BaselineWu(a) => {
            let selector = if line.starts_with("baseline-wu") { "wu" } else { "attfind" };
            let cfg = eval_config(&a);
            let bundle = load_bundle(&a.bundle)?;
            let (data, _) = pipeline::load_dataset(&a.dataset)?;
            let sets = pipeline::attfind_step(&bundle, &data, &a.out, &cfg, selector, &line)?;
            for s in &sets {
                println!("class {}: {} attributes ({:?})", s.target_class, s.len(), s.stop_reason);
            }
        }
        Command::Explain(a) => {
            let bundle = load_bundle(&a.bundle)?;
            let (attrs, stats) = pipeline::load_attrs(&a.run)?;
            let set: &AttributeSet = attrs
                .iter()
                .find(|s| s.target_class == a.class)
                .with_context(|| format!("no attribute set for class {} in {}", a.class, a.run.display()))?;
            let image = Image::load_png(&a.image)?;
            let styles = bundle.capture_styles(std::slice::from_ref(&image))?.remove(0);
            write_effective_config(
                &a.out.join("config.json"),
                &line,
                &serde_json::json!({"class": a.class, "k_max": a.k_max, "image": a.image}),
            )?;
            let stem = a.image.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
            match a.strategy {
                Strategy::Subset => {
                    let r = subset_greedy(&bundle, &styles, set, a.k_max, &stats)?;
                    save_explanation(&a.out, &stem, &r, None)?;
                    println!("flipped: {} with {} attributes", r.flipped, r.applied.len());
                }
                Strategy::Independent => {
                    let k = a.k_max.min(set.len());
                    for (attr, d) in independent_topk(&bundle, &styles, set, k, &stats)? {
                        println!(
                            "rank {} layer {} channel {} direction {:+}: logit change {d:.4}",
                            attr.rank,
                            attr.coord.layer,
                            attr.coord.channel,
                            attr.direction.as_i8()
                        );
                    }
                }
            }
        }
        Command::EvalSufficiency(a) => {
            let bundle = load_bundle(&a.bundle)?;
            let (data, info) = pipeline::load_dataset(&a.dataset)?;
            let s = pipeline::eval_step(&bundle, &data, &a.run, &info.name, &line)?;
            for r in &s.reports {
                println!(
                    "class {:?}: flip fraction {:.3} over {} images",
                    r.target_class, r.flip_fraction, r.num_images
                );
            }
            if let Some(agg) = &s.aggregate {
                println!("all classes: flip fraction {:.3} over {} images", agg.flip_fraction, agg.num_images);
            }
        }
        Command::AblationCompare(a) => {
            let cfg = RunConfig {
                eval: EvalConfig {
                    m: a.m,
                    t: a.t,
                    alpha: a.alpha,
                    k_max: a.k_max,
                    num_images: a.num_images,
                    discriminator_min_realness: None,
                },
                num_eval_images: a.num_eval,
                seed: a.seed,
                class: None,
            };
            let cst = load_bundle(&a.cst)?;
            let no_cst = load_bundle(&a.no_cst_bundle)?;
            let (data, info) = pipeline::load_dataset(&a.dataset)?;
            let (table, _) = pipeline::ablation_step(&cst, &no_cst, &data, &a.out, &info.name, &cfg, &line)?;
            print!("{}", table.render_text());
        }
        Command::OracleCheck(a) => {
            let results = oracle_check::run_all(a.seed)?;
            let mut all = true;
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                all &= r.passed;
            }
            if let Some(out) = &a.out {
                stylecf_core::models::checkpoint::write_json_atomic(out, &results)?;
            }
            if !all {
                bail!("oracle checks failed");
            }
        }
        Command::Report(a) => {
            if let (Some(b), Some(d)) = (&a.bundle, &a.dataset) {
                let bundle = load_bundle(b)?;
                let (data, _) = pipeline::load_dataset(d)?;
                let visuals = VisualsConfig {
                    strip_count: a.strips,
                    num_explanations: a.explanations,
                    gif: a.gif,
                };
                pipeline::build_visuals(&bundle, &data, &a.run, &visuals, &line)?;
            }
            let out = pipeline::report_step(&a.run)?;
            let broken = broken_links(&out.path)?;
            println!("{}", out.path.display());
            for m in &out.missing {
                println!("missing: {m}");
            }
            for l in &broken {
                println!("broken link: {l}");
            }
            if !out.is_complete() || !broken.is_empty() {
                return Ok(EXIT_PARTIAL);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    if let Command::TrainGan(a) = &cli.command {
        if a.no_cst && a.cls_weight.is_some_and(|w| w > 0.0) {
            return usage_error("--no-cst conflicts with --cls-weight > 0");
        }
    }
    if let Command::Attfind(a) | Command::BaselineWu(a) = &cli.command {
        if let Err(msg) = validate_eval(&eval_config(a)) {
            return usage_error(&msg);
        }
    }
    if let Err(e) = check_device() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_RUNTIME);
    }
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
