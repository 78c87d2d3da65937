//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::cam::{BiasMode, CamRequest, ChannelBiasForm, LayerSelection, Method, SmoothKind};
use crate::error::{Error, Result};
use crate::heatmap::Heatmap;
use crate::layer_score::{score_layers, LayerScoreReport};
use crate::model::{build_fixture_model, Model};
use crate::perturb::PerturbationConfig;
use crate::pipeline::{self, EvalConfig, ExplainConfig, Explanation};
use crate::render::{hstack, overlay, read_ppm, write_pgm, write_ppm, Colormap, ImageGray, ImageRgb};
use crate::tensor::Tensor;
use crate::verify::{self, Fault};
use crate::weights::{load_model, save_model};

/// Overlay blend factor for rendered outputs.
pub const OVERLAY_BLEND: f64 = 0.5;

#[derive(Debug, Parser)]
#[command(name = "icam", version, about = "Integrative class activation maps for a small CNN")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a heatmap, an overlay and a JSON sidecar for one image.
    Explain(ExplainArgs),
    /// Score every scoring point and print the ranked table.
    ScoreLayers(ExplainArgs),
    /// Evaluate localization against bounding boxes from a JSON-lines manifest.
    Eval(EvalArgs),
    /// Run all four methods on one image and write a side-by-side strip.
    Compare(ExplainArgs),
    /// Check derivative identities and divergence formulas on the fixture.
    Verify(VerifyArgs),
    /// Write the seeded fixture model in ICAMW001 format.
    MakeFixture(MakeFixtureArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// ICAMW001 weight file; the seeded fixture when omitted.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Seed of the built-in fixture used when --model is absent.
    #[arg(long, default_value_t = 42)]
    pub fixture_seed: u64,
}

impl ModelArgs {
    fn load(&self) -> Result<Model> {
        match &self.model {
            Some(path) => load_model(path),
            None => Ok(build_fixture_model(self.fixture_seed)),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Binary PPM input; a seeded synthetic image when omitted.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::ICam)]
    pub method: Method,
    /// Smooth function; the method's default when omitted.
    #[arg(long, value_enum)]
    pub smooth: Option<SmoothKind>,
    /// Bias term of the integrative method.
    #[arg(long, value_enum, default_value_t = BiasMode::Channel)]
    pub bias: BiasMode,
    #[arg(long, value_enum, default_value_t = ChannelBiasForm::ProductOfSums)]
    pub channel_bias_form: ChannelBiasForm,
    #[arg(long, default_value_t = 8)]
    pub n_perturb: usize,
    #[arg(long, default_value_t = 0.4)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.95)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0.2)]
    pub iou_threshold_frac: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Explicit layer (repeatable); `final` names the last scoring point.
    #[arg(long = "layer")]
    pub layers: Vec<String>,
    /// Class to explain; the predicted class when omitted.
    #[arg(long)]
    pub class: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub explain: ExplainArgs,
    /// JSON-lines manifest of {"image", "bbox", "label"} records.
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Clone, Args)]
pub struct MakeFixtureArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn load_image(args: &ExplainArgs, model: &Model) -> Result<(Tensor, ImageRgb)> {
    let [c, h, w] = model.input_shape();
    let tensor = match &args.image {
        Some(path) => read_ppm(path)?.to_tensor(),
        None => pipeline::synthetic_image(c, h, w, args.seed),
    };
    if tensor.shape() != [c, h, w] {
        return Err(Error::Shape(format!(
            "image shape {:?} does not match model input {:?}",
            tensor.shape(),
            [c, h, w]
        )));
    }
    let rgb = ImageRgb::from_tensor(&tensor)?;
    Ok((tensor, rgb))
}

fn explain_config(args: &ExplainArgs, model: &Model) -> Result<ExplainConfig> {
    let perturbation = PerturbationConfig {
        n: args.n_perturb,
        alpha: args.alpha,
        seed: args.seed,
    };
    perturbation.validate()?;
    if !(args.threshold > 0.0 && args.threshold <= 1.0) {
        return Err(Error::Config(format!("threshold {} outside (0, 1]", args.threshold)));
    }
    let final_point = model.spec().final_scoring_point().unwrap_or_default().to_string();
    let layers = if args.layers.is_empty() {
        LayerSelection::Automatic
    } else {
        LayerSelection::Explicit(
            args.layers
                .iter()
                .map(|l| if l == "final" { final_point.clone() } else { l.clone() })
                .collect(),
        )
    };
    Ok(ExplainConfig {
        request: CamRequest {
            method: args.method,
            smooth: args.smooth.unwrap_or(args.method.default_smooth()),
            bias: if args.method == Method::ICam { args.bias } else { BiasMode::None },
            channel_bias_form: args.channel_bias_form,
            layers,
        },
        perturbation,
        threshold: args.threshold,
        class_index: args.class,
    })
}

#[derive(Serialize)]
struct LayerWeight {
    name: String,
    weight: f64,
}

#[derive(Serialize)]
struct ConfigEcho {
    model: Option<PathBuf>,
    fixture_seed: u64,
    image: Option<PathBuf>,
    n_perturb: usize,
    alpha: f64,
    threshold: f64,
    seed: u64,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    method: Method,
    smooth: SmoothKind,
    bias: BiasMode,
    channel_bias_form: ChannelBiasForm,
    class_index: usize,
    probability: f64,
    logit: f64,
    layers: Vec<LayerWeight>,
    #[serde(skip_serializing_if = "Option::is_none")]
    layer_scores: Option<&'a LayerScoreReport>,
    config: ConfigEcho,
}

fn write_json(value: &impl Serialize, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::from(e).at(path))
}

fn write_heatmap_outputs(heatmap: &Heatmap, rgb: &ImageRgb, dir: &Path, prefix: &str) -> Result<ImageRgb> {
    let pgm = dir.join(format!("{prefix}heatmap.pgm"));
    write_pgm(&ImageGray::from_heatmap(heatmap), &pgm)?;
    let over = overlay(rgb, heatmap, OVERLAY_BLEND, &Colormap::default())?;
    write_ppm(&over, dir.join(format!("{prefix}overlay.ppm")))?;
    Ok(over)
}

fn sidecar<'a>(args: &ExplainArgs, config: &ExplainConfig, e: &'a Explanation) -> Sidecar<'a> {
    Sidecar {
        method: config.request.method,
        smooth: config.request.smooth,
        bias: config.request.bias,
        channel_bias_form: config.request.channel_bias_form,
        class_index: e.class_index,
        probability: e.probability,
        logit: e.logit,
        layers: e
            .layers
            .iter()
            .map(|(name, weight)| LayerWeight {
                name: name.clone(),
                weight: *weight,
            })
            .collect(),
        layer_scores: e.layer_scores.as_ref(),
        config: ConfigEcho {
            model: args.model.model.clone(),
            fixture_seed: args.model.fixture_seed,
            image: args.image.clone(),
            n_perturb: config.perturbation.n,
            alpha: config.perturbation.alpha,
            threshold: config.threshold,
            seed: config.perturbation.seed,
        },
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::from(e).at(dir))
}

pub fn cmd_explain(args: &ExplainArgs) -> Result<()> {
    let model = args.model.load()?;
    let (image, rgb) = load_image(args, &model)?;
    let config = explain_config(args, &model)?;
    let e = pipeline::explain(&model, &image, &config)?;
    create_dir(&args.out_dir)?;
    write_heatmap_outputs(&e.heatmap, &rgb, &args.out_dir, "")?;
    write_json(&sidecar(args, &config, &e), &args.out_dir.join("explanation.json"))?;
    println!(
        "class {} (p = {:.4}), method {}, layers {}",
        e.class_index,
        e.probability,
        config.request.method.name(),
        e.layers.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join(",")
    );
    Ok(())
}

pub fn cmd_score_layers(args: &ExplainArgs) -> Result<()> {
    let model = args.model.load()?;
    let (image, _) = load_image(args, &model)?;
    let config = explain_config(args, &model)?;
    let (report, _) = score_layers(&model, &image, &config.perturbation, config.threshold, config.class_index)?;
    create_dir(&args.out_dir)?;
    write_json(&report, &args.out_dir.join("layer_scores.json"))?;
    let mut ranked = report.ordered_scores.clone();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    println!("{:<12} {:>14} {:>9} {:>10}", "layer", "score", "selected", "weight");
    for (name, score) in ranked {
        let weight = report.weights.get(&name);
        println!(
            "{:<12} {:>14.6e} {:>9} {:>10}",
            name,
            score,
            if weight.is_some() { "yes" } else { "no" },
            weight.map_or("-".to_string(), |w| format!("{w:.4}"))
        );
    }
    Ok(())
}

pub fn cmd_compare(args: &ExplainArgs) -> Result<()> {
    let model = args.model.load()?;
    let (image, rgb) = load_image(args, &model)?;
    let config = explain_config(args, &model)?;
    let results = pipeline::compare(&model, &image, &config)?;
    create_dir(&args.out_dir)?;
    let mut overlays = Vec::with_capacity(results.len());
    for (method, e) in &results {
        overlays.push(write_heatmap_outputs(&e.heatmap, &rgb, &args.out_dir, &format!("{}_", method.name()))?);
    }
    write_ppm(&hstack(&overlays)?, args.out_dir.join("strip.ppm"))?;
    for (method, e) in &results {
        println!("{:<10} class {} layers {}", method.name(), e.class_index, e.layers.len());
    }
    Ok(())
}

/// Worker count from `ICAM_THREADS`; unset, empty or 0 means sequential.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("ICAM_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("ICAM_THREADS must be a non-negative integer, got `{v}`"))),
        _ => Ok(0),
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let model = args.explain.model.load()?;
    let base = explain_config(&args.explain, &model)?;
    let text = fs::read_to_string(&args.manifest).map_err(|e| Error::from(e).at(&args.manifest))?;
    let dir = args.manifest.parent().unwrap_or(Path::new("."));
    let records = pipeline::parse_manifest(&text, dir).map_err(|e| e.at(&args.manifest))?;
    let config = EvalConfig {
        base,
        iou_threshold_frac: args.explain.iou_threshold_frac,
        threads: threads_from_env()?,
        ..EvalConfig::default()
    };
    let report = pipeline::eval(&model, &records, &config)?;
    create_dir(&args.explain.out_dir)?;
    write_json(&report, &args.explain.out_dir.join("eval.json"))?;
    println!("records {} correct {} accuracy {:.4}", report.records, report.correct, report.accuracy);
    for (name, s) in &report.methods {
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        println!("{name:<10} mean IoU {} mean saliency {}", fmt(s.mean_iou), fmt(s.mean_saliency));
    }
    Ok(())
}

/// Runs the verification suites; `Ok(false)` when any check failed.
pub fn cmd_verify(args: &VerifyArgs) -> Result<bool> {
    let model = args.model.load()?;
    let fault = if args.inject_fault { Fault::FlipSecondDerivative } else { Fault::None };
    let report = verify::run_all(&model, args.seed, fault)?;
    for s in &report.suites {
        println!(
            "{} {:<20} checks {:>5} worst error {:.3e} (tolerance {:.0e})",
            if s.passed { "PASS" } else { "FAIL" },
            s.name,
            s.checks,
            s.worst_error,
            s.tolerance
        );
        for f in &s.failures {
            println!("    {f}");
        }
    }
    Ok(report.passed)
}

pub fn cmd_make_fixture(args: &MakeFixtureArgs) -> Result<()> {
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_model(&build_fixture_model(args.seed), &args.out)
}

/// Dispatches a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Explain(a) => cmd_explain(&a).map(|_| 0),
        Command::ScoreLayers(a) => cmd_score_layers(&a).map(|_| 0),
        Command::Eval(a) => cmd_eval(&a).map(|_| 0),
        Command::Compare(a) => cmd_compare(&a).map(|_| 0),
        Command::Verify(a) => cmd_verify(&a).map(|ok| if ok { 0 } else { 1 }),
        Command::MakeFixture(a) => cmd_make_fixture(&a).map(|_| 0),
    }
}
