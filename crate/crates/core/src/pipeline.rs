//! End-to-end explanation, comparison and bounding-box evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cam::{self, CamRequest, LayerSelection, Method};
use crate::error::{Error, Result};
use crate::heatmap::Heatmap;
use crate::layer_score::{score_layers, LayerScoreReport, DEFAULT_THRESHOLD};
use crate::metrics::{iou, saliency_score, threshold_heatmap, BinaryMask, DEFAULT_IOU_THRESHOLD_FRAC};
use crate::model::{Model, ScalarKind};
use crate::perturb::PerturbationConfig;
use crate::render::read_ppm;
use crate::rng::Prng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainConfig {
    pub request: CamRequest,
    pub perturbation: PerturbationConfig,
    /// Cumulative-score threshold for automatic layer selection.
    pub threshold: f64,
    /// Class to explain; the predicted class when `None`.
    pub class_index: Option<usize>,
}

impl ExplainConfig {
    pub fn new(method: Method) -> Self {
        Self {
            request: CamRequest::new(method),
            perturbation: PerturbationConfig::default(),
            threshold: DEFAULT_THRESHOLD,
            class_index: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    /// Min-max normalized map at input resolution.
    pub heatmap: Heatmap,
    pub class_index: usize,
    pub probability: f64,
    pub logit: f64,
    /// Layers that contributed, with their fusion weights.
    pub layers: Vec<(String, f64)>,
    /// Present when layers were chosen automatically by importance scoring.
    pub layer_scores: Option<LayerScoreReport>,
}

fn resolve_layers(model: &Model, request: &CamRequest) -> Result<Vec<(String, f64)>> {
    let names: Vec<String> = match &request.layers {
        LayerSelection::Explicit(names) => {
            if names.is_empty() {
                return Err(Error::EmptySelection);
            }
            names.clone()
        }
        LayerSelection::Automatic => vec![model
            .spec()
            .final_scoring_point()
            .ok_or_else(|| Error::ModelSpec("model has no scoring points".into()))?
            .to_string()],
    };
    for n in &names {
        if !model.scoring_points().contains(n) {
            return Err(Error::UnknownLayer(n.clone()));
        }
    }
    let w = 1.0 / names.len() as f64;
    Ok(names.into_iter().map(|n| (n, w)).collect())
}

/// Produces one heatmap for `image` as described by `config`.
///
/// The integrative method with automatic layers scores every scoring point
/// through perturbations and fuses the selected ones by importance. Every
/// other combination fuses the requested layers (the final one by default)
/// with equal weights.
pub fn explain(model: &Model, image: &Tensor, config: &ExplainConfig) -> Result<Explanation> {
    let request = &config.request;
    let [_, height, width] = model.input_shape();
    let (layers, report, class) = if request.method == Method::ICam && request.layers == LayerSelection::Automatic {
        let (report, original) = score_layers(model, image, &config.perturbation, config.threshold, config.class_index)?;
        let layers = report.ordered_weights.clone();
        (layers, Some(report), Some(original.class_index))
    } else {
        (resolve_layers(model, request)?, None, config.class_index)
    };
    let trace = model.forward_trace(image, class, ScalarKind::Logit)?;
    let mut maps = Vec::with_capacity(layers.len());
    for (name, _) in &layers {
        maps.push((name.clone(), cam::layer_map(request, &trace, name)?));
    }
    let heatmap = cam::fuse(&maps, &layers, height, width)?;
    Ok(Explanation {
        heatmap,
        class_index: trace.class_index,
        probability: trace.class_probability(),
        logit: trace.class_logit(),
        layers,
        layer_scores: report,
    })
}

/// Explains the same image with every method, each at its own defaults
/// except for the shared perturbation settings and class.
pub fn compare(model: &Model, image: &Tensor, base: &ExplainConfig) -> Result<Vec<(Method, Explanation)>> {
    Method::ALL
        .iter()
        .map(|&method| {
            let mut config = base.clone();
            config.request = CamRequest {
                method,
                smooth: method.default_smooth(),
                bias: if method == Method::ICam { base.request.bias } else { cam::BiasMode::None },
                ..base.request.clone()
            };
            explain(model, image, &config).map(|e| (method, e))
        })
        .collect()
}

/// Deterministic test image in `[0, 1]`: a smooth colour gradient with a
/// bright disc whose position depends on `seed`.
pub fn synthetic_image(channels: usize, height: usize, width: usize, seed: u64) -> Tensor {
    let mut rng = Prng::new(seed);
    let cy = 0.25 + 0.5 * rng.next_f64();
    let cx = 0.25 + 0.5 * rng.next_f64();
    let radius = 0.15 + 0.1 * rng.next_f64();
    let tint: Vec<f64> = (0..channels).map(|_| rng.next_f64()).collect();
    let mut data = Vec::with_capacity(channels * height * width);
    for (c, t) in tint.iter().enumerate() {
        for i in 0..height {
            for j in 0..width {
                let y = (i as f64 + 0.5) / height as f64;
                let x = (j as f64 + 0.5) / width as f64;
                let base = 0.2 * (x + y) / 2.0 + 0.1 * ((c + 1) as f64 * x * 3.0).sin().abs();
                let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                let disc = if d2 <= radius * radius { 0.6 * t + 0.3 } else { 0.0 };
                data.push((base + disc).min(1.0));
            }
        }
    }
    Tensor::new(vec![channels, height, width], data).expect("dims match data")
}

/// One line of a JSON-lines evaluation manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image: PathBuf,
    /// Inclusive pixel bounds `[x0, y0, x1, y1]`.
    pub bbox: [usize; 4],
    pub label: usize,
}

/// A manifest record with the 1-based line it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NumberedRecord {
    pub line: usize,
    pub record: ManifestRecord,
}

/// Parses a manifest, skipping blank lines. Relative image paths are
/// resolved against `base_dir`.
pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<Vec<NumberedRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut record: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Manifest {
            line: i + 1,
            reason: e.to_string(),
        })?;
        let [x0, y0, x1, y1] = record.bbox;
        if x0 > x1 || y0 > y1 {
            return Err(Error::Manifest {
                line: i + 1,
                reason: format!("bbox {:?} has inverted bounds", record.bbox),
            });
        }
        if record.image.is_relative() {
            record.image = base_dir.join(&record.image);
        }
        out.push(NumberedRecord { line: i + 1, record });
    }
    if out.is_empty() {
        return Err(Error::EmptyManifest);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordResult {
    pub line: usize,
    pub image: PathBuf,
    pub label: usize,
    pub predicted: usize,
    pub correct: bool,
    /// Per-method IoU, only for correct predictions.
    pub iou: BTreeMap<String, f64>,
    /// Per-method saliency score, only for correct predictions.
    pub saliency: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    /// Mean over correct predictions; `None` when there were none.
    pub mean_iou: Option<f64>,
    pub mean_saliency: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub records: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub iou_threshold_frac: f64,
    pub methods: BTreeMap<String, MethodSummary>,
    pub per_record: Vec<RecordResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub base: ExplainConfig,
    pub methods: Vec<Method>,
    pub iou_threshold_frac: f64,
    /// Worker threads; 0 or 1 runs sequentially.
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            base: ExplainConfig::new(Method::ICam),
            methods: Method::ALL.to_vec(),
            iou_threshold_frac: DEFAULT_IOU_THRESHOLD_FRAC,
            threads: 0,
        }
    }
}

fn evaluate_record(model: &Model, rec: &NumberedRecord, config: &EvalConfig) -> Result<RecordResult> {
    let at_line = |e: Error| match e {
        Error::Manifest { .. } => e,
        other => Error::Manifest {
            line: rec.line,
            reason: other.to_string(),
        },
    };
    let r = &rec.record;
    let image = read_ppm(&r.image).map_err(|e| at_line(e.at(&r.image)))?;
    let tensor = image.to_tensor();
    if r.label >= model.num_classes() {
        return Err(at_line(Error::ClassOutOfRange {
            index: r.label,
            classes: model.num_classes(),
        }));
    }
    let [x0, y0, x1, y1] = r.bbox;
    if x1 >= image.width() || y1 >= image.height() {
        return Err(at_line(Error::Config(format!(
            "bbox {:?} outside {}x{} image",
            r.bbox,
            image.width(),
            image.height()
        ))));
    }
    let bbox = BinaryMask::from_bbox(image.height(), image.width(), [x0, y0, x1, y1]).map_err(at_line)?;
    let predicted = model.logits(&tensor).map_err(at_line)?.argmax();
    let correct = predicted == r.label;
    let mut iou_map = BTreeMap::new();
    let mut sal_map = BTreeMap::new();
    if correct {
        for &method in &config.methods {
            let mut ec = config.base.clone();
            ec.request = CamRequest {
                method,
                smooth: method.default_smooth(),
                bias: if method == Method::ICam { ec.request.bias } else { cam::BiasMode::None },
                ..ec.request
            };
            ec.class_index = Some(predicted);
            let expl = explain(model, &tensor, &ec).map_err(at_line)?;
            let mask = threshold_heatmap(&expl.heatmap, config.iou_threshold_frac).map_err(at_line)?;
            iou_map.insert(method.name().to_string(), iou(&mask, &bbox).map_err(at_line)?);
            sal_map.insert(method.name().to_string(), saliency_score(&expl.heatmap, &bbox).map_err(at_line)?);
        }
    }
    Ok(RecordResult {
        line: rec.line,
        image: r.image.clone(),
        label: r.label,
        predicted,
        correct,
        iou: iou_map,
        saliency: sal_map,
    })
}

/// Evaluates localization on every manifest record. Records may be processed
/// on several threads; results are always aggregated in record order.
pub fn eval(model: &Model, records: &[NumberedRecord], config: &EvalConfig) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let results: Vec<Result<RecordResult>> = if config.threads <= 1 {
        records.iter().map(|r| evaluate_record(model, r, config)).collect()
    } else {
        let chunk = records.len().div_ceil(config.threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = records
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|r| evaluate_record(model, r, config)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let per_record = results.into_iter().collect::<Result<Vec<_>>>()?;
    let correct = per_record.iter().filter(|r| r.correct).count();
    let mut methods = BTreeMap::new();
    for method in &config.methods {
        let name = method.name().to_string();
        let ious: Vec<f64> = per_record.iter().filter_map(|r| r.iou.get(&name).copied()).collect();
        let sals: Vec<f64> = per_record.iter().filter_map(|r| r.saliency.get(&name).copied()).collect();
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        methods.insert(
            name,
            MethodSummary {
                mean_iou: mean(&ious),
                mean_saliency: mean(&sals),
                count: ious.len(),
            },
        );
    }
    Ok(EvalReport {
        records: per_record.len(),
        correct,
        accuracy: correct as f64 / per_record.len() as f64,
        iou_threshold_frac: config.iou_threshold_frac,
        methods,
        per_record,
    })
}
