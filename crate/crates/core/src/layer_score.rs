//! Perturbation-weighted layer importance, cumulative-threshold layer
//! filtering and normalized layer weights.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{Heatmap, Resolution};
use crate::metrics::{perturbation_weight, ProbDist};
use crate::model::{ForwardTrace, Model, ScalarKind};
use crate::perturb::{generate_set, PerturbationConfig};
use crate::render::bilinear_resize;
use crate::tensor::{self, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.95;

/// Gradient-weighted activation `relu(A ⊙ G)` at a scoring point.
pub fn phi(trace: &ForwardTrace, layer: &str) -> Result<Tensor> {
    let point = trace.point(layer)?;
    Ok(tensor::relu(&point.activation.hadamard(&point.gradient)?))
}

/// Per-pixel Euclidean norm across channels of a `[C, H, W]` tensor.
pub fn channel_norm_map(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    let plane = h * w;
    let data = (0..plane)
        .map(|i| (0..c).map(|ch| t.data()[ch * plane + i].powi(2)).sum::<f64>().sqrt())
        .collect();
    Tensor::new(vec![h, w], data)
}

/// Importance score per scoring point, in declaration order.
///
/// `R = ‖I ⊙ ∂O/∂I‖` is the input-saliency magnitude of the original trace;
/// each perturbed trace contributes `w_i · ‖R − up(‖φ_{i,l}‖)‖₂`, where the
/// layer map is bilinearly upsampled to input resolution.
pub fn layer_importance(original: &ForwardTrace, perturbed: &[ForwardTrace], weights: &[f64]) -> Result<Vec<(String, f64)>> {
    if perturbed.len() != weights.len() || perturbed.is_empty() {
        return Err(Error::LengthMismatch(format!(
            "{} perturbed traces with {} weights",
            perturbed.len(),
            weights.len()
        )));
    }
    if let Some(bad) = weights.iter().find(|w| w.is_nan() || **w < 0.0) {
        return Err(Error::Config(format!("perturbation weight {bad} is negative")));
    }
    let reference = channel_norm_map(&original.input.hadamard(&original.input_gradient)?)?;
    let (h, w) = (reference.shape()[0], reference.shape()[1]);

    original
        .points
        .iter()
        .map(|point| {
            let mut score = 0.0;
            for (trace, &wi) in perturbed.iter().zip(weights) {
                let layer_map = Heatmap::from_tensor(&channel_norm_map(&phi(trace, &point.name)?)?, Resolution::Layer)?;
                let up = bilinear_resize(&layer_map, h, w)?;
                let dist = reference
                    .data()
                    .iter()
                    .zip(up.values())
                    .map(|(r, p)| (r - p) * (r - p))
                    .sum::<f64>()
                    .sqrt();
                score += wi * dist;
            }
            Ok((point.name.clone(), score))
        })
        .collect()
}

/// Smallest prefix of the descending-sorted scores whose cumulative sum
/// reaches `threshold` times the total. Ties keep declaration order.
pub fn filter_layers(scores: &[(String, f64)], threshold: f64) -> Result<Vec<String>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!("layer threshold {threshold} outside (0, 1]")));
    }
    if let Some((name, s)) = scores.iter().find(|(_, s)| !s.is_finite() || *s < 0.0) {
        return Err(Error::Config(format!("layer `{name}` has invalid score {s}")));
    }
    let mut order: Vec<&(String, f64)> = scores.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1));
    let total: f64 = order.iter().map(|(_, s)| s).sum();
    if total <= 0.0 {
        return Err(Error::NoInformativeLayers);
    }
    let target = threshold * total;
    let mut cumulative = 0.0;
    let mut selected = Vec::new();
    for (name, s) in order {
        cumulative += s;
        selected.push(name.clone());
        if cumulative >= target {
            break;
        }
    }
    Ok(selected)
}

/// `W_l = S_l / Σ_{j∈L'} S_j` over the selected layers.
pub fn layer_weights(scores: &[(String, f64)], selected: &[String]) -> Result<Vec<(String, f64)>> {
    if selected.is_empty() {
        return Err(Error::EmptySelection);
    }
    let chosen = selected
        .iter()
        .map(|name| {
            scores
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, s)| (name.clone(), *s))
                .ok_or_else(|| Error::UnknownLayer(name.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = chosen.iter().map(|(_, s)| s).sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::NoInformativeLayers);
    }
    Ok(chosen.into_iter().map(|(n, s)| (n, s / total)).collect())
}

/// Everything the layer-scoring stage produced for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScoreReport {
    pub scores: BTreeMap<String, f64>,
    pub selected: Vec<String>,
    pub weights: BTreeMap<String, f64>,
    pub threshold: f64,
    pub n: usize,
    pub alpha: f64,
    pub seed: u64,
    pub perturbation_weights: Vec<f64>,
    /// Scores in declaration order (not serialized; `scores` carries them).
    #[serde(skip)]
    pub ordered_scores: Vec<(String, f64)>,
    /// Weights in selection order.
    #[serde(skip)]
    pub ordered_weights: Vec<(String, f64)>,
}

/// Original probability trace, perturbed traces and their weights.
pub struct PerturbedTraces {
    pub original: ForwardTrace,
    pub perturbed: Vec<ForwardTrace>,
    pub weights: Vec<f64>,
}

/// Runs the original image and its perturbations through the model, all
/// differentiating the original predicted class probability.
pub fn perturbed_traces(model: &Model, image: &Tensor, config: &PerturbationConfig, class_index: Option<usize>) -> Result<PerturbedTraces> {
    let original = model.forward_trace(image, class_index, ScalarKind::Probability)?;
    let class = original.class_index;
    let out = ProbDist::from_tensor(&original.probabilities)?;
    let set = generate_set(image, config)?;
    let mut perturbed = Vec::with_capacity(set.perturbed.len());
    let mut weights = Vec::with_capacity(set.perturbed.len());
    for img in &set.perturbed {
        let trace = model.forward_trace(img, Some(class), ScalarKind::Probability)?;
        let out_p = ProbDist::from_tensor(&trace.probabilities)?;
        weights.push(perturbation_weight(image, img, &out, &out_p)?);
        perturbed.push(trace);
    }
    Ok(PerturbedTraces {
        original,
        perturbed,
        weights,
    })
}

/// Full scoring stage: perturb, score, filter and weight.
pub fn score_layers(
    model: &Model,
    image: &Tensor,
    config: &PerturbationConfig,
    threshold: f64,
    class_index: Option<usize>,
) -> Result<(LayerScoreReport, ForwardTrace)> {
    let traces = perturbed_traces(model, image, config, class_index)?;
    let scores = layer_importance(&traces.original, &traces.perturbed, &traces.weights)?;
    let selected = filter_layers(&scores, threshold)?;
    let weights = layer_weights(&scores, &selected)?;
    let report = LayerScoreReport {
        scores: scores.iter().cloned().collect(),
        selected,
        weights: weights.iter().cloned().collect(),
        threshold,
        n: config.n,
        alpha: config.alpha,
        seed: config.seed,
        perturbation_weights: traces.weights,
        ordered_scores: scores,
        ordered_weights: weights,
    };
    Ok((report, traces.original))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PointTrace;

    fn named(scores: &[f64]) -> Vec<(String, f64)> {
        scores.iter().enumerate().map(|(i, &s)| (format!("l{i}"), s)).collect()
    }

    fn one_point_trace(a: Vec<f64>, g: Vec<f64>) -> ForwardTrace {
        let n = a.len();
        ForwardTrace {
            class_index: 0,
            scalar_kind: ScalarKind::Probability,
            input: Tensor::zeros(&[1, 2, 2]),
            input_gradient: Tensor::zeros(&[1, 2, 2]),
            logits: Tensor::vector(vec![0.0]),
            probabilities: Tensor::vector(vec![1.0]),
            points: vec![PointTrace {
                name: "p".into(),
                activation: Tensor::new(vec![1, 2, n / 2], a).unwrap(),
                gradient: Tensor::new(vec![1, 2, n / 2], g).unwrap(),
            }],
        }
    }

    #[test]
    fn phi_cases() {
        let t = one_point_trace(vec![1.0, -1.0, 2.0, 0.0], vec![1.0, 1.0, -1.0, 1.0]);
        assert_eq!(phi(&t, "p").unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
        let z = one_point_trace(vec![1.0, -1.0, 2.0, 0.0], vec![0.0; 4]);
        assert!(phi(&z, "p").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matches!(phi(&t, "nope"), Err(Error::UnknownLayer(_))));
    }

    #[test]
    fn channel_norm_cases() {
        let t = Tensor::new(vec![1, 1, 3], vec![-2.0, 0.0, 3.0]).unwrap();
        assert_eq!(channel_norm_map(&t).unwrap().data(), &[2.0, 0.0, 3.0]);
        let t = Tensor::new(vec![2, 1, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(channel_norm_map(&t).unwrap().data(), &[5.0]);
    }

    #[test]
    fn zero_weights_give_zero_scores() {
        let t = one_point_trace(vec![1.0, 2.0, 3.0, 4.0], vec![1.0; 4]);
        let scores = layer_importance(&t, &[t.clone(), t.clone()], &[0.0, 0.0]).unwrap();
        assert_eq!(scores, vec![("p".to_string(), 0.0)]);
        assert!(layer_importance(&t, std::slice::from_ref(&t), &[0.5, 0.5]).is_err());
    }

    #[test]
    fn matching_maps_give_zero_score() {
        // R = |I ⊙ ∂O/∂I| equals the perturbed layer's |relu(A ⊙ G)|.
        let mut orig = one_point_trace(vec![1.0; 4], vec![1.0; 4]);
        orig.input = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        orig.input_gradient = Tensor::filled(&[1, 2, 2], 0.5);
        let pert = one_point_trace(vec![0.5, 1.0, 1.5, 2.0], vec![1.0; 4]);
        let scores = layer_importance(&orig, &[pert], &[1.0]).unwrap();
        assert_eq!(scores[0].1, 0.0);
    }

    #[test]
    fn filter_worked_example() {
        let scores = named(&[0.5, 0.3, 0.15, 0.05]);
        assert_eq!(filter_layers(&scores, 0.95).unwrap(), vec!["l0", "l1", "l2"]);
        let shuffled = vec![
            ("a".to_string(), 0.15),
            ("b".to_string(), 0.5),
            ("c".to_string(), 0.05),
            ("d".to_string(), 0.3),
        ];
        assert_eq!(filter_layers(&shuffled, 0.95).unwrap(), vec!["b", "d", "a"]);
    }

    #[test]
    fn filter_edges() {
        assert_eq!(filter_layers(&named(&[0.2, 0.7, 0.1]), 1.0).unwrap().len(), 3);
        assert_eq!(filter_layers(&named(&[3.0]), 0.5).unwrap(), vec!["l0"]);
        assert!(matches!(filter_layers(&named(&[0.0, 0.0]), 0.95), Err(Error::NoInformativeLayers)));
        assert!(matches!(filter_layers(&named(&[1.0]), 0.0), Err(Error::Config(_))));
        assert!(matches!(filter_layers(&named(&[1.0]), 1.5), Err(Error::Config(_))));
        // ties keep declaration order
        assert_eq!(filter_layers(&named(&[0.4, 0.4, 0.2]), 0.5).unwrap(), vec!["l0", "l1"]);
    }

    #[test]
    fn weights_worked_example() {
        let scores = named(&[0.5, 0.3, 0.15, 0.05]);
        let selected = filter_layers(&scores, 0.95).unwrap();
        let w = layer_weights(&scores, &selected).unwrap();
        let expected = [10.0 / 19.0, 6.0 / 19.0, 3.0 / 19.0];
        for ((_, got), want) in w.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(layer_weights(&scores, &["l3".into()]).unwrap()[0].1, 1.0);
        let eq = layer_weights(&named(&[0.2, 0.2]), &["l0".into(), "l1".into()]).unwrap();
        assert_eq!(eq[0].1, eq[1].1);
        assert!(matches!(layer_weights(&scores, &[]), Err(Error::EmptySelection)));
    }
}
