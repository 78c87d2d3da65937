//! Class activation maps: Grad-CAM, Grad-CAM++, LayerCAM and the
//! integrative multi-layer map with bias terms.
//!
//! Every map is computed from a logit trace (`g = ∂S^c/∂A`). The smooth
//! function `Y^c = f(S^c)` enters analytically through its derivatives, so
//! `∂ⁿY^c/∂Aⁿ = f⁽ⁿ⁾(S^c)·gⁿ` for heads that are linear in the activation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{Heatmap, Normalization, Resolution};
use crate::model::{ForwardTrace, PointTrace, ScalarKind};
use crate::render::{normalize_minmax, to_input_resolution};
use crate::tensor::{self, Tensor};

/// Relative guard on the generalized-alpha denominator.
pub const ALPHA_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SmoothKind {
    /// `Y = S`.
    Identity,
    /// `Y = e^S`.
    Exp,
    /// `Y = softmax(S)_c` with the other logits held fixed.
    Softmax,
}

/// `f(S^c)` and its first three derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothDerivatives {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

pub fn smooth_identity(s: f64) -> SmoothDerivatives {
    SmoothDerivatives {
        value: s,
        d1: 1.0,
        d2: 0.0,
        d3: 0.0,
    }
}

pub fn smooth_exp(s: f64) -> SmoothDerivatives {
    let e = s.exp();
    SmoothDerivatives {
        value: e,
        d1: e,
        d2: e,
        d3: e,
    }
}

/// Softmax probability of class `c` and its derivatives in `S^c`:
/// `Y(1−Y)`, `Y(1−3Y+2Y²)`, `Y(1−7Y+12Y²−6Y³)`.
pub fn smooth_softmax(logits: &Tensor, c: usize) -> Result<SmoothDerivatives> {
    if c >= logits.len() {
        return Err(Error::ClassOutOfRange {
            index: c,
            classes: logits.len(),
        });
    }
    let y = tensor::softmax(logits)?.data()[c];
    Ok(softmax_polynomials(y))
}

pub(crate) fn softmax_polynomials(y: f64) -> SmoothDerivatives {
    SmoothDerivatives {
        value: y,
        d1: y * (1.0 - y),
        d2: y * (1.0 - 3.0 * y + 2.0 * y * y),
        d3: y * (1.0 - 7.0 * y + 12.0 * y * y - 6.0 * y * y * y),
    }
}

/// A smooth function bound to a logit vector and class, evaluable at any `S^c`.
#[derive(Debug, Clone)]
pub struct SmoothFn {
    kind: SmoothKind,
    logits: Tensor,
    class: usize,
}

impl SmoothFn {
    pub fn new(kind: SmoothKind, logits: &Tensor, class: usize) -> Result<Self> {
        if class >= logits.len() {
            return Err(Error::ClassOutOfRange {
                index: class,
                classes: logits.len(),
            });
        }
        Ok(Self {
            kind,
            logits: logits.clone(),
            class,
        })
    }

    pub fn kind(&self) -> SmoothKind {
        self.kind
    }

    /// Derivatives at the bound logit value.
    pub fn at_current(&self) -> SmoothDerivatives {
        self.eval(self.logits.data()[self.class])
    }

    /// Derivatives with `S^c` replaced by `s`.
    pub fn eval(&self, s: f64) -> SmoothDerivatives {
        match self.kind {
            SmoothKind::Identity => smooth_identity(s),
            SmoothKind::Exp => smooth_exp(s),
            SmoothKind::Softmax => {
                let mut logits = self.logits.clone();
                logits.data_mut()[self.class] = s;
                smooth_softmax(&logits, self.class).expect("class checked at construction")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[value(name = "gradcam")]
    #[serde(rename = "gradcam")]
    GradCam,
    #[value(name = "gradcampp")]
    #[serde(rename = "gradcampp")]
    GradCamPlusPlus,
    #[value(name = "layercam")]
    #[serde(rename = "layercam")]
    LayerCam,
    #[value(name = "icam")]
    #[serde(rename = "icam")]
    ICam,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::GradCam, Method::GradCamPlusPlus, Method::LayerCam, Method::ICam];

    pub fn default_smooth(self) -> SmoothKind {
        match self {
            Method::GradCam | Method::LayerCam => SmoothKind::Identity,
            Method::GradCamPlusPlus => SmoothKind::Exp,
            Method::ICam => SmoothKind::Softmax,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::GradCam => "gradcam",
            Method::GradCamPlusPlus => "gradcampp",
            Method::LayerCam => "layercam",
            Method::ICam => "icam",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    None,
    /// One residual per channel, added to every pixel.
    Channel,
    /// One residual per activation entry.
    Spatial,
}

/// How the per-channel residual combines weights and activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ChannelBiasForm {
    /// `S^c − (Σ_ij w_ij)·(Σ_ij A_ij)`.
    #[default]
    ProductOfSums,
    /// `S^c − Σ_ij w_ij·A_ij`.
    SumOfProducts,
}

/// Which layers a request explains.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelection {
    Explicit(Vec<String>),
    /// Choose and weight layers from perturbation-based importance scores.
    Automatic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CamRequest {
    pub method: Method,
    pub smooth: SmoothKind,
    pub bias: BiasMode,
    pub channel_bias_form: ChannelBiasForm,
    pub layers: LayerSelection,
}

impl CamRequest {
    /// Request with the method's default smooth function, channel bias for
    /// the integrative method, automatic layers for it and the final layer otherwise.
    pub fn new(method: Method) -> Self {
        Self {
            method,
            smooth: method.default_smooth(),
            bias: if method == Method::ICam { BiasMode::Channel } else { BiasMode::None },
            channel_bias_form: ChannelBiasForm::default(),
            layers: LayerSelection::Automatic,
        }
    }
}

fn logit_point<'a>(trace: &'a ForwardTrace, layer: &str) -> Result<&'a PointTrace> {
    if trace.scalar_kind != ScalarKind::Logit {
        return Err(Error::Config("class activation maps need a logit trace".into()));
    }
    trace.point(layer)
}

fn smooth_at(trace: &ForwardTrace, smooth: SmoothKind) -> Result<SmoothDerivatives> {
    Ok(SmoothFn::new(smooth, &trace.logits, trace.class_index)?.at_current())
}

/// `relu(Σ_k (Σ_ij w_kij·A_kij) …)`-style channel sum: out[i,j] = Σ_k t[k,i,j].
fn channel_sum(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    let plane = h * w;
    let data = (0..plane).map(|i| (0..c).map(|k| t.data()[k * plane + i]).sum()).collect();
    Tensor::new(vec![h, w], data)
}

fn layer_heatmap(pre_relu: &Tensor) -> Result<Heatmap> {
    Heatmap::from_tensor(&tensor::relu(pre_relu), Resolution::Layer)
}

/// `relu(Σ_k w_k·A_k)` for per-channel weights.
fn weighted_channel_map(weights: &[f64], a: &Tensor) -> Result<Heatmap> {
    let (c, h, w) = a.chw()?;
    let plane = h * w;
    let data = (0..plane).map(|i| (0..c).map(|k| weights[k] * a.data()[k * plane + i]).sum()).collect();
    layer_heatmap(&Tensor::new(vec![h, w], data)?)
}

/// Spatially averaged first derivatives `(1/N)·Σ_ij f′·g_kij`, one per channel.
pub fn gradcam_weights(g: &Tensor, d1: f64) -> Result<Vec<f64>> {
    let (_, h, w) = g.chw()?;
    let n = (h * w) as f64;
    Ok(g.data().chunks(h * w).map(|ch| ch.iter().map(|v| d1 * v).sum::<f64>() / n).collect())
}

pub fn gradcam_map(trace: &ForwardTrace, layer: &str, smooth: SmoothKind) -> Result<Heatmap> {
    let point = logit_point(trace, layer)?;
    let f = smooth_at(trace, smooth)?;
    let weights = gradcam_weights(&point.gradient, f.d1)?;
    weighted_channel_map(&weights, &point.activation)
}

/// Generalized Grad-CAM++ alpha from the smooth function's second and third
/// derivatives and first-order logit gradients:
///
/// `α_kij = f″g² / (2f″g² + Σ_ij A_kij·f‴g³_kij)`.
///
/// Entries whose denominator vanishes relative to its terms are set to 0.
pub fn generalized_alpha(d2: f64, d3: f64, g: &Tensor, a: &Tensor) -> Result<Tensor> {
    g.expect_same_shape(a)?;
    let (_, h, w) = g.chw()?;
    let plane = h * w;
    let mut out = Vec::with_capacity(g.len());
    for (gc, ac) in g.data().chunks(plane).zip(a.data().chunks(plane)) {
        let cubic: f64 = ac.iter().zip(gc).map(|(a, g)| a * d3 * g * g * g).sum();
        for &gv in gc {
            let numer = d2 * gv * gv;
            let denom = 2.0 * numer + cubic;
            let scale = (2.0 * numer).abs() + cubic.abs();
            out.push(if denom.abs() <= ALPHA_EPS * scale || denom == 0.0 {
                0.0
            } else {
                numer / denom
            });
        }
    }
    Tensor::new(g.shape().to_vec(), out)
}

pub fn gradcampp_map(trace: &ForwardTrace, layer: &str, smooth: SmoothKind) -> Result<Heatmap> {
    let point = logit_point(trace, layer)?;
    let f = smooth_at(trace, smooth)?;
    let alpha = generalized_alpha(f.d2, f.d3, &point.gradient, &point.activation)?;
    let (_, h, w) = alpha.chw()?;
    let weights: Vec<f64> = alpha
        .data()
        .chunks(h * w)
        .zip(point.gradient.data().chunks(h * w))
        .map(|(al, g)| al.iter().zip(g).map(|(a, g)| a * (f.d1 * g).max(0.0)).sum())
        .collect();
    weighted_channel_map(&weights, &point.activation)
}

pub fn layercam_map(trace: &ForwardTrace, layer: &str, smooth: SmoothKind) -> Result<Heatmap> {
    let point = logit_point(trace, layer)?;
    let f = smooth_at(trace, smooth)?;
    let weighted = point.gradient.zip_with(&point.activation, |g, a| (f.d1 * g).max(0.0) * a)?;
    layer_heatmap(&channel_sum(&weighted)?)
}

/// `tanh(α)·relu(f′·g)`, elementwise.
pub fn icam_weights(alpha: &Tensor, d1: f64, g: &Tensor) -> Result<Tensor> {
    alpha.zip_with(g, |a, g| a.tanh() * (d1 * g).max(0.0))
}

/// Residual term of the integrative map.
#[derive(Debug, Clone, PartialEq)]
pub enum BiasTerm {
    None,
    /// One value per channel.
    Channel(Vec<f64>),
    /// One value per activation entry, `[C, H, W]`.
    Spatial(Tensor),
}

impl BiasTerm {
    /// Contribution to each pixel after summing over channels.
    fn pixel_contribution(&self, h: usize, w: usize) -> Result<Vec<f64>> {
        Ok(match self {
            BiasTerm::None => vec![0.0; h * w],
            BiasTerm::Channel(b) => vec![b.iter().sum(); h * w],
            BiasTerm::Spatial(t) => channel_sum(t)?.into_data(),
        })
    }
}

/// Residual of the class score not explained by `w` and `A`.
pub fn bias_term(mode: BiasMode, form: ChannelBiasForm, score: f64, w: &Tensor, a: &Tensor) -> Result<BiasTerm> {
    w.expect_same_shape(a)?;
    let (_, h, wd) = a.chw()?;
    let plane = h * wd;
    Ok(match mode {
        BiasMode::None => BiasTerm::None,
        BiasMode::Channel => BiasTerm::Channel(
            w.data()
                .chunks(plane)
                .zip(a.data().chunks(plane))
                .map(|(wc, ac)| match form {
                    ChannelBiasForm::ProductOfSums => score - wc.iter().sum::<f64>() * ac.iter().sum::<f64>(),
                    ChannelBiasForm::SumOfProducts => score - wc.iter().zip(ac).map(|(x, y)| x * y).sum::<f64>(),
                })
                .collect(),
        ),
        BiasMode::Spatial => {
            let mut data = Vec::with_capacity(w.len());
            for (wc, ac) in w.data().chunks(plane).zip(a.data().chunks(plane)) {
                let a_sum: f64 = ac.iter().sum();
                data.extend(wc.iter().map(|wv| score - wv * a_sum));
            }
            BiasTerm::Spatial(Tensor::new(w.shape().to_vec(), data)?)
        }
    })
}

/// Pre-ReLU integrative map `Σ_k w_k⊙A_k + bias` at one layer.
pub fn icam_layer_raw(
    trace: &ForwardTrace,
    layer: &str,
    smooth: SmoothKind,
    bias: BiasMode,
    form: ChannelBiasForm,
) -> Result<Tensor> {
    let point = logit_point(trace, layer)?;
    let f = smooth_at(trace, smooth)?;
    let alpha = generalized_alpha(f.d2, f.d3, &point.gradient, &point.activation)?;
    let w = icam_weights(&alpha, f.d1, &point.gradient)?;
    let term = bias_term(bias, form, trace.class_logit(), &w, &point.activation)?;
    let mut raw = channel_sum(&w.hadamard(&point.activation)?)?;
    let (h, wd) = (raw.shape()[0], raw.shape()[1]);
    for (v, b) in raw.data_mut().iter_mut().zip(term.pixel_contribution(h, wd)?) {
        *v += b;
    }
    Ok(raw)
}

/// Integrative map at one layer: weighted activations plus bias, then ReLU.
pub fn icam_layer_map(
    trace: &ForwardTrace,
    layer: &str,
    smooth: SmoothKind,
    bias: BiasMode,
    form: ChannelBiasForm,
) -> Result<Heatmap> {
    layer_heatmap(&icam_layer_raw(trace, layer, smooth, bias, form)?)
}

/// Single-layer map for any method (the integrative method without fusion).
pub fn layer_map(request: &CamRequest, trace: &ForwardTrace, layer: &str) -> Result<Heatmap> {
    match request.method {
        Method::GradCam => gradcam_map(trace, layer, request.smooth),
        Method::GradCamPlusPlus => gradcampp_map(trace, layer, request.smooth),
        Method::LayerCam => layercam_map(trace, layer, request.smooth),
        Method::ICam => icam_layer_map(trace, layer, request.smooth, request.bias, request.channel_bias_form),
    }
}

/// Upsamples and min-max normalizes a layer map to input resolution.
pub fn normalized_at_input(map: &Heatmap, height: usize, width: usize) -> Result<Heatmap> {
    Ok(normalize_minmax(&to_input_resolution(map, height, width)?))
}

/// Weighted sum of per-layer maps, each upsampled and normalized first, then
/// normalized again. Summation follows the order of `weights`.
pub fn fuse(maps: &[(String, Heatmap)], weights: &[(String, f64)], height: usize, width: usize) -> Result<Heatmap> {
    if weights.is_empty() {
        return Err(Error::EmptySelection);
    }
    let mut acc = vec![0.0; height * width];
    for (name, wl) in weights {
        let map = maps
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::MissingLayerMap(name.clone()))?;
        let norm = normalized_at_input(map, height, width)?;
        for (a, v) in acc.iter_mut().zip(norm.values()) {
            *a += wl * v;
        }
    }
    let fused = Heatmap::new(height, width, acc, Resolution::Input)?;
    let out = normalize_minmax(&fused);
    debug_assert_eq!(out.normalization(), Normalization::MinMax);
    Ok(out)
}
