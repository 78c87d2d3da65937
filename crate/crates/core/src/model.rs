//! Toy CNN definition, deterministic fixtures and forward/backward traces.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tape::Tape;
use crate::tensor::{self, Tensor};

/// One stage of the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Convolution followed by ReLU. The post-ReLU output may be a scoring point.
    ConvRelu {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
    },
    GlobalAvgPool,
    Linear {
        name: String,
        in_features: usize,
        out_features: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    pub scoring_points: Vec<String>,
}

impl ModelSpec {
    /// Checks shape compatibility, head layout and scoring points, returning
    /// the output shape of every conv block in order.
    pub fn validate(&self) -> Result<Vec<(String, [usize; 3])>> {
        let [mut c, mut h, mut w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::ModelSpec(format!("empty input shape {:?}", self.input_shape)));
        }
        let mut blocks = Vec::new();
        let mut iter = self.layers.iter().peekable();
        while let Some(LayerSpec::ConvRelu {
            name,
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
        }) = iter.peek()
        {
            if *in_channels != c {
                return Err(Error::ModelSpec(format!(
                    "block `{name}` expects {in_channels} channels, receives {c}"
                )));
            }
            if blocks.iter().any(|(n, _)| n == name) {
                return Err(Error::ModelSpec(format!("duplicate block name `{name}`")));
            }
            h = tensor::conv_output_extent(h, *kernel_size, *stride, *padding)
                .map_err(|e| Error::ModelSpec(format!("block `{name}`: {e}")))?;
            w = tensor::conv_output_extent(w, *kernel_size, *stride, *padding)
                .map_err(|e| Error::ModelSpec(format!("block `{name}`: {e}")))?;
            c = *out_channels;
            blocks.push((name.clone(), [c, h, w]));
            iter.next();
        }
        match (iter.next(), iter.next(), iter.next()) {
            (Some(LayerSpec::GlobalAvgPool), Some(LayerSpec::Linear { name, in_features, out_features }), None) => {
                if *in_features != c {
                    return Err(Error::ModelSpec(format!(
                        "head `{name}` expects {in_features} features, receives {c}"
                    )));
                }
                if *out_features != self.num_classes || self.num_classes == 0 {
                    return Err(Error::ModelSpec(format!(
                        "head `{name}` produces {out_features} outputs for {} classes",
                        self.num_classes
                    )));
                }
            }
            _ => {
                return Err(Error::ModelSpec(
                    "layers must be conv blocks followed by exactly one GAP and one linear head".into(),
                ))
            }
        }
        for (i, point) in self.scoring_points.iter().enumerate() {
            if self.scoring_points[..i].contains(point) {
                return Err(Error::ModelSpec(format!("duplicate scoring point `{point}`")));
            }
            if !blocks.iter().any(|(n, _)| n == point) {
                return Err(Error::ModelSpec(format!("scoring point `{point}` is not a block output")));
            }
        }
        Ok(blocks)
    }

    /// Parameter names and shapes in declaration order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                LayerSpec::ConvRelu {
                    name,
                    in_channels,
                    out_channels,
                    kernel_size,
                    ..
                } => {
                    out.push((
                        format!("{name}.weight"),
                        vec![*out_channels, *in_channels, *kernel_size, *kernel_size],
                    ));
                    out.push((format!("{name}.bias"), vec![*out_channels]));
                }
                LayerSpec::Linear {
                    name,
                    in_features,
                    out_features,
                } => {
                    out.push((format!("{name}.weight"), vec![*out_features, *in_features]));
                    out.push((format!("{name}.bias"), vec![*out_features]));
                }
                LayerSpec::GlobalAvgPool => {}
            }
        }
        out
    }

    /// Fan-in of the layer owning parameter `param`.
    fn fan_in(&self, param: &str) -> usize {
        let owner = param.rsplit_once('.').map_or(param, |(n, _)| n);
        self.layers
            .iter()
            .find_map(|layer| match layer {
                LayerSpec::ConvRelu {
                    name,
                    in_channels,
                    kernel_size,
                    ..
                } if name == owner => Some(in_channels * kernel_size * kernel_size),
                LayerSpec::Linear { name, in_features, .. } if name == owner => Some(*in_features),
                _ => None,
            })
            .unwrap_or(1)
    }

    pub fn final_scoring_point(&self) -> Option<&str> {
        self.scoring_points.last().map(String::as_str)
    }
}

/// A network description together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<(String, Tensor)>,
}

impl Model {
    /// Builds a model, checking that `params` match the spec's declaration order and shapes.
    pub fn new(spec: ModelSpec, params: Vec<(String, Tensor)>) -> Result<Self> {
        spec.validate()?;
        let expected = spec.parameter_shapes();
        if expected.len() != params.len() {
            return Err(Error::ModelSpec(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&params) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::ModelSpec(format!(
                    "parameter `{got_name}` {:?} does not match expected `{name}` {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::ModelSpec(format!("no parameter `{name}`")))
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.spec.input_shape
    }

    pub fn scoring_points(&self) -> &[String] {
        &self.spec.scoring_points
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.spec.input_shape {
            return Err(Error::Shape(format!(
                "image shape {:?} does not match model input {:?}",
                image.shape(),
                self.spec.input_shape
            )));
        }
        Ok(())
    }

    /// Logits for an image, without recording a tape.
    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        self.check_input(image)?;
        self.run_layers(image.clone(), 0)
    }

    /// Logits obtained by replacing the output of block `point` with `activation`
    /// and running the remaining layers.
    pub fn logits_from(&self, point: &str, activation: &Tensor) -> Result<Tensor> {
        let pos = self
            .spec
            .layers
            .iter()
            .position(|l| matches!(l, LayerSpec::ConvRelu { name, .. } if name == point))
            .ok_or_else(|| Error::UnknownLayer(point.to_string()))?;
        self.run_layers(activation.clone(), pos + 1)
    }

    fn run_layers(&self, mut x: Tensor, start: usize) -> Result<Tensor> {
        for layer in &self.spec.layers[start..] {
            x = match layer {
                LayerSpec::ConvRelu {
                    name, stride, padding, ..
                } => tensor::relu(&tensor::conv2d(
                    &x,
                    self.param(&format!("{name}.weight"))?,
                    self.param(&format!("{name}.bias"))?,
                    *stride,
                    *padding,
                )?),
                LayerSpec::GlobalAvgPool => tensor::global_avg_pool(&x)?,
                LayerSpec::Linear { name, .. } => tensor::linear(
                    &x,
                    self.param(&format!("{name}.weight"))?,
                    self.param(&format!("{name}.bias"))?,
                )?,
            };
        }
        Ok(x)
    }

    /// Runs the network on a tape and differentiates the selected class score.
    ///
    /// The class defaults to the argmax of the logits (lowest index on ties).
    pub fn forward_trace(&self, image: &Tensor, class_index: Option<usize>, kind: ScalarKind) -> Result<ForwardTrace> {
        self.check_input(image)?;
        let mut tape = Tape::new();
        let input = tape.leaf(image.clone());
        let mut cur = input;
        let mut point_vars = Vec::new();
        for layer in &self.spec.layers {
            cur = match layer {
                LayerSpec::ConvRelu {
                    name, stride, padding, ..
                } => {
                    let k = tape.leaf(self.param(&format!("{name}.weight"))?.clone());
                    let b = tape.leaf(self.param(&format!("{name}.bias"))?.clone());
                    let pre = tape.conv2d(cur, k, b, *stride, *padding)?;
                    let post = tape.relu(pre)?;
                    if self.spec.scoring_points.contains(name) {
                        point_vars.push((name.clone(), post));
                    }
                    post
                }
                LayerSpec::GlobalAvgPool => tape.global_avg_pool(cur)?,
                LayerSpec::Linear { name, .. } => {
                    let w = tape.leaf(self.param(&format!("{name}.weight"))?.clone());
                    let b = tape.leaf(self.param(&format!("{name}.bias"))?.clone());
                    tape.linear(cur, w, b)?
                }
            };
        }
        let logits_var = cur;
        let probs_var = tape.softmax(logits_var)?;
        let logits = tape.value(logits_var)?.clone();
        let probabilities = tape.value(probs_var)?.clone();

        let classes = self.spec.num_classes;
        let class_index = match class_index {
            Some(c) if c >= classes => return Err(Error::ClassOutOfRange { index: c, classes }),
            Some(c) => c,
            None => logits.argmax(),
        };
        let scalar = match kind {
            ScalarKind::Logit => tape.select(logits_var, class_index)?,
            ScalarKind::Probability => tape.select(probs_var, class_index)?,
        };

        let mut targets = vec![input];
        targets.extend(point_vars.iter().map(|(_, v)| *v));
        let mut grads = tape.backward(scalar, &targets)?.into_iter();
        let input_gradient = grads.next().expect("input gradient");
        let points = point_vars
            .into_iter()
            .zip(grads)
            .map(|((name, var), gradient)| {
                Ok(PointTrace {
                    name,
                    activation: tape.value(var)?.clone(),
                    gradient,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(ForwardTrace {
            class_index,
            scalar_kind: kind,
            input: image.clone(),
            input_gradient,
            logits,
            probabilities,
            points,
        })
    }
}

/// Which scalar a trace differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ScalarKind {
    /// The pre-softmax class score `S^c`.
    Logit,
    /// The softmax probability `Y^c`.
    Probability,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointTrace {
    pub name: String,
    pub activation: Tensor,
    /// Derivative of the selected scalar with respect to `activation`.
    pub gradient: Tensor,
}

/// Activations and gradients captured by one forward/backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub class_index: usize,
    pub scalar_kind: ScalarKind,
    pub input: Tensor,
    pub input_gradient: Tensor,
    pub logits: Tensor,
    pub probabilities: Tensor,
    pub points: Vec<PointTrace>,
}

impl ForwardTrace {
    pub fn point(&self, name: &str) -> Result<&PointTrace> {
        self.points
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn class_logit(&self) -> f64 {
        self.logits.data()[self.class_index]
    }

    pub fn class_probability(&self) -> f64 {
        self.probabilities.data()[self.class_index]
    }
}

/// Architecture of the reference fixture network.
pub fn fixture_spec() -> ModelSpec {
    let conv = |name: &str, cin, cout, stride| LayerSpec::ConvRelu {
        name: name.into(),
        in_channels: cin,
        out_channels: cout,
        kernel_size: 3,
        stride,
        padding: 1,
    };
    ModelSpec {
        input_shape: [3, 32, 32],
        num_classes: 5,
        layers: vec![
            conv("block1", 3, 8, 1),
            conv("block2", 8, 16, 2),
            conv("block3", 16, 16, 1),
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear {
                name: "head".into(),
                in_features: 16,
                out_features: 5,
            },
        ],
        scoring_points: vec!["block1".into(), "block2".into(), "block3".into()],
    }
}

/// Draws He-scaled Gaussian parameters for `spec` from one Prng stream.
///
/// Every parameter, biases included, is `N(0,1)·√(2/fan_in)`, drawn in
/// declaration order and row-major, then rounded to `f32` so the in-memory
/// model equals its on-disk form.
pub fn random_model(spec: ModelSpec, seed: u64) -> Result<Model> {
    let mut rng = Prng::new(seed);
    let params = spec
        .parameter_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let scale = (2.0 / spec.fan_in(&name) as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| (rng.next_gaussian() * scale) as f32 as f64).collect();
            Ok((name, Tensor::new(shape, data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Model::new(spec, params)
}

/// The reference fixture: three conv blocks, GAP and a 16→5 linear head.
pub fn build_fixture_model(seed: u64) -> Model {
    random_model(fixture_spec(), seed).expect("fixture spec is valid")
}
