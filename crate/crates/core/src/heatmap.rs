use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spatial grid a heatmap lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    /// Native resolution of the layer it was computed at.
    Layer,
    /// Resolution of the model input image.
    Input,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Raw,
    MinMax,
}

/// Single-channel non-negative spatial map, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    resolution: Resolution,
    normalization: Normalization,
}

impl Heatmap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, resolution: Resolution) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "heatmap {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Shape(format!("heatmap values must be finite and >= 0, found {bad}")));
        }
        Ok(Self {
            height,
            width,
            values,
            resolution,
            normalization: Normalization::Raw,
        })
    }

    /// Wraps a `[H, W]` tensor.
    pub fn from_tensor(t: &Tensor, resolution: Resolution) -> Result<Self> {
        t.expect_rank(2, "heatmap")?;
        Self::new(t.shape()[0], t.shape()[1], t.data().to_vec(), resolution)
    }

    pub(crate) fn with_state(mut self, resolution: Resolution, normalization: Normalization) -> Self {
        self.resolution = resolution;
        self.normalization = normalization;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn transpose(&self) -> Heatmap {
        let mut values = Vec::with_capacity(self.values.len());
        for c in 0..self.width {
            for r in 0..self.height {
                values.push(self.get(r, c));
            }
        }
        Heatmap {
            height: self.width,
            width: self.height,
            values,
            resolution: self.resolution,
            normalization: self.normalization,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.values.clone()).expect("consistent dims")
    }
}
