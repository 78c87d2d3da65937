//! Dense row-major `f64` tensors and the forward/backward kernels of the
//! primitives the toy CNN needs.
//!
//! The kernels here are plain functions on [`Tensor`] values. The tape in
//! [`crate::tape`] records calls to them and replays the matching backward
//! kernels; model code that only needs values (finite-difference oracles,
//! head-only evaluation) calls them directly.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..PREVIEW])
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// A 0-dimensional tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// A 1-dimensional tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a 0-dim or single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise combination of two tensors of identical shape.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "expected matching shapes, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.shape.len() != rank {
            return Err(Error::Shape(format!(
                "{what}: expected rank {rank}, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Extents of a rank-3 `[C, H, W]` tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        self.expect_rank(3, "chw")?;
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub(crate) fn accumulate(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Output spatial extent of a convolution along one axis.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Shape("stride must be >= 1".into()));
    }
    let padded = input + 2 * padding;
    if kernel == 0 || kernel > padded {
        return Err(Error::Shape(format!(
            "kernel extent {kernel} exceeds padded extent {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeometry {
    fn new(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (c_in, h, w) = input.chw()?;
        kernel.expect_rank(4, "conv2d kernel")?;
        let [c_out, k_in, kh, kw] = [kernel.shape[0], kernel.shape[1], kernel.shape[2], kernel.shape[3]];
        if k_in != c_in {
            return Err(Error::Shape(format!(
                "conv2d: kernel expects {k_in} input channels, input has {c_in}"
            )));
        }
        if bias.shape() != [c_out] {
            return Err(Error::Shape(format!(
                "conv2d: bias shape {:?} does not match {c_out} output channels",
                bias.shape()
            )));
        }
        let oh = conv_output_extent(h, kh, stride, padding)?;
        let ow = conv_output_extent(w, kw, stride, padding)?;
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            oh,
            ow,
            stride,
            padding,
        })
    }

    /// Input coordinate hit by output position `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Cross-correlation of a `[C_in, H, W]` input with a `[C_out, C_in, kH, kW]` kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input, kernel, bias, stride, padding)?;
    let mut out = vec![0.0; g.c_out * g.oh * g.ow];
    for co in 0..g.c_out {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = bias.data[co];
                for ci in 0..g.c_in {
                    for ky in 0..g.kh {
                        let Some(iy) = g.source(oy, ky, g.h) else { continue };
                        for kx in 0..g.kw {
                            let Some(ix) = g.source(ox, kx, g.w) else { continue };
                            acc += kernel.data[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx]
                                * input.data[(ci * g.h + iy) * g.w + ix];
                        }
                    }
                }
                out[(co * g.oh + oy) * g.ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![g.c_out, g.oh, g.ow], out)
}

/// Gradients of a convolution with respect to input, kernel and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = ConvGeometry::new(input, kernel, bias, stride, padding)?;
    if grad_out.shape() != [g.c_out, g.oh, g.ow] {
        return Err(Error::Shape(format!(
            "conv2d backward: upstream gradient shape {:?}",
            grad_out.shape()
        )));
    }
    let mut gi = vec![0.0; input.len()];
    let mut gk = vec![0.0; kernel.len()];
    let mut gb = vec![0.0; g.c_out];
    for (co, gb_co) in gb.iter_mut().enumerate() {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let up = grad_out.data[(co * g.oh + oy) * g.ow + ox];
                *gb_co += up;
                if up == 0.0 {
                    continue;
                }
                for ci in 0..g.c_in {
                    for ky in 0..g.kh {
                        let Some(iy) = g.source(oy, ky, g.h) else { continue };
                        for kx in 0..g.kw {
                            let Some(ix) = g.source(ox, kx, g.w) else { continue };
                            let k_idx = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
                            let i_idx = (ci * g.h + iy) * g.w + ix;
                            gi[i_idx] += kernel.data[k_idx] * up;
                            gk[k_idx] += input.data[i_idx] * up;
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape.clone(), gi)?,
        Tensor::new(kernel.shape.clone(), gk)?,
        Tensor::vector(gb),
    ))
}

pub fn relu(t: &Tensor) -> Tensor {
    t.map(|x| x.max(0.0))
}

/// Passes the upstream gradient where the input is strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    input.zip_with(grad_out, |x, g| if x > 0.0 { g } else { 0.0 })
}

/// `out[c] = Σ_k w[c,k]·x[k] + b[c]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (classes, k) = linear_dims(x, weight, bias)?;
    let out = (0..classes)
        .map(|c| {
            let row = &weight.data[c * k..(c + 1) * k];
            row.iter().zip(&x.data).map(|(w, v)| w * v).sum::<f64>() + bias.data[c]
        })
        .collect();
    Ok(Tensor::vector(out))
}

pub fn linear_backward(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (classes, k) = linear_dims(x, weight, bias)?;
    if grad_out.shape() != [classes] {
        return Err(Error::Shape(format!(
            "linear backward: upstream gradient shape {:?}",
            grad_out.shape()
        )));
    }
    let mut gx = vec![0.0; k];
    let mut gw = vec![0.0; classes * k];
    for c in 0..classes {
        let up = grad_out.data[c];
        for j in 0..k {
            gx[j] += weight.data[c * k + j] * up;
            gw[c * k + j] = x.data[j] * up;
        }
    }
    Ok((
        Tensor::vector(gx),
        Tensor::new(weight.shape.clone(), gw)?,
        grad_out.clone(),
    ))
}

fn linear_dims(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    x.expect_rank(1, "linear input")?;
    weight.expect_rank(2, "linear weight")?;
    let (classes, k) = (weight.shape[0], weight.shape[1]);
    if x.len() != k {
        return Err(Error::Shape(format!(
            "linear: weight expects {k} features, input has {}",
            x.len()
        )));
    }
    if bias.shape() != [classes] {
        return Err(Error::Shape(format!(
            "linear: bias shape {:?} does not match {classes} outputs",
            bias.shape()
        )));
    }
    Ok((classes, k))
}

/// Spatial mean of each channel of a `[C, H, W]` tensor.
pub fn global_avg_pool(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = t.chw()?;
    let n = h * w;
    if n == 0 {
        return Err(Error::Shape("global_avg_pool: empty spatial extent".into()));
    }
    Ok(Tensor::vector(
        t.data
            .chunks(n)
            .take(c)
            .map(|ch| ch.iter().sum::<f64>() / n as f64)
            .collect(),
    ))
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [c, h, w] = input_shape else {
        return Err(Error::Shape(format!(
            "global_avg_pool backward: input shape {input_shape:?}"
        )));
    };
    if grad_out.shape() != [*c] {
        return Err(Error::Shape(format!(
            "global_avg_pool backward: upstream gradient shape {:?}",
            grad_out.shape()
        )));
    }
    let n = (h * w) as f64;
    let data = grad_out
        .data
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g / n, h * w))
        .collect();
    Tensor::new(input_shape.to_vec(), data)
}

/// Numerically stable softmax of a vector.
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    v.expect_rank(1, "softmax")?;
    if v.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    let max = v.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.data.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(Tensor::vector(exps.into_iter().map(|e| e / total).collect()))
}

/// Vector-Jacobian product of softmax given its output `y`.
pub fn softmax_backward(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let dot: f64 = y.data.iter().zip(&grad_out.data).map(|(a, b)| a * b).sum();
    y.zip_with(grad_out, |yi, gi| yi * (gi - dot))
}
