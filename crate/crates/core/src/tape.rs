//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive applied through a [`Tape`] appends one node holding its
//! output and the operand indices its backward rule needs. [`Tape::backward`]
//! walks the nodes in reverse recording order exactly once, accumulating
//! vector-Jacobian products, so one call yields gradients for the input image
//! and every intermediate activation together.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
        stride: usize,
        padding: usize,
    },
    Relu(usize),
    Linear {
        x: usize,
        weight: usize,
        bias: usize,
    },
    GlobalAvgPool(usize),
    Softmax(usize),
    Select {
        source: usize,
        index: usize,
    },
    Sum(usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn resolve(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::UntapedTarget(var.index));
        }
        Ok(var.index)
    }

    fn get(&self, idx: usize) -> &Tensor {
        &self.nodes[idx].value
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor> {
        Ok(self.get(self.resolve(var)?))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (i, k, b) = (self.resolve(input)?, self.resolve(kernel)?, self.resolve(bias)?);
        let out = tensor::conv2d(self.get(i), self.get(k), self.get(b), stride, padding)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input: i,
                kernel: k,
                bias: b,
                stride,
                padding,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let i = self.resolve(input)?;
        let out = tensor::relu(self.get(i));
        Ok(self.push(out, Op::Relu(i)))
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xi, w, b) = (self.resolve(x)?, self.resolve(weight)?, self.resolve(bias)?);
        let out = tensor::linear(self.get(xi), self.get(w), self.get(b))?;
        Ok(self.push(
            out,
            Op::Linear {
                x: xi,
                weight: w,
                bias: b,
            },
        ))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let i = self.resolve(input)?;
        let out = tensor::global_avg_pool(self.get(i))?;
        Ok(self.push(out, Op::GlobalAvgPool(i)))
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let i = self.resolve(input)?;
        let out = tensor::softmax(self.get(i))?;
        Ok(self.push(out, Op::Softmax(i)))
    }

    /// Picks entry `index` of a vector as a 0-dim value.
    pub fn select(&mut self, source: Var, index: usize) -> Result<Var> {
        let s = self.resolve(source)?;
        let src = self.get(s);
        src.expect_rank(1, "select")?;
        if index >= src.len() {
            return Err(Error::Shape(format!(
                "select index {index} out of range for length {}",
                src.len()
            )));
        }
        let out = Tensor::scalar(src.data()[index]);
        Ok(self.push(out, Op::Select { source: s, index }))
    }

    /// Sum of all entries as a 0-dim value.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let i = self.resolve(input)?;
        let out = Tensor::scalar(self.get(i).sum());
        Ok(self.push(out, Op::Sum(i)))
    }

    /// Gradients of a 0-dim `output` with respect to each of `targets`.
    ///
    /// Targets recorded on the tape but disconnected from `output` (or
    /// recorded after it) receive zero tensors. The tape is not consumed, so
    /// repeated calls return identical results.
    pub fn backward(&self, output: Var, targets: &[Var]) -> Result<Vec<Tensor>> {
        let target_idx: Vec<usize> = targets.iter().map(|&t| self.resolve(t)).collect::<Result<_>>()?;
        let grads = self.backward_all(output)?;
        Ok(target_idx
            .into_iter()
            .map(|i| match grads.get(i) {
                Some(Some(g)) => g.clone(),
                _ => Tensor::zeros(self.get(i).shape()),
            })
            .collect())
    }

    fn backward_all(&self, output: Var) -> Result<Vec<Option<Tensor>>> {
        let out = self.resolve(output)?;
        let out_value = self.get(out);
        if !out_value.shape().is_empty() {
            return Err(Error::NonScalarOutput(out_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out + 1];
        grads[out] = Some(Tensor::scalar(1.0));

        for idx in (0..=out).rev() {
            let Some(up) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let (gi, gk, gb) = tensor::conv2d_backward(
                        self.get(input),
                        self.get(kernel),
                        self.get(bias),
                        stride,
                        padding,
                        &up,
                    )?;
                    add_grad(&mut grads, input, gi);
                    add_grad(&mut grads, kernel, gk);
                    add_grad(&mut grads, bias, gb);
                }
                Op::Relu(input) => {
                    let gi = tensor::relu_backward(self.get(input), &up)?;
                    add_grad(&mut grads, input, gi);
                }
                Op::Linear { x, weight, bias } => {
                    let (gx, gw, gb) = tensor::linear_backward(self.get(x), self.get(weight), self.get(bias), &up)?;
                    add_grad(&mut grads, x, gx);
                    add_grad(&mut grads, weight, gw);
                    add_grad(&mut grads, bias, gb);
                }
                Op::GlobalAvgPool(input) => {
                    let gi = tensor::global_avg_pool_backward(self.get(input).shape(), &up)?;
                    add_grad(&mut grads, input, gi);
                }
                Op::Softmax(input) => {
                    let gi = tensor::softmax_backward(&node.value, &up)?;
                    add_grad(&mut grads, input, gi);
                }
                Op::Select { source, index } => {
                    let mut gi = Tensor::zeros(self.get(source).shape());
                    gi.data_mut()[index] = up.item();
                    add_grad(&mut grads, source, gi);
                }
                Op::Sum(input) => {
                    let gi = Tensor::filled(self.get(input).shape(), up.item());
                    add_grad(&mut grads, input, gi);
                }
            }
            // Keep the gradient of this node around for callers asking for it.
            grads[idx] = Some(up);
        }
        Ok(grads)
    }
}

fn add_grad(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(existing) => existing.accumulate(&g),
        slot @ None => *slot = Some(g),
    }
}
