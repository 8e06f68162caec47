//! Dense fp32 tensor with row-major storage.
//!
//! The carrier type for every numeric value in the crate. Tensors are plain
//! values: cloning copies the data, and they can move freely between threads.
//! Gradients live in the optional `grad` buffer and are populated by a
//! [`crate::tape::Tape`] backward pass.

use crate::error::{GsaError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    #[serde(skip)]
    pub grad: Option<Vec<f32>>,
    #[serde(default)]
    pub requires_grad: bool,
}

impl Tensor {
    /// Build a tensor from shape and flat row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(v: f32) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Dimension at `axis`, or 1 when the axis does not exist.
    pub fn dim(&self, axis: usize) -> usize {
        self.shape.get(axis).copied().unwrap_or(1)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Accumulate `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) {
        assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Temperature-scaled softmax over the last axis.
///
/// Rows are the leading axes flattened; each row is normalized with
/// max-subtraction so large logits stay finite.
pub fn softmax_with_temperature(logits: &Tensor, temperature: f32) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(GsaError::argument(
            "temperature",
            format!("must be positive, got {temperature}"),
        ));
    }
    let classes = *logits
        .shape()
        .last()
        .ok_or_else(|| GsaError::argument("logits", "zero-rank tensor"))?;
    let mut out = vec![0.0f32; logits.numel()];
    for (row_out, row_in) in out
        .chunks_mut(classes)
        .zip(logits.data().chunks(classes))
    {
        softmax_row(row_in, temperature, row_out);
    }
    Ok(Tensor::new(logits.shape().to_vec(), out))
}

/// Softmax of a single row of logits at the given temperature.
pub fn softmax_row(logits: &[f32], temperature: f32, out: &mut [f32]) {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v / temperature));
    let mut sum = 0.0f32;
    for (o, &z) in out.iter_mut().zip(logits) {
        let e = (z / temperature - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}
