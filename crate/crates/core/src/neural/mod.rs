//! Minimal reverse-mode tensor engine used by the GAN models.
//!
//! Everything runs in `f64` on NCHW tensors. A [`ComputeGraph`] is a DAG of
//! [`LayerSpec`] nodes with named inputs and outputs; [`ComputeGraph::forward`]
//! records a [`Tape`] that [`ComputeGraph::backward`] replays in reverse.

mod check;
mod graph;
mod ops;
mod optim;

pub use check::{grad_check, GradCheckConfig, GradCheckReport, Stencil};
pub use graph::{ComputeGraph, Gradients, GraphBuilder, LayerSpec, Mode, Node, Tape, ValueId, WeightInit};
pub use ops::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, conv_out_len, leaky_relu, relu, sigmoid,
    tconv2d_backward, tconv2d_forward, tconv_out_len, BatchNormCache, ConvGrads,
};
pub use optim::{is_running_stat, AdamConfig, Parameter, ParameterStore};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuralError {
    #[error("shape mismatch at {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("graph has no input named {0:?}")]
    UnknownInput(String),
    #[error("missing value for graph input {0:?}")]
    MissingInput(String),
    #[error("graph has no output named {0:?}")]
    UnknownOutput(String),
    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),
    #[error("batch norm at {node} needs at least 2 samples per channel in training mode")]
    DegenerateBatch { node: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, NeuralError>;

fn shape_err(node: &str, detail: impl Into<String>) -> NeuralError {
    NeuralError::ShapeMismatch {
        node: node.to_string(),
        detail: detail.into(),
    }
}

/// Dense `N×C×H×W` array, row-major within each channel plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(shape_err(
                "tensor",
                format!("{dims:?} needs {n} values, got {}", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(NeuralError::NonFinite(format!("tensor element {i}")));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Tensor {
        Tensor {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn full(dims: [usize; 4], value: f64) -> Tensor {
        Tensor {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    /// Wraps data computed by the engine itself, skipping validation.
    pub(crate) fn from_raw(dims: [usize; 4], data: Vec<f64>) -> Tensor {
        debug_assert_eq!(data.len(), dims.iter().product::<usize>());
        Tensor { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Values of sample `n`, all channels.
    pub fn item(&self, n: usize) -> &[f64] {
        let s = self.dims[1] * self.dims[2] * self.dims[3];
        &self.data[n * s..(n + 1) * s]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f64] {
        let s = self.dims[1] * self.dims[2] * self.dims[3];
        &mut self.data[n * s..(n + 1) * s]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.dims[2] * self.dims[3];
        let off = (n * self.dims[1] + c) * p;
        &self.data[off..off + p]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_raw(self.dims, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Stacks equally sized tensors along the batch axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| shape_err("stack", "no tensors"))?;
        let [_, c, h, w] = first.dims;
        let mut data = Vec::with_capacity(items.len() * first.len());
        let mut n = 0;
        for t in items {
            if t.dims[1..] != [c, h, w] {
                return Err(shape_err("stack", format!("{:?} vs {:?}", t.dims, first.dims)));
            }
            data.extend_from_slice(&t.data);
            n += t.dims[0];
        }
        Ok(Tensor::from_raw([n, c, h, w], data))
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no tensors"))?;
        let [n, _, h, w] = first.dims;
        if let Some(bad) = parts
            .iter()
            .find(|t| t.dims[0] != n || t.dims[2] != h || t.dims[3] != w)
        {
            return Err(shape_err("concat", format!("{:?} vs {:?}", bad.dims, first.dims)));
        }
        let c: usize = parts.iter().map(|t| t.dims[1]).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        for i in 0..n {
            for t in parts {
                data.extend_from_slice(t.item(i));
            }
        }
        Ok(Tensor::from_raw([n, c, h, w], data))
    }

    /// Channel range `[start, start + count)` as a new tensor.
    pub fn channel_slice(&self, start: usize, count: usize) -> Tensor {
        let [n, c, h, w] = self.dims;
        assert!(start + count <= c, "channel slice out of range");
        let p = h * w;
        let mut data = Vec::with_capacity(n * count * p);
        for i in 0..n {
            let off = (i * c + start) * p;
            data.extend_from_slice(&self.data[off..off + count * p]);
        }
        Tensor::from_raw([n, count, h, w], data)
    }

    /// Spatial window `[y, y + h) × [x, x + w)` of every plane.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Tensor {
        let [n, c, th, tw] = self.dims;
        assert!(x + w <= tw && y + h <= th, "crop out of range");
        let mut data = Vec::with_capacity(n * c * h * w);
        for i in 0..n {
            for ch in 0..c {
                let plane = self.plane(i, ch);
                for row in y..y + h {
                    data.extend_from_slice(&plane[row * tw + x..row * tw + x + w]);
                }
            }
        }
        Tensor::from_raw([n, c, h, w], data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
