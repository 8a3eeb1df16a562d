//! Layer DAG with tape-based forward and reverse passes.

use super::ops::{
    batchnorm_backward, batchnorm_named, conv_backward_named, conv_forward_named, leaky_relu, relu, sigmoid,
    tconv_backward_named, tconv_forward_named, BatchNormCache,
};
use super::{shape_err, NeuralError, ParameterStore, Result, Tensor};
use crate::raster::{resample_plane, upsample_weights, AxisWeights, ResampleFilter};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

/// Index of a node, and of the value it produces.
pub type ValueId = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// Named graph entry with a fixed channel count.
    Input {
        channels: usize,
    },
    Conv {
        k: usize,
        stride: usize,
        in_c: usize,
        out_c: usize,
        pad: usize,
    },
    TConv {
        k: usize,
        stride: usize,
        in_c: usize,
        out_c: usize,
        pad: usize,
        out_pad: usize,
    },
    LeakyRelu {
        slope: f64,
    },
    Relu,
    Sigmoid,
    /// Channel concatenation of all inputs, in order.
    Concat,
    BatchNorm {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    /// Elementwise sum of two equally shaped values.
    Add,
    /// Fixed (parameter-free) bicubic up-sampling by an integer factor.
    Upsample {
        factor: usize,
    },
}

impl LayerSpec {
    pub fn is_rectifier(&self) -> bool {
        matches!(self, LayerSpec::LeakyRelu { .. } | LayerSpec::Relu)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub spec: LayerSpec,
    pub inputs: Vec<ValueId>,
}

impl Node {
    fn param(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running-stat updates recorded on the tape.
    Train,
    /// Running statistics in batch norm.
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComputeGraph {
    nodes: Vec<Node>,
    outputs: Vec<(String, ValueId)>,
    pub params: ParameterStore,
}

/// Activations recorded by [`ComputeGraph::forward`].
#[derive(Debug, Clone)]
pub struct Tape {
    values: Vec<Tensor>,
    bn: Vec<Option<BatchNormCache>>,
    mode: Mode,
    outputs: Vec<(String, ValueId)>,
}

impl Tape {
    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.values[id]
    }

    pub fn output(&self, name: &str) -> Result<&Tensor> {
        self.outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, id)| &self.values[id])
            .ok_or_else(|| NeuralError::UnknownOutput(name.to_string()))
    }

    pub fn into_outputs(mut self) -> BTreeMap<String, Tensor> {
        self.outputs
            .iter()
            .map(|(n, id)| {
                (
                    n.clone(),
                    std::mem::replace(&mut self.values[*id], Tensor::zeros([0, 0, 0, 0])),
                )
            })
            .collect()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// Parameter gradients plus gradients with respect to every graph input.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub params: BTreeMap<String, Tensor>,
    pub inputs: BTreeMap<String, Tensor>,
}

fn upsample_axes(t: &Tensor, factor: usize) -> (AxisWeights, AxisWeights) {
    (
        upsample_weights(t.width(), factor, ResampleFilter::Bicubic),
        upsample_weights(t.height(), factor, ResampleFilter::Bicubic),
    )
}

fn upsample_forward(x: &Tensor, factor: usize) -> Tensor {
    let [n, c, h, w] = x.dims();
    let (wx, wy) = upsample_axes(x, factor);
    let mut data = Vec::with_capacity(x.len() * factor * factor);
    for i in 0..n {
        for ch in 0..c {
            data.extend(resample_plane(x.plane(i, ch), w, h, &wx, &wy));
        }
    }
    Tensor::from_raw([n, c, h * factor, w * factor], data)
}

// Transpose of the separable resampling map.
fn upsample_backward(x_dims: [usize; 4], grad: &Tensor, factor: usize) -> Tensor {
    let [n, c, h, w] = x_dims;
    let wx = upsample_weights(w, factor, ResampleFilter::Bicubic);
    let wy = upsample_weights(h, factor, ResampleFilter::Bicubic);
    let ow = w * factor;
    let mut out = vec![0.0; n * c * h * w];
    let mut horizontal = vec![0.0; ow * h];
    for i in 0..n {
        for ch in 0..c {
            horizontal.fill(0.0);
            let g = grad.plane(i, ch);
            for (oy, taps) in wy.taps.iter().enumerate() {
                for &(iy, wt) in taps {
                    let (dst, src) = (&mut horizontal[iy * ow..(iy + 1) * ow], &g[oy * ow..(oy + 1) * ow]);
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += wt * s);
                }
            }
            let plane = &mut out[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            for y in 0..h {
                for (ox, taps) in wx.taps.iter().enumerate() {
                    let gv = horizontal[y * ow + ox];
                    for &(ix, wt) in taps {
                        plane[y * w + ix] += wt * gv;
                    }
                }
            }
        }
    }
    Tensor::from_raw(x_dims, out)
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

fn vector(store: &ParameterStore, name: &str) -> Result<Vec<f64>> {
    Ok(store.get(name)?.data().to_vec())
}

impl ComputeGraph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn inputs(&self) -> impl Iterator<Item = (&str, usize)> {
        self.nodes.iter().filter_map(|n| match n.spec {
            LayerSpec::Input { channels } => Some((n.name.as_str(), channels)),
            _ => None,
        })
    }

    pub fn outputs(&self) -> &[(String, ValueId)] {
        &self.outputs
    }

    fn eval_node(&self, idx: usize, values: &[Tensor], mode: Mode) -> Result<(Tensor, Option<BatchNormCache>)> {
        let node = &self.nodes[idx];
        let arg = |i: usize| &values[node.inputs[i]];
        let name = node.name.as_str();
        let out = match &node.spec {
            LayerSpec::Input { .. } => unreachable!("inputs are bound before evaluation"),
            LayerSpec::Conv { stride, pad, .. } => {
                let w = self.params.get(&node.param("weight"))?;
                let b = self.params.get(&node.param("bias"))?;
                conv_forward_named(name, arg(0), w, Some(b.data()), *stride, *pad)?
            }
            LayerSpec::TConv {
                stride, pad, out_pad, ..
            } => {
                let w = self.params.get(&node.param("weight"))?;
                let b = self.params.get(&node.param("bias"))?;
                tconv_forward_named(name, arg(0), w, Some(b.data()), *stride, *pad, *out_pad)?
            }
            LayerSpec::LeakyRelu { slope } => arg(0).map(|v| leaky_relu(v, *slope)),
            LayerSpec::Relu => arg(0).map(relu),
            LayerSpec::Sigmoid => arg(0).map(sigmoid),
            LayerSpec::Concat => {
                let parts: Vec<&Tensor> = node.inputs.iter().map(|&i| &values[i]).collect();
                Tensor::concat_channels(&parts).map_err(|e| match e {
                    NeuralError::ShapeMismatch { detail, .. } => shape_err(name, detail),
                    other => other,
                })?
            }
            LayerSpec::Add => {
                let (a, b) = (arg(0), arg(1));
                if a.dims() != b.dims() {
                    return Err(shape_err(name, format!("{:?} + {:?}", a.dims(), b.dims())));
                }
                Tensor::from_raw(a.dims(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect())
            }
            LayerSpec::BatchNorm { eps, .. } => {
                let gamma = vector(&self.params, &node.param("gamma"))?;
                let beta = vector(&self.params, &node.param("beta"))?;
                let (y, cache) = match mode {
                    Mode::Train => batchnorm_named(name, arg(0), &gamma, &beta, *eps, None)?,
                    Mode::Infer => {
                        let rm = vector(&self.params, &node.param("running_mean"))?;
                        let rv = vector(&self.params, &node.param("running_var"))?;
                        batchnorm_named(name, arg(0), &gamma, &beta, *eps, Some((&rm, &rv)))?
                    }
                };
                return Ok((y, Some(cache)));
            }
            LayerSpec::Upsample { factor } => upsample_forward(arg(0), *factor),
        };
        Ok((out, None))
    }

    fn bind_inputs(&self, inputs: &[(&str, &Tensor)]) -> Result<Vec<Option<Tensor>>> {
        for (name, _) in inputs {
            if !self.inputs().any(|(n, _)| n == *name) {
                return Err(NeuralError::UnknownInput(name.to_string()));
            }
        }
        let mut values = vec![None; self.nodes.len()];
        for (idx, node) in self.nodes.iter().enumerate() {
            if let LayerSpec::Input { channels } = node.spec {
                let t = inputs
                    .iter()
                    .find(|(n, _)| *n == node.name)
                    .map(|(_, t)| *t)
                    .ok_or_else(|| NeuralError::MissingInput(node.name.clone()))?;
                if t.channels() != channels {
                    return Err(shape_err(
                        &node.name,
                        format!("expected {channels} channels, got {:?}", t.dims()),
                    ));
                }
                values[idx] = Some(t.clone());
            }
        }
        Ok(values)
    }

    /// Evaluates every node in order and records the tape.
    pub fn forward(&self, inputs: &[(&str, &Tensor)], mode: Mode) -> Result<Tape> {
        let bound = self.bind_inputs(inputs)?;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut bn = vec![None; self.nodes.len()];
        for (idx, slot) in bound.into_iter().enumerate() {
            let v = match slot {
                Some(t) => t,
                None => {
                    let (t, cache) = self.eval_node(idx, &values, mode)?;
                    bn[idx] = cache;
                    t
                }
            };
            values.push(v);
        }
        Ok(Tape {
            values,
            bn,
            mode,
            outputs: self.outputs.clone(),
        })
    }

    /// Inference-mode evaluation that releases intermediate values as soon as
    /// their last consumer has run.
    pub fn infer(&self, inputs: &[(&str, &Tensor)]) -> Result<BTreeMap<String, Tensor>> {
        let bound = self.bind_inputs(inputs)?;
        let mut last_use = vec![0usize; self.nodes.len()];
        for (idx, node) in self.nodes.iter().enumerate() {
            for &i in &node.inputs {
                last_use[i] = idx;
            }
        }
        for &(_, id) in &self.outputs {
            last_use[id] = usize::MAX;
        }
        let empty = Tensor::zeros([0, 0, 0, 0]);
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, slot) in bound.into_iter().enumerate() {
            let v = match slot {
                Some(t) => t,
                None => self.eval_node(idx, &values, Mode::Infer)?.0,
            };
            values.push(v);
            for &i in &self.nodes[idx].inputs {
                if last_use[i] == idx {
                    values[i] = empty.clone();
                }
            }
        }
        Ok(self
            .outputs
            .iter()
            .map(|(n, id)| (n.clone(), std::mem::replace(&mut values[*id], empty.clone())))
            .collect())
    }

    /// Reverse pass. Outputs without an entry in `output_grads` receive zero
    /// gradient; every trainable parameter appears in the result.
    pub fn backward(&self, tape: &Tape, output_grads: &[(&str, &Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (name, g) in output_grads {
            let id = self
                .outputs
                .iter()
                .find(|(n, _)| n == name)
                .map(|&(_, id)| id)
                .ok_or_else(|| NeuralError::UnknownOutput(name.to_string()))?;
            if g.dims() != tape.values[id].dims() {
                return Err(shape_err(
                    name,
                    format!("gradient {:?} vs output {:?}", g.dims(), tape.values[id].dims()),
                ));
            }
            accumulate(&mut grads[id], (*g).clone());
        }
        let mut out = Gradients::default();
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let name = node.name.as_str();
            let x = |i: usize| &tape.values[node.inputs[i]];
            match &node.spec {
                LayerSpec::Input { .. } => {
                    out.inputs.insert(node.name.clone(), g);
                }
                LayerSpec::Conv { stride, pad, .. } => {
                    let w = self.params.get(&node.param("weight"))?;
                    let cg = conv_backward_named(name, x(0), w, &g, *stride, *pad)?;
                    out.params.insert(node.param("weight"), cg.weight);
                    out.params
                        .insert(node.param("bias"), Tensor::from_raw([1, cg.bias.len(), 1, 1], cg.bias));
                    accumulate(&mut grads[node.inputs[0]], cg.input);
                }
                LayerSpec::TConv {
                    stride, pad, out_pad, ..
                } => {
                    let w = self.params.get(&node.param("weight"))?;
                    let cg = tconv_backward_named(name, x(0), w, &g, *stride, *pad, *out_pad)?;
                    out.params.insert(node.param("weight"), cg.weight);
                    out.params
                        .insert(node.param("bias"), Tensor::from_raw([1, cg.bias.len(), 1, 1], cg.bias));
                    accumulate(&mut grads[node.inputs[0]], cg.input);
                }
                LayerSpec::LeakyRelu { slope } => {
                    let d = g
                        .data()
                        .iter()
                        .zip(x(0).data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { slope * gv });
                    accumulate(&mut grads[node.inputs[0]], Tensor::from_raw(g.dims(), d.collect()));
                }
                LayerSpec::Relu => {
                    let d = g
                        .data()
                        .iter()
                        .zip(x(0).data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 });
                    accumulate(&mut grads[node.inputs[0]], Tensor::from_raw(g.dims(), d.collect()));
                }
                LayerSpec::Sigmoid => {
                    let y = &tape.values[idx];
                    let d = g.data().iter().zip(y.data()).map(|(gv, yv)| gv * yv * (1.0 - yv));
                    accumulate(&mut grads[node.inputs[0]], Tensor::from_raw(g.dims(), d.collect()));
                }
                LayerSpec::Concat => {
                    let mut start = 0;
                    for &i in &node.inputs {
                        let c = tape.values[i].channels();
                        accumulate(&mut grads[i], g.channel_slice(start, c));
                        start += c;
                    }
                }
                LayerSpec::Add => {
                    accumulate(&mut grads[node.inputs[0]], g.clone());
                    accumulate(&mut grads[node.inputs[1]], g);
                }
                LayerSpec::BatchNorm { .. } => {
                    let gamma = vector(&self.params, &node.param("gamma"))?;
                    let cache = tape.bn[idx].as_ref().expect("batch norm cache recorded in forward");
                    let (dx, dg, db) = batchnorm_backward(&g, &gamma, cache);
                    let c = dg.len();
                    out.params
                        .insert(node.param("gamma"), Tensor::from_raw([1, c, 1, 1], dg));
                    out.params
                        .insert(node.param("beta"), Tensor::from_raw([1, c, 1, 1], db));
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
                LayerSpec::Upsample { factor } => {
                    let dx = upsample_backward(x(0).dims(), &g, *factor);
                    accumulate(&mut grads[node.inputs[0]], dx);
                }
            }
        }
        for (name, p) in self.params.iter() {
            if p.trainable && !out.params.contains_key(name) {
                out.params.insert(name.to_string(), Tensor::zeros(p.value.dims()));
            }
        }
        for (name, _) in self.inputs() {
            if !out.inputs.contains_key(name) {
                let id = self.nodes.iter().position(|n| n.name == name).expect("input node");
                out.inputs
                    .insert(name.to_string(), Tensor::zeros(tape.values[id].dims()));
            }
        }
        Ok(out)
    }

    /// Folds the batch statistics of a training-mode tape into the running
    /// mean and variance of every batch-norm node.
    pub fn commit_running_stats(&mut self, tape: &Tape) {
        if tape.mode != Mode::Train {
            return;
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            let (LayerSpec::BatchNorm { momentum, .. }, Some(cache)) = (&node.spec, &tape.bn[idx]) else {
                continue;
            };
            for (suffix, batch) in [("running_mean", &cache.mean), ("running_var", &cache.var)] {
                if let Some(t) = self.params.value_mut(&node.param(suffix)) {
                    for (r, b) in t.data_mut().iter_mut().zip(batch) {
                        *r = (1.0 - momentum) * *r + momentum * b;
                    }
                }
            }
        }
    }

    pub fn batchnorm_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.spec, LayerSpec::BatchNorm { .. }))
            .count()
    }

    pub fn conv_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.spec, LayerSpec::Conv { .. } | LayerSpec::TConv { .. }))
            .count()
    }
}

/// Weight initialization law of a [`GraphBuilder`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightInit {
    /// `N(0, std)` for every weight.
    Normal(f64),
    /// `N(0, sqrt(2 / fan_in))`; for transposed convolutions the fan-in is
    /// the number of taps reaching one output, `in_c * k² / stride²`.
    He,
}

/// Incremental graph construction with seeded weight initialization and zero
/// biases. Channel consistency is checked as nodes
/// are added; violations are programming errors and panic.
pub struct GraphBuilder {
    nodes: Vec<Node>,
    channels: Vec<usize>,
    outputs: Vec<(String, ValueId)>,
    params: ParameterStore,
    rng: ChaCha8Rng,
    init: WeightInit,
}

impl GraphBuilder {
    pub fn new(seed: u64) -> Self {
        Self::with_init(seed, WeightInit::Normal(0.02))
    }

    pub fn with_init_std(seed: u64, std: f64) -> Self {
        Self::with_init(seed, WeightInit::Normal(std))
    }

    pub fn with_init(seed: u64, init: WeightInit) -> Self {
        if let WeightInit::Normal(std) = init {
            assert!(
                std.is_finite() && std >= 0.0,
                "init std must be finite and non-negative"
            );
        }
        Self {
            nodes: Vec::new(),
            channels: Vec::new(),
            outputs: Vec::new(),
            params: ParameterStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            init,
        }
    }

    fn push(&mut self, name: &str, spec: LayerSpec, inputs: Vec<ValueId>, channels: usize) -> ValueId {
        assert!(!self.nodes.iter().any(|n| n.name == name), "duplicate node name {name}");
        assert!(
            inputs.iter().all(|&i| i < self.nodes.len()),
            "node {name} refers to a later value"
        );
        self.nodes.push(Node {
            name: name.to_string(),
            spec,
            inputs,
        });
        self.channels.push(channels);
        self.nodes.len() - 1
    }

    fn random(&mut self, dims: [usize; 4], fan_in: f64) -> Tensor {
        let std = match self.init {
            WeightInit::Normal(std) => std,
            WeightInit::He => (2.0 / fan_in).sqrt(),
        };
        let law = Normal::new(0.0, std).expect("finite init std");
        let n = dims.iter().product();
        let data = (0..n).map(|_| law.sample(&mut self.rng)).collect();
        Tensor::from_raw(dims, data)
    }

    pub fn channels(&self, id: ValueId) -> usize {
        self.channels[id]
    }

    pub fn input(&mut self, name: &str, channels: usize) -> ValueId {
        self.push(name, LayerSpec::Input { channels }, vec![], channels)
    }

    pub fn conv(&mut self, name: &str, x: ValueId, out_c: usize, k: usize, stride: usize, pad: usize) -> ValueId {
        let in_c = self.channels[x];
        let w = self.random([out_c, in_c, k, k], (in_c * k * k) as f64);
        self.params.insert(format!("{name}.weight"), w);
        self.params
            .insert(format!("{name}.bias"), Tensor::zeros([1, out_c, 1, 1]));
        self.push(
            name,
            LayerSpec::Conv {
                k,
                stride,
                in_c,
                out_c,
                pad,
            },
            vec![x],
            out_c,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn tconv(
        &mut self,
        name: &str,
        x: ValueId,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> ValueId {
        let in_c = self.channels[x];
        let w = self.random([in_c, out_c, k, k], (in_c * k * k) as f64 / (stride * stride) as f64);
        self.params.insert(format!("{name}.weight"), w);
        self.params
            .insert(format!("{name}.bias"), Tensor::zeros([1, out_c, 1, 1]));
        let spec = LayerSpec::TConv {
            k,
            stride,
            in_c,
            out_c,
            pad,
            out_pad,
        };
        self.push(name, spec, vec![x], out_c)
    }

    pub fn leaky_relu(&mut self, name: &str, x: ValueId, slope: f64) -> ValueId {
        let c = self.channels[x];
        self.push(name, LayerSpec::LeakyRelu { slope }, vec![x], c)
    }

    pub fn relu(&mut self, name: &str, x: ValueId) -> ValueId {
        let c = self.channels[x];
        self.push(name, LayerSpec::Relu, vec![x], c)
    }

    pub fn sigmoid(&mut self, name: &str, x: ValueId) -> ValueId {
        let c = self.channels[x];
        self.push(name, LayerSpec::Sigmoid, vec![x], c)
    }

    pub fn concat(&mut self, name: &str, parts: &[ValueId]) -> ValueId {
        assert!(!parts.is_empty(), "concat {name} needs inputs");
        let c = parts.iter().map(|&p| self.channels[p]).sum();
        self.push(name, LayerSpec::Concat, parts.to_vec(), c)
    }

    pub fn add(&mut self, name: &str, a: ValueId, b: ValueId) -> ValueId {
        assert_eq!(
            self.channels[a], self.channels[b],
            "add {name} needs equal channel counts"
        );
        let c = self.channels[a];
        self.push(name, LayerSpec::Add, vec![a, b], c)
    }

    pub fn batchnorm(&mut self, name: &str, x: ValueId, eps: f64, momentum: f64) -> ValueId {
        let c = self.channels[x];
        self.params
            .insert(format!("{name}.gamma"), Tensor::full([1, c, 1, 1], 1.0));
        self.params.insert(format!("{name}.beta"), Tensor::zeros([1, c, 1, 1]));
        self.params
            .insert(format!("{name}.running_mean"), Tensor::zeros([1, c, 1, 1]));
        self.params
            .insert(format!("{name}.running_var"), Tensor::full([1, c, 1, 1], 1.0));
        self.push(
            name,
            LayerSpec::BatchNorm {
                channels: c,
                eps,
                momentum,
            },
            vec![x],
            c,
        )
    }

    pub fn upsample(&mut self, name: &str, x: ValueId, factor: usize) -> ValueId {
        assert!(factor >= 1, "upsample factor must be positive");
        let c = self.channels[x];
        self.push(name, LayerSpec::Upsample { factor }, vec![x], c)
    }

    pub fn output(&mut self, name: &str, id: ValueId) {
        assert!(!self.outputs.iter().any(|(n, _)| n == name), "duplicate output {name}");
        self.outputs.push((name.to_string(), id));
    }

    pub fn finish(self) -> ComputeGraph {
        ComputeGraph {
            nodes: self.nodes,
            outputs: self.outputs,
            params: self.params,
        }
    }
}
