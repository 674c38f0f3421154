//! Dense feed-forward classifier: linear or one hidden rectifier layer.
//!
//! Parameters live in one flat buffer laid out layer by layer, weight
//! (row-major, `out x in`) followed by bias. Gradients returned by
//! [`backward`] use the same layout, so the optimizer and the gradient
//! projection work on plain slices.

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::par::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
}

impl LayerShape {
    fn weight_len(self) -> usize {
        self.inputs * self.outputs
    }

    fn len(self) -> usize {
        self.weight_len() + self.outputs
    }
}

/// A named contiguous range of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpan {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    shapes: Vec<LayerShape>,
    hidden_dim: usize,
    flat: Vec<f64>,
}

impl ModelParams {
    /// Zero-initialised model. `hidden_dim == 0` gives a linear classifier.
    pub fn zeros(input_dim: usize, hidden_dim: usize, classes: usize) -> Result<Self> {
        if input_dim == 0 || classes == 0 {
            return Err(Error::Parameter(format!(
                "model needs positive input dim and class count, got {input_dim} and {classes}"
            )));
        }
        let shapes = if hidden_dim == 0 {
            vec![LayerShape {
                inputs: input_dim,
                outputs: classes,
            }]
        } else {
            vec![
                LayerShape {
                    inputs: input_dim,
                    outputs: hidden_dim,
                },
                LayerShape {
                    inputs: hidden_dim,
                    outputs: classes,
                },
            ]
        };
        let total = shapes.iter().map(|s| s.len()).sum();
        Ok(Self {
            shapes,
            hidden_dim,
            flat: vec![0.0; total],
        })
    }

    /// Fan-based uniform init for weights, zero biases.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut params = Self::zeros(input_dim, hidden_dim, classes)?;
        for l in 0..params.shapes.len() {
            let shape = params.shapes[l];
            let limit = (6.0 / (shape.inputs + shape.outputs) as f64).sqrt();
            for w in params.weight_mut(l) {
                *w = rng.random_range(-limit..=limit);
            }
        }
        Ok(params)
    }

    /// Builds a model from explicit `(weight, bias)` pairs.
    pub fn from_layers(layers: &[(Matrix, Vec<f64>)]) -> Result<Self> {
        if layers.is_empty() || layers.len() > 2 {
            return Err(Error::Parameter(format!(
                "expected 1 or 2 layers, got {}",
                layers.len()
            )));
        }
        for (w, b) in layers {
            if w.rows() != b.len() {
                return Err(Error::dim("ModelParams::from_layers bias", w.rows(), b.len()));
            }
        }
        if layers.len() == 2 && layers[0].0.rows() != layers[1].0.cols() {
            return Err(Error::dim(
                "ModelParams::from_layers chain",
                layers[0].0.rows(),
                layers[1].0.cols(),
            ));
        }
        let input_dim = layers[0].0.cols();
        let classes = layers.last().map(|(w, _)| w.rows()).unwrap_or(0);
        let hidden = if layers.len() == 2 { layers[0].0.rows() } else { 0 };
        let mut params = Self::zeros(input_dim, hidden, classes)?;
        for (l, (w, b)) in layers.iter().enumerate() {
            params.weight_mut(l).copy_from_slice(w.as_slice());
            params.bias_mut(l).copy_from_slice(b);
        }
        if !params.flat.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite initial weights".into()));
        }
        Ok(params)
    }

    pub fn input_dim(&self) -> usize {
        self.shapes[0].inputs
    }

    pub fn classes(&self) -> usize {
        self.shapes[self.shapes.len() - 1].outputs
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// Width of the penultimate representation.
    pub fn feature_dim(&self) -> usize {
        if self.hidden_dim == 0 {
            self.input_dim()
        } else {
            self.hidden_dim
        }
    }

    pub fn num_layers(&self) -> usize {
        self.shapes.len()
    }

    pub fn layer_shape(&self, layer: usize) -> LayerShape {
        self.shapes[layer]
    }

    pub fn num_params(&self) -> usize {
        self.flat.len()
    }

    fn offset(&self, layer: usize) -> usize {
        self.shapes[..layer].iter().map(|s| s.len()).sum()
    }

    pub fn weight(&self, layer: usize) -> &[f64] {
        let o = self.offset(layer);
        &self.flat[o..o + self.shapes[layer].weight_len()]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut [f64] {
        let o = self.offset(layer);
        let n = self.shapes[layer].weight_len();
        &mut self.flat[o..o + n]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let s = self.shapes[layer];
        let o = self.offset(layer) + s.weight_len();
        &self.flat[o..o + s.outputs]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let s = self.shapes[layer];
        let o = self.offset(layer) + s.weight_len();
        &mut self.flat[o..o + s.outputs]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.flat.clone()
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat.len() {
            return Err(Error::dim("ModelParams::unflatten", self.flat.len(), flat.len()));
        }
        self.flat.copy_from_slice(flat);
        Ok(())
    }

    /// One span per weight tensor and per bias vector, tiling the flat vector.
    pub fn layer_spans(&self) -> Vec<LayerSpan> {
        let mut spans = Vec::with_capacity(2 * self.shapes.len());
        let mut start = 0;
        for (l, s) in self.shapes.iter().enumerate() {
            spans.push(LayerSpan {
                name: format!("fc{l}.weight"),
                start,
                len: s.weight_len(),
            });
            start += s.weight_len();
            spans.push(LayerSpan {
                name: format!("fc{l}.bias"),
                start,
                len: s.outputs,
            });
            start += s.outputs;
        }
        spans
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord {
    pub inputs: Matrix,
    /// Penultimate activations. Equal to `inputs` for the linear model.
    pub features: Matrix,
    pub logits: Matrix,
}

fn affine(x: &Matrix, weight: &[f64], bias: &[f64], relu: bool) -> Matrix {
    let outputs = bias.len();
    let inputs = x.cols();
    let mut out = Matrix::zeros(x.rows(), outputs);
    let exec = Execution::for_work(x.rows() * outputs * inputs);
    exec.for_each_chunk(out.as_mut_slice(), outputs, |b, row| {
        let xb = x.row(b);
        for (j, o) in row.iter_mut().enumerate() {
            let v = dot(&weight[j * inputs..(j + 1) * inputs], xb) + bias[j];
            *o = if relu { v.max(0.0) } else { v };
        }
    });
    out
}

pub fn forward(params: &ModelParams, batch: &Matrix) -> Result<ForwardRecord> {
    if batch.cols() != params.input_dim() {
        return Err(Error::dim("forward input", params.input_dim(), batch.cols()));
    }
    if params.num_layers() == 1 {
        let logits = affine(batch, params.weight(0), params.bias(0), false);
        return Ok(ForwardRecord {
            inputs: batch.clone(),
            features: batch.clone(),
            logits,
        });
    }
    let features = affine(batch, params.weight(0), params.bias(0), true);
    let logits = affine(&features, params.weight(1), params.bias(1), false);
    Ok(ForwardRecord {
        inputs: batch.clone(),
        features,
        logits,
    })
}

/// Writes dL/dW and dL/db for one affine layer into `grad` (weight then bias).
fn affine_grad(input: &Matrix, delta: &Matrix, grad: &mut [f64]) {
    let (batch, outputs) = delta.shape();
    let inputs = input.cols();
    let (gw, gb) = grad.split_at_mut(outputs * inputs);
    let exec = Execution::for_work(batch * outputs * inputs);
    exec.for_each_chunk(gw, inputs, |j, row| {
        for b in 0..batch {
            let d = delta[(b, j)];
            if d != 0.0 {
                for (g, x) in row.iter_mut().zip(input.row(b)) {
                    *g += d * x;
                }
            }
        }
    });
    for (j, g) in gb.iter_mut().enumerate() {
        *g = (0..batch).map(|b| delta[(b, j)]).sum();
    }
}

/// Gradient of the scalar loss w.r.t. the flat parameters, given dL/dlogits.
pub fn backward(
    params: &ModelParams,
    record: &ForwardRecord,
    dloss_dlogits: &Matrix,
) -> Result<Vec<f64>> {
    dloss_dlogits.ensure_shape(
        "backward dloss_dlogits",
        record.logits.rows(),
        record.logits.cols(),
    )?;
    let mut grad = vec![0.0; params.num_params()];
    if params.num_layers() == 1 {
        affine_grad(&record.inputs, dloss_dlogits, &mut grad);
        return Ok(grad);
    }

    let split = params.layer_shape(0).len();
    let (g0, g1) = grad.split_at_mut(split);
    affine_grad(&record.features, dloss_dlogits, g1);

    // back through the classifier and the rectifier
    let hidden = params.hidden_dim();
    let classes = params.classes();
    let w1 = params.weight(1);
    let mut delta = Matrix::zeros(record.features.rows(), hidden);
    let exec = Execution::for_work(record.features.rows() * hidden * classes);
    exec.for_each_chunk(delta.as_mut_slice(), hidden, |b, row| {
        let d = dloss_dlogits.row(b);
        let h = record.features.row(b);
        for (k, o) in row.iter_mut().enumerate() {
            if h[k] > 0.0 {
                *o = (0..classes).map(|j| d[j] * w1[j * hidden + k]).sum();
            }
        }
    });
    affine_grad(&record.inputs, &delta, g0);
    Ok(grad)
}

/// Heavy-ball SGD: `v <- momentum * v + g; theta <- theta - lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(num_params: usize, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Parameter(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            momentum,
            velocity: vec![0.0; num_params],
        })
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut ModelParams, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != params.num_params() || grad.len() != self.velocity.len() {
            return Err(Error::dim("Sgd::step gradient", params.num_params(), grad.len()));
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate must be positive, got {lr}")));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient entry {} at index {i}; step aborted",
                grad[i]
            )));
        }
        for ((v, g), p) in self.velocity.iter_mut().zip(grad).zip(params.flat.iter_mut()) {
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
        Ok(())
    }
}
