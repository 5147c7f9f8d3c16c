//! Small dense forward models and the output-distillation loss.
//!
//! A [`ForwardModel`] is an ordered list of layers — linear (`x W^T + b`) or
//! elementwise activation — whose weights live in a [`TensorMap`] under
//! declared tensor names (weights `[out, in]`, biases `[out]`). Inputs are f32
//! batches; evaluation runs in f64 so that loss surfaces over the modulators
//! are smooth enough for finite differences.
//!
//! The module also provides (crate-internal) weight-space backpropagation,
//! used both by the synthetic-suite finetuner and by the analytic gradient
//! mode of modulator training.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorMap;

#[derive(Debug, Error)]
pub enum ForwardError {
    #[error("layer {layer}: weight tensor {name:?} not found")]
    MissingTensor { layer: usize, name: String },
    #[error("layer {layer}: tensor {name:?} has shape {got:?}, expected {expected}")]
    BadTensorShape {
        layer: usize,
        name: String,
        expected: String,
        got: Vec<usize>,
    },
    #[error("layer {layer}: expects {expected} input features, previous layer produces {got}")]
    DimensionChain {
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("model produces {got} output features but declares output_dim {declared}")]
    OutputDim { declared: usize, got: usize },
    #[error("batch has {got} columns, model expects input_dim {expected}")]
    BatchWidth { expected: usize, got: usize },
    #[error("batch must be non-empty")]
    EmptyBatch,
    #[error("batch: {rows} x {cols} does not match {len} data values")]
    BatchShape { rows: usize, cols: usize, len: usize },
    #[error("batch: non-finite value at flat index {0}")]
    NonFinite(usize),
}

/// Elementwise activation function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the input `x`.
    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// One layer of a forward model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    /// `y = x W^T + b` with `W: [out, in]` and optional `b: [out]`.
    Linear {
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
    Activation { kind: Activation },
}

/// An ordered stack of layers with declared input/output widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardModel {
    pub input_dim: usize,
    pub output_dim: usize,
    pub layers: Vec<Layer>,
}

/// A finite f32 input batch, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Batch {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, ForwardError> {
        if rows == 0 || cols == 0 {
            return Err(ForwardError::EmptyBatch);
        }
        if rows * cols != data.len() {
            return Err(ForwardError::BatchShape {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(ForwardError::NonFinite(i));
        }
        Ok(Self { rows, cols, data })
    }

    #[must_use]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[must_use]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[must_use]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[must_use]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// A new batch holding the given subset of rows, in the given order.
    #[must_use]
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Row-major f64 matrix used for model outputs and internal activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    #[must_use]
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[must_use]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn from_batch(b: &Batch) -> Self {
        Self {
            rows: b.rows,
            cols: b.cols,
            data: b.data.iter().map(|&v| f64::from(v)).collect(),
        }
    }
}

// ── Flat weight layout and compiled models ─────────────────────────────────

/// Offsets of each named tensor inside the canonical flattened weight vector.
#[derive(Debug, Clone)]
pub(crate) struct FlatLayout {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    offsets: Vec<usize>,
    total: usize,
}

impl FlatLayout {
    pub(crate) fn of(map: &TensorMap) -> Self {
        let mut names = Vec::with_capacity(map.len());
        let mut shapes = Vec::with_capacity(map.len());
        let mut offsets = Vec::with_capacity(map.len());
        let mut total = 0usize;
        for t in map.tensors() {
            names.push(t.name().to_owned());
            shapes.push(t.shape().to_vec());
            offsets.push(total);
            total += t.len();
        }
        Self {
            names,
            shapes,
            offsets,
            total,
        }
    }

    #[cfg(test)]
    pub(crate) fn total(&self) -> usize {
        self.total
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }

    /// Materialize a flat f64 weight vector back into a map with this layout.
    pub(crate) fn unpack(&self, flat: &[f64]) -> Result<TensorMap, crate::tensor::TensorError> {
        debug_assert_eq!(flat.len(), self.total);
        let mut tensors = Vec::with_capacity(self.names.len());
        for i in 0..self.names.len() {
            let len: usize = self.shapes[i].iter().product();
            let data = flat[self.offsets[i]..self.offsets[i] + len]
                .iter()
                .map(|&v| v as f32)
                .collect();
            tensors.push(crate::tensor::Tensor::new(
                self.names[i].clone(),
                self.shapes[i].clone(),
                data,
            )?);
        }
        TensorMap::from_tensors(tensors)
    }
}

/// Flatten a map to f64 in canonical order.
pub(crate) fn pack_f64(map: &TensorMap) -> Vec<f64> {
    map.flatten().iter().map(|&v| f64::from(v)).collect()
}

enum CompiledLayer {
    Linear {
        w_off: usize,
        out: usize,
        inn: usize,
        b_off: Option<usize>,
    },
    Activation(Activation),
}

/// A model resolved against a concrete weight layout, with every name and
/// shape checked once up front.
pub(crate) struct CompiledModel {
    input_dim: usize,
    steps: Vec<CompiledLayer>,
}

impl CompiledModel {
    pub(crate) fn compile(model: &ForwardModel, layout: &FlatLayout) -> Result<Self, ForwardError> {
        let mut steps = Vec::with_capacity(model.layers.len());
        let mut width = model.input_dim;
        for (li, layer) in model.layers.iter().enumerate() {
            match layer {
                Layer::Linear { weight, bias } => {
                    let wi = layout
                        .index_of(weight)
                        .ok_or_else(|| ForwardError::MissingTensor {
                            layer: li,
                            name: weight.clone(),
                        })?;
                    let wshape = &layout.shapes[wi];
                    let [out, inn] = wshape.as_slice() else {
                        return Err(ForwardError::BadTensorShape {
                            layer: li,
                            name: weight.clone(),
                            expected: "rank-2 [out, in]".into(),
                            got: wshape.clone(),
                        });
                    };
                    if *inn != width {
                        return Err(ForwardError::DimensionChain {
                            layer: li,
                            expected: *inn,
                            got: width,
                        });
                    }
                    let b_off = match bias {
                        Some(bname) => {
                            let bi = layout.index_of(bname).ok_or_else(|| {
                                ForwardError::MissingTensor {
                                    layer: li,
                                    name: bname.clone(),
                                }
                            })?;
                            if layout.shapes[bi] != vec![*out] {
                                return Err(ForwardError::BadTensorShape {
                                    layer: li,
                                    name: bname.clone(),
                                    expected: format!("rank-1 [{out}]"),
                                    got: layout.shapes[bi].clone(),
                                });
                            }
                            Some(layout.offsets[bi])
                        }
                        None => None,
                    };
                    steps.push(CompiledLayer::Linear {
                        w_off: layout.offsets[wi],
                        out: *out,
                        inn: *inn,
                        b_off,
                    });
                    width = *out;
                }
                Layer::Activation { kind } => steps.push(CompiledLayer::Activation(*kind)),
            }
        }
        if width != model.output_dim {
            return Err(ForwardError::OutputDim {
                declared: model.output_dim,
                got: width,
            });
        }
        Ok(Self {
            input_dim: model.input_dim,
            steps,
        })
    }

    /// Forward pass; when `trace` is given, the input of every layer is
    /// cached for a following backward pass.
    pub(crate) fn forward_flat(
        &self,
        w: &[f64],
        batch: &Batch,
        mut trace: Option<&mut Vec<Matrix>>,
    ) -> Result<Matrix, ForwardError> {
        if batch.cols() != self.input_dim {
            return Err(ForwardError::BatchWidth {
                expected: self.input_dim,
                got: batch.cols(),
            });
        }
        let mut cur = Matrix::from_batch(batch);
        for step in &self.steps {
            if let Some(t) = trace.as_deref_mut() {
                t.push(cur.clone());
            }
            cur = match step {
                CompiledLayer::Linear {
                    w_off,
                    out,
                    inn,
                    b_off,
                } => {
                    let mut next = Matrix::zeros(cur.rows, *out);
                    for r in 0..cur.rows {
                        let x = cur.row(r);
                        let y = &mut next.data[r * out..(r + 1) * out];
                        for (o, yo) in y.iter_mut().enumerate() {
                            let wrow = &w[w_off + o * inn..w_off + (o + 1) * inn];
                            let mut acc = match b_off {
                                Some(b) => w[b + o],
                                None => 0.0,
                            };
                            for (xi, wi) in x.iter().zip(wrow) {
                                acc += xi * wi;
                            }
                            *yo = acc;
                        }
                    }
                    next
                }
                CompiledLayer::Activation(a) => {
                    let mut next = cur.clone();
                    for v in &mut next.data {
                        *v = a.apply(*v);
                    }
                    next
                }
            };
        }
        Ok(cur)
    }

    /// Mean-squared-error loss against `targets` plus its gradient with
    /// respect to every weight, via reverse-mode accumulation.
    pub(crate) fn loss_and_weight_grad(
        &self,
        w: &[f64],
        batch: &Batch,
        targets: &Matrix,
        grad: &mut [f64],
    ) -> Result<f64, ForwardError> {
        let mut inputs = Vec::with_capacity(self.steps.len());
        let outputs = self.forward_flat(w, batch, Some(&mut inputs))?;
        debug_assert_eq!(outputs.rows, targets.rows);
        debug_assert_eq!(outputs.cols, targets.cols);
        let denom = (outputs.rows * outputs.cols) as f64;
        let mut loss = 0.0f64;
        // dL/dY for L = mean((Y - T)^2)
        let mut g = Matrix::zeros(outputs.rows, outputs.cols);
        for (gi, (&y, &t)) in g
            .data
            .iter_mut()
            .zip(outputs.data.iter().zip(&targets.data))
        {
            let d = y - t;
            loss += d * d;
            *gi = 2.0 * d / denom;
        }
        loss /= denom;

        grad.fill(0.0);
        for (step, x) in self.steps.iter().zip(&inputs).rev() {
            match step {
                CompiledLayer::Linear {
                    w_off,
                    out,
                    inn,
                    b_off,
                } => {
                    let mut gprev = Matrix::zeros(x.rows, *inn);
                    for r in 0..x.rows {
                        let xr = x.row(r);
                        let gr = g.row(r);
                        for (o, &go) in gr.iter().enumerate().take(*out) {
                            let wg = &mut grad[w_off + o * inn..w_off + (o + 1) * inn];
                            for (wgi, &xi) in wg.iter_mut().zip(xr) {
                                *wgi += go * xi;
                            }
                            if let Some(b) = b_off {
                                grad[b + o] += go;
                            }
                            let wrow = &w[w_off + o * inn..w_off + (o + 1) * inn];
                            let gp = &mut gprev.data[r * inn..(r + 1) * inn];
                            for (gpi, &wi) in gp.iter_mut().zip(wrow) {
                                *gpi += go * wi;
                            }
                        }
                    }
                    g = gprev;
                }
                CompiledLayer::Activation(a) => {
                    for (gi, &xi) in g.data.iter_mut().zip(&x.data) {
                        *gi *= a.derivative(xi);
                    }
                }
            }
        }
        Ok(loss)
    }
}

// ── Public evaluation entry points ──────────────────────────────────────────

/// Evaluate `model` on `batch` with weights from `weights`.
pub fn forward(
    model: &ForwardModel,
    weights: &TensorMap,
    batch: &Batch,
) -> Result<Matrix, ForwardError> {
    let layout = FlatLayout::of(weights);
    let compiled = CompiledModel::compile(model, &layout)?;
    compiled.forward_flat(&pack_f64(weights), batch, None)
}

/// Mean squared error between teacher and student outputs on one batch,
/// averaged over every sample and output dimension.
pub fn distill_loss(
    model: &ForwardModel,
    teacher_weights: &TensorMap,
    student_weights: &TensorMap,
    batch: &Batch,
) -> Result<f64, ForwardError> {
    let teacher = forward(model, teacher_weights, batch)?;
    let student = forward(model, student_weights, batch)?;
    Ok(mse(&student, &teacher))
}

/// Mean squared difference between two equally shaped matrices.
#[must_use]
pub fn mse(a: &Matrix, b: &Matrix) -> f64 {
    debug_assert_eq!(a.rows, b.rows);
    debug_assert_eq!(a.cols, b.cols);
    let mut acc = 0.0f64;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        acc += (x - y) * (x - y);
    }
    acc / (a.rows * a.cols) as f64
}
