//! Dense feed-forward network with exact, hand-written gradients.
//!
//! The engine is built around three guarantees that the rest of the crate
//! leans on:
//!
//! 1. **Fixed accumulation order.** Every dot product and every gradient
//!    reduction runs left-to-right over the same index order, so a forward
//!    pass resumed from a stored intermediate activation (`start_depth > 0`)
//!    produces bit-identical logits to the full pass.
//! 2. **Partial backward.** Backpropagation stops at a *frozen boundary*:
//!    layers below it receive no gradients and are provably untouched by
//!    [`sgd_step`], which is what makes prefix freezing a pure win.
//! 3. **Analytic cost.** [`flop_count`] prices a step without running it,
//!    using the 2-FLOPs-per-multiply-accumulate convention, with a layer's
//!    backward costing twice its forward (one product for the weight
//!    gradient, one for the input gradient).

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use rand::RngExt;

/// Elementwise nonlinearity applied after a layer's affine transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed in terms of the *output* value, which is all the
    /// backward pass keeps around.
    #[inline]
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
        }
    }
}

/// One dense layer: `y = act(x W^T + b)`.
///
/// Weights are stored `out_dim x in_dim`, so row `o` holds the fan-in of
/// output unit `o`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::shape("Layer::new", weights.rows(), bias.len()));
        }
        Ok(Layer {
            weights,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    /// Applies the layer to a batch, one output element at a time with a
    /// fixed left-to-right inner sum.
    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape("Layer::forward", self.in_dim(), x.cols()));
        }
        let mut out = Matrix::zeros(x.rows(), self.out_dim());
        for r in 0..x.rows() {
            let xr = x.row(r);
            for o in 0..self.out_dim() {
                let w = self.weights.row(o);
                let mut acc = self.bias[o];
                for i in 0..w.len() {
                    acc += w[i] * xr[i];
                }
                out.set(r, o, self.activation.apply(acc));
            }
        }
        Ok(out)
    }
}

/// A stack of dense layers topped by an identity-activated classification
/// head. "Depth `d`" always means "the input to layer `d`", so depth 0 is the
/// raw input and depth `len()` is the head's input.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Model {
    layers: Vec<Layer>,
    head: Layer,
}

impl Model {
    /// Validates that consecutive layers chain dimensionally and that the
    /// head is identity-activated. At least two body layers are required;
    /// anything shallower has no prefix worth freezing.
    pub fn new(layers: Vec<Layer>, head: Layer) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::invalid(format!(
                "model needs at least 2 layers, got {}",
                layers.len()
            )));
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::shape("Model::new", w[0].out_dim(), w[1].in_dim()));
            }
        }
        if head.in_dim() != layers.last().unwrap().out_dim() {
            return Err(Error::shape(
                "Model::new head",
                layers.last().unwrap().out_dim(),
                head.in_dim(),
            ));
        }
        if head.activation != Activation::Identity {
            return Err(Error::invalid("classification head must be identity-activated"));
        }
        Ok(Model { layers, head })
    }

    /// Xavier-uniform initialisation driven entirely by the caller's RNG, so
    /// a fixed seed yields a bit-identical model.
    pub fn random(
        in_dim: usize,
        hidden: &[usize],
        num_classes: usize,
        activation: Activation,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        if in_dim == 0 || num_classes == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid("all model dimensions must be nonzero"));
        }
        let mut layers = Vec::with_capacity(hidden.len());
        let mut prev = in_dim;
        for &h in hidden {
            layers.push(Layer::new(xavier(h, prev, rng), vec![0.0; h], activation)?);
            prev = h;
        }
        let head = Layer::new(xavier(num_classes, prev, rng), vec![0.0; num_classes], Activation::Identity)?;
        Model::new(layers, head)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn head(&self) -> &Layer {
        &self.head
    }

    /// In-place access for optimizers and parameter-space probes. Callers
    /// must not change a layer's dimensions.
    pub fn layer_mut(&mut self, index: usize) -> &mut Layer {
        &mut self.layers[index]
    }

    pub fn head_mut(&mut self) -> &mut Layer {
        &mut self.head
    }

    /// Number of freezable body layers (the head is never part of the prefix).
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_dim()
    }

    /// Width of the activation vector entering layer `depth`.
    pub fn width_at_depth(&self, depth: usize) -> Result<usize> {
        if depth > self.depth() {
            return Err(Error::invalid(format!(
                "depth {depth} exceeds model depth {}",
                self.depth()
            )));
        }
        Ok(if depth == 0 {
            self.input_dim()
        } else {
            self.layers[depth - 1].out_dim()
        })
    }
}

fn xavier(out_dim: usize, in_dim: usize, rng: &mut impl rand::Rng) -> Matrix {
    let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let mut m = Matrix::zeros(out_dim, in_dim);
    for o in 0..out_dim {
        for i in 0..in_dim {
            m.set(o, i, rng.random_range(-limit..limit));
        }
    }
    m
}

/// Everything the backward pass needs from a forward pass that may have
/// started partway into the network.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    start_depth: usize,
    /// The matrix fed in: raw features when `start_depth == 0`, otherwise a
    /// stored activation at that depth.
    inputs: Matrix,
    /// One activation per executed layer, then the head logits; length is
    /// `(depth - start_depth) + 1`.
    outputs: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn start_depth(&self) -> usize {
        self.start_depth
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn outputs(&self) -> &[Matrix] {
        &self.outputs
    }

    pub fn logits(&self) -> &Matrix {
        self.outputs.last().expect("trace always holds the head output")
    }

    /// Activation vector batch at `depth` (the input to layer `depth`).
    /// Only depths in `start_depth ..= model.depth()` exist in the trace.
    pub fn activation_at_depth(&self, depth: usize, model_depth: usize) -> Result<&Matrix> {
        if depth < self.start_depth || depth > model_depth {
            return Err(Error::invalid(format!(
                "depth {depth} not covered by trace starting at {}",
                self.start_depth
            )));
        }
        Ok(if depth == self.start_depth {
            &self.inputs
        } else {
            &self.outputs[depth - self.start_depth - 1]
        })
    }
}

/// Runs layers `start_depth..` and the head. `start_depth == 0` is a full
/// pass; larger values resume from a stored activation at that depth.
pub fn forward(model: &Model, input: &Matrix, start_depth: usize) -> Result<ForwardTrace> {
    if start_depth > model.depth() {
        return Err(Error::invalid(format!(
            "start_depth {start_depth} exceeds model depth {}",
            model.depth()
        )));
    }
    let expected = model.width_at_depth(start_depth)?;
    if input.cols() != expected {
        return Err(Error::shape("forward input", expected, input.cols()));
    }
    let mut outputs = Vec::with_capacity(model.depth() - start_depth + 1);
    let mut current = input;
    for layer in &model.layers[start_depth..] {
        outputs.push(layer.forward(current)?);
        current = outputs.last().unwrap();
    }
    outputs.push(model.head.forward(current)?);
    Ok(ForwardTrace {
        start_depth,
        inputs: input.clone(),
        outputs,
    })
}

/// Runs body layers `from..to` only, without the head, returning the
/// activation at depth `to`. Used to bring a stored activation at one depth
/// up to a deeper one; `from == to` returns the input unchanged.
pub fn forward_between(model: &Model, input: &Matrix, from: usize, to: usize) -> Result<Matrix> {
    if from > to || to > model.depth() {
        return Err(Error::invalid(format!(
            "need from <= to <= {}, got {from} and {to}",
            model.depth()
        )));
    }
    let expected = model.width_at_depth(from)?;
    if input.cols() != expected {
        return Err(Error::shape("forward_between input", expected, input.cols()));
    }
    let mut current = input.clone();
    for layer in &model.layers[from..to] {
        current = layer.forward(&current)?;
    }
    Ok(current)
}

/// Analytic cost of [`forward_between`]: the forward flops of body layers
/// `from..to` alone, with no head contribution.
pub fn span_forward_flops(model: &Model, batch: usize, from: usize, to: usize) -> Result<u64> {
    if from > to || to > model.depth() {
        return Err(Error::invalid(format!(
            "need from <= to <= {}, got {from} and {to}",
            model.depth()
        )));
    }
    let b = batch as u64;
    Ok(model.layers[from..to]
        .iter()
        .map(|l| 2 * b * l.out_dim() as u64 * l.in_dim() as u64)
        .sum())
}

/// Mean softmax cross-entropy over the batch, plus its gradient with respect
/// to the logits. Each gradient row sums to zero by construction.
pub fn loss_grad(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (batch, classes) = (logits.rows(), logits.cols());
    if batch == 0 {
        return Err(Error::invalid("empty batch has no loss"));
    }
    if labels.len() != batch {
        return Err(Error::shape("loss_grad labels", batch, labels.len()));
    }
    for (row, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange {
                label,
                classes,
                row,
            });
        }
    }
    let mut dlogits = Matrix::zeros(batch, classes);
    let mut loss = 0.0;
    let inv_batch = 1.0 / batch as f64;
    for r in 0..batch {
        let row = logits.row(r);
        let mut max = row[0];
        for &v in &row[1..] {
            if v > max {
                max = v;
            }
        }
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        // log-sum-exp form keeps the per-sample loss finite and >= 0.
        loss += sum.ln() - (row[labels[r]] - max);
        for c in 0..classes {
            let p = (row[c] - max).exp() / sum;
            let y = if c == labels[r] { 1.0 } else { 0.0 };
            dlogits.set(r, c, (p - y) * inv_batch);
        }
    }
    Ok((loss * inv_batch, dlogits))
}

/// Gradients for the head plus every layer at or above the frozen boundary.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Gradient of one training step. Holds no entry for frozen layers, so a
/// later [`sgd_step`] cannot touch them even by accident.
#[derive(Debug, Clone)]
pub struct GradientSet {
    first_layer: usize,
    layers: Vec<LayerGrads>,
    head: LayerGrads,
}

impl GradientSet {
    /// Index of the shallowest layer that received a gradient.
    pub fn first_layer(&self) -> usize {
        self.first_layer
    }

    pub fn head(&self) -> &LayerGrads {
        &self.head
    }

    pub fn layer(&self, index: usize) -> Option<&LayerGrads> {
        index
            .checked_sub(self.first_layer)
            .and_then(|i| self.layers.get(i))
    }

    /// `(layer_index, grads)` pairs in ascending layer order.
    pub fn active(&self) -> impl Iterator<Item = (usize, &LayerGrads)> {
        self.layers
            .iter()
            .enumerate()
            .map(move |(i, g)| (self.first_layer + i, g))
    }
}

/// Backpropagates `dlogits` through the head and down to (and including)
/// `frozen_boundary`. Layers below the boundary are never visited.
pub fn backward(
    model: &Model,
    trace: &ForwardTrace,
    dlogits: &Matrix,
    frozen_boundary: usize,
) -> Result<GradientSet> {
    if frozen_boundary > model.depth() {
        return Err(Error::invalid(format!(
            "frozen boundary {frozen_boundary} exceeds model depth {}",
            model.depth()
        )));
    }
    if frozen_boundary < trace.start_depth {
        return Err(Error::invalid(format!(
            "frozen boundary {frozen_boundary} below trace start {}; activations for those layers were never computed",
            trace.start_depth
        )));
    }
    let logits = trace.logits();
    if dlogits.rows() != logits.rows() || dlogits.cols() != logits.cols() {
        return Err(Error::shape(
            "backward dlogits",
            format!("{}x{}", logits.rows(), logits.cols()),
            format!("{}x{}", dlogits.rows(), dlogits.cols()),
        ));
    }

    let head_input = trace.activation_at_depth(model.depth(), model.depth())?;
    let (head, mut dx) = affine_backward(&model.head, head_input, dlogits, true);
    let mut dx = dx.take().expect("head always propagates");

    let mut layers_rev = Vec::with_capacity(model.depth() - frozen_boundary);
    for j in (frozen_boundary..model.depth()).rev() {
        let layer = &model.layers[j];
        let out = trace.activation_at_depth(j + 1, model.depth())?;
        // Fold the activation derivative into the upstream gradient.
        let mut dz = Matrix::zeros(dx.rows(), dx.cols());
        for r in 0..dx.rows() {
            for o in 0..dx.cols() {
                dz.set(r, o, dx.get(r, o) * layer.activation.derivative_from_output(out.get(r, o)));
            }
        }
        let input = trace.activation_at_depth(j, model.depth())?;
        let propagate = j > frozen_boundary;
        let (grads, next_dx) = affine_backward(layer, input, &dz, propagate);
        layers_rev.push(grads);
        if let Some(next) = next_dx {
            dx = next;
        }
    }
    layers_rev.reverse();
    Ok(GradientSet {
        first_layer: frozen_boundary,
        layers: layers_rev,
        head,
    })
}

/// Weight/bias gradients of one affine transform, and optionally the
/// gradient with respect to its input. All reductions run in ascending row
/// order so repeated runs are bit-identical.
fn affine_backward(
    layer: &Layer,
    input: &Matrix,
    dz: &Matrix,
    propagate: bool,
) -> (LayerGrads, Option<Matrix>) {
    let (batch, out_dim, in_dim) = (input.rows(), layer.out_dim(), layer.in_dim());
    let mut dw = Matrix::zeros(out_dim, in_dim);
    let mut db = vec![0.0; out_dim];
    for r in 0..batch {
        let xr = input.row(r);
        let dzr = dz.row(r);
        for o in 0..out_dim {
            let g = dzr[o];
            db[o] += g;
            let row = &mut dw.data_mut()[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                row[i] += g * xr[i];
            }
        }
    }
    let dx = propagate.then(|| {
        let mut dx = Matrix::zeros(batch, in_dim);
        for r in 0..batch {
            let dzr = dz.row(r);
            for i in 0..in_dim {
                let mut acc = 0.0;
                for o in 0..out_dim {
                    acc += dzr[o] * layer.weights.get(o, i);
                }
                dx.set(r, i, acc);
            }
        }
        dx
    });
    (LayerGrads { weights: dw, bias: db }, dx)
}

/// Plain SGD: `w -= lr * g` for exactly the layers present in `grads` (plus
/// the head). Frozen layers have no entry and therefore cannot move.
pub fn sgd_step(model: &mut Model, grads: &GradientSet, lr: f64) -> Result<()> {
    if !lr.is_finite() {
        return Err(Error::invalid(format!("non-finite learning rate {lr}")));
    }
    for (j, g) in grads.active() {
        let layer = model
            .layers
            .get_mut(j)
            .ok_or_else(|| Error::invalid(format!("gradient for layer {j} beyond model depth")))?;
        layer.weights.sub_scaled(&g.weights, lr)?;
        for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
            *b -= lr * gb;
        }
    }
    model.head.weights.sub_scaled(&grads.head.weights, lr)?;
    for (b, gb) in model.head.bias.iter_mut().zip(&grads.head.bias) {
        *b -= lr * gb;
    }
    Ok(())
}

/// FLOP totals for one step, using 2 FLOPs per multiply-accumulate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FlopCount {
    pub forward: u64,
    pub backward: u64,
}

/// Analytic cost of a step with the given partial-forward start and frozen
/// boundary. A layer's backward is charged at twice its forward (weight
/// gradient + input gradient); the head is always live.
pub fn flop_count(
    model: &Model,
    batch: usize,
    frozen_boundary: usize,
    start_depth: usize,
) -> Result<FlopCount> {
    if start_depth > frozen_boundary || frozen_boundary > model.depth() {
        return Err(Error::invalid(format!(
            "need start_depth <= frozen_boundary <= {}, got {start_depth} and {frozen_boundary}",
            model.depth()
        )));
    }
    let b = batch as u64;
    let layer_fwd = |l: &Layer| 2 * b * l.out_dim() as u64 * l.in_dim() as u64;
    let head_fwd = layer_fwd(&model.head);
    let mut forward = head_fwd;
    for layer in &model.layers[start_depth..] {
        forward += layer_fwd(layer);
    }
    let mut backward = 2 * head_fwd;
    for layer in &model.layers[frozen_boundary..] {
        backward += 2 * layer_fwd(layer);
    }
    Ok(FlopCount { forward, backward })
}
