//! Fully connected classification head: affine → batch norm → ReLU →
//! inverted dropout per hidden layer, affine → softmax at the output.
//! Categorical cross-entropy and exact backpropagation (including the
//! batch-statistics terms of batch norm).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{matmul, matmul_nt, matmul_tn, Matrix, RandomStream};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub dropout: f64,
    pub batch_norm: bool,
}

/// Layer stack of a classification head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layers: Vec<LayerSpec>,
}

impl MlpSpec {
    /// Hidden layers of the given `(width, dropout)` with batch norm, then a
    /// softmax layer of `classes` units.
    pub fn with_hidden(input: usize, hidden: &[(usize, f64)], classes: usize) -> MlpSpec {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input;
        for &(width, dropout) in hidden {
            layers.push(LayerSpec {
                in_dim: prev,
                out_dim: width,
                activation: Activation::Relu,
                dropout,
                batch_norm: true,
            });
            prev = width;
        }
        layers.push(LayerSpec {
            in_dim: prev,
            out_dim: classes,
            activation: Activation::Softmax,
            dropout: 0.0,
            batch_norm: false,
        });
        MlpSpec { layers }
    }

    /// The reference head: k → 512 → 256 → 128 → 64 → C, dropout 0.5 → 0.2.
    pub fn reference(input: usize, classes: usize) -> MlpSpec {
        MlpSpec::with_hidden(
            input,
            &[(512, 0.5), (256, 0.4), (128, 0.3), (64, 0.2)],
            classes,
        )
    }

    /// The shorter variant: k → 256 → 128 → 64 → C, dropout 0.5 → 0.3.
    pub fn compact(input: usize, classes: usize) -> MlpSpec {
        MlpSpec::with_hidden(input, &[(256, 0.5), (128, 0.4), (64, 0.3)], classes)
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let last = self.layers.len().checked_sub(1).ok_or_else(|| {
            Error::DimChain("network has no layers".into())
        })?;
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(Error::DimChain(format!("layer {i} has a zero dimension")));
            }
            if i > 0 && self.layers[i - 1].out_dim != l.in_dim {
                return Err(Error::DimChain(format!(
                    "layer {} outputs {} but layer {i} expects {}",
                    i - 1,
                    self.layers[i - 1].out_dim,
                    l.in_dim
                )));
            }
            if !(0.0..1.0).contains(&l.dropout) {
                return Err(Error::DimChain(format!(
                    "layer {i} dropout {} outside [0, 1)",
                    l.dropout
                )));
            }
            let is_last = i == last;
            if is_last != (l.activation == Activation::Softmax) {
                return Err(Error::DimChain(
                    "softmax must be the activation of the final layer only".into(),
                ));
            }
            if is_last && (l.batch_norm || l.dropout != 0.0) {
                return Err(Error::DimChain(
                    "the softmax layer takes neither batch norm nor dropout".into(),
                ));
            }
        }
        if self.output_dim() < 2 {
            return Err(Error::DimChain("a classifier needs at least 2 outputs".into()));
        }
        Ok(())
    }
}

/// Weights and biases counted as `(in + 1) × out` per layer.
pub fn param_count(spec: &MlpSpec) -> usize {
    spec.layers.iter().map(|l| (l.in_dim + 1) * l.out_dim).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub spec: LayerSpec,
    /// `out × in`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    /// Batch-norm scale, shift and running statistics; empty without batch norm.
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub layers: Vec<DenseLayer>,
}

impl MlpModel {
    /// He-gaussian weights (`σ = √(2 / in)`), zero biases, γ = 1, β = 0,
    /// running statistics (0, 1).
    pub fn init(spec: &MlpSpec, stream: &mut RandomStream) -> Result<MlpModel> {
        spec.validate()?;
        let layers = spec
            .layers
            .iter()
            .map(|l| {
                let scale = (2.0 / l.in_dim as f64).sqrt();
                let weights = (0..l.in_dim * l.out_dim)
                    .map(|_| stream.next_gaussian() * scale)
                    .collect();
                let bn = |v: f64| if l.batch_norm { vec![v; l.out_dim] } else { Vec::new() };
                DenseLayer {
                    spec: *l,
                    weights: Matrix::from_raw(l.out_dim, l.in_dim, weights),
                    bias: vec![0.0; l.out_dim],
                    gamma: bn(1.0),
                    beta: bn(0.0),
                    running_mean: bn(0.0),
                    running_var: bn(1.0),
                }
            })
            .collect();
        Ok(MlpModel { layers })
    }

    pub fn spec(&self) -> MlpSpec {
        MlpSpec {
            layers: self.layers.iter().map(|l| l.spec).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn class_count(&self) -> usize {
        self.layers.last().map_or(0, |l| l.spec.out_dim)
    }

    /// Checks every buffer against its layer spec.
    pub fn validate(&self) -> Result<()> {
        self.spec().validate()?;
        for (i, l) in self.layers.iter().enumerate() {
            let s = &l.spec;
            let bn_len = if s.batch_norm { s.out_dim } else { 0 };
            if l.weights.shape() != (s.out_dim, s.in_dim)
                || l.bias.len() != s.out_dim
                || l.gamma.len() != bn_len
                || l.beta.len() != bn_len
                || l.running_mean.len() != bn_len
                || l.running_var.len() != bn_len
            {
                return Err(Error::DimChain(format!(
                    "layer {i} buffers do not match its {}→{} spec",
                    s.in_dim, s.out_dim
                )));
            }
            if l.running_var.iter().any(|&v| v < 0.0) {
                return Err(Error::DimChain(format!("layer {i} has negative running variance")));
            }
        }
        Ok(())
    }

    /// Trainable tensors in a fixed order: per layer weights, bias, then γ
    /// and β when batch norm is on.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.weights.data_mut());
            out.push(&mut l.bias);
            if l.spec.batch_norm {
                out.push(&mut l.gamma);
                out.push(&mut l.beta);
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.push(l.weights.data());
            out.push(&l.bias);
            if l.spec.batch_norm {
                out.push(&l.gamma);
                out.push(&l.beta);
            }
        }
        out
    }

    /// Folds the batch statistics of a training pass into the running mean
    /// and variance.
    pub fn update_running_stats(&mut self, pass: &ForwardPass) {
        if pass.mode != Mode::Train {
            return;
        }
        for (layer, cache) in self.layers.iter_mut().zip(&pass.caches) {
            if let Some(bn) = &cache.bn {
                for j in 0..layer.running_mean.len() {
                    layer.running_mean[j] =
                        BN_MOMENTUM * layer.running_mean[j] + (1.0 - BN_MOMENTUM) * bn.mean[j];
                    layer.running_var[j] =
                        BN_MOMENTUM * layer.running_var[j] + (1.0 - BN_MOMENTUM) * bn.var[j];
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and dropout.
    Train,
    /// Running statistics, no dropout.
    Infer,
}

#[derive(Debug, Clone)]
struct BnCache {
    mean: Vec<f64>,
    var: Vec<f64>,
    inv_std: Vec<f64>,
    normalized: Matrix,
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    input: Matrix,
    bn: Option<BnCache>,
    /// Post-normalisation, pre-ReLU activations.
    pre_relu: Matrix,
    /// Per-element dropout factor: 0 or 1/(1 − p).
    dropout: Option<Vec<f64>>,
}

/// Everything backpropagation needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub mode: Mode,
    pub caches: Vec<LayerCache>,
    pub probabilities: Matrix,
}

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

pub fn forward(
    model: &MlpModel,
    batch: &Matrix,
    mode: Mode,
    stream: &mut RandomStream,
) -> Result<ForwardPass> {
    if batch.cols() != model.input_dim() {
        return Err(Error::shapes(
            "forward",
            batch.shape(),
            (model.input_dim(), model.class_count()),
        ));
    }
    let n = batch.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("forward pass on an empty batch".into()));
    }
    let uses_bn = model.layers.iter().any(|l| l.spec.batch_norm);
    if mode == Mode::Train && uses_bn && n < 2 {
        return Err(Error::InvalidArgument(
            "batch norm needs at least 2 rows in training mode".into(),
        ));
    }

    let mut caches = Vec::with_capacity(model.layers.len());
    let mut current = batch.clone();
    for layer in &model.layers {
        let mut z = matmul_nt(&current, &layer.weights)?;
        for r in 0..n {
            for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        if layer.spec.activation == Activation::Softmax {
            let probabilities = softmax_rows(&z);
            caches.push(LayerCache {
                input: current,
                bn: None,
                pre_relu: z,
                dropout: None,
            });
            return Ok(ForwardPass {
                mode,
                caches,
                probabilities,
            });
        }

        let out_dim = layer.spec.out_dim;
        let (bn, mut y) = if layer.spec.batch_norm {
            let (mean, var) = match mode {
                Mode::Train => column_moments(&z),
                Mode::Infer => (layer.running_mean.clone(), layer.running_var.clone()),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
            let mut normalized = z;
            for r in 0..n {
                for (j, v) in normalized.row_mut(r).iter_mut().enumerate() {
                    *v = (*v - mean[j]) * inv_std[j];
                }
            }
            let mut y = normalized.clone();
            for r in 0..n {
                for (j, v) in y.row_mut(r).iter_mut().enumerate() {
                    *v = layer.gamma[j] * *v + layer.beta[j];
                }
            }
            (
                Some(BnCache {
                    mean,
                    var,
                    inv_std,
                    normalized,
                }),
                y,
            )
        } else {
            (None, z)
        };
        let pre_relu = y.clone();
        y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));

        let p = layer.spec.dropout;
        let dropout = if mode == Mode::Train && p > 0.0 {
            let keep_scale = 1.0 / (1.0 - p);
            let mask: Vec<f64> = (0..n * out_dim)
                .map(|_| if stream.next_uniform() >= p { keep_scale } else { 0.0 })
                .collect();
            for (v, m) in y.data_mut().iter_mut().zip(&mask) {
                *v *= m;
            }
            Some(mask)
        } else {
            None
        };
        caches.push(LayerCache {
            input: current,
            bn,
            pre_relu,
            dropout,
        });
        current = y;
    }
    Err(Error::DimChain("network does not end in a softmax layer".into()))
}

/// Per-column mean and population variance.
fn column_moments(z: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = z.rows() as f64;
    let mut mean = vec![0.0; z.cols()];
    for row in z.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; z.cols()];
    for row in z.iter_rows() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (r, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Data(format!("label {l} outside {classes} classes")));
        }
        m.set(r, l, 1.0);
    }
    Ok(m)
}

/// Mean categorical cross-entropy; probabilities are floored at 1e-12.
pub fn cce_loss(probs: &Matrix, onehot: &Matrix) -> Result<f64> {
    if probs.shape() != onehot.shape() {
        return Err(Error::shapes("cce_loss", probs.shape(), onehot.shape()));
    }
    if probs.rows() == 0 {
        return Err(Error::InvalidArgument("loss of an empty batch".into()));
    }
    let total: f64 = probs
        .data()
        .iter()
        .zip(onehot.data())
        .filter(|(_, &y)| y != 0.0)
        .map(|(&p, &y)| -y * p.max(PROBABILITY_FLOOR).ln())
        .sum();
    Ok(total / probs.rows() as f64)
}

/// Gradients in the order of [`MlpModel::params_mut`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Exact gradients of the mean cross-entropy with respect to every
/// trainable tensor, reusing the masks and statistics of `pass`.
pub fn backward(model: &MlpModel, pass: &ForwardPass, onehot: &Matrix) -> Result<Gradients> {
    if pass.probabilities.shape() != onehot.shape() || pass.caches.len() != model.layers.len() {
        return Err(Error::shapes(
            "backward",
            pass.probabilities.shape(),
            onehot.shape(),
        ));
    }
    let n = onehot.rows() as f64;
    let mut delta = pass.probabilities.clone();
    for (d, y) in delta.data_mut().iter_mut().zip(onehot.data()) {
        *d = (*d - y) / n;
    }

    let mut per_layer: Vec<Vec<Vec<f64>>> = Vec::with_capacity(model.layers.len());
    for (layer, cache) in model.layers.iter().zip(&pass.caches).rev() {
        let mut bn_grads = None;
        let dz = if layer.spec.activation == Activation::Softmax {
            delta
        } else {
            let mut dy = delta;
            if let Some(mask) = &cache.dropout {
                for (g, m) in dy.data_mut().iter_mut().zip(mask) {
                    *g *= m;
                }
            }
            for (g, y) in dy.data_mut().iter_mut().zip(cache.pre_relu.data()) {
                if *y <= 0.0 {
                    *g = 0.0;
                }
            }
            match &cache.bn {
                Some(bn) => {
                    let (dz, dgamma, dbeta) = bn_backward(layer, bn, &dy, pass.mode);
                    bn_grads = Some((dgamma, dbeta));
                    dz
                }
                None => dy,
            }
        };
        let dw = matmul_tn(&dz, &cache.input)?;
        let mut db = vec![0.0; layer.spec.out_dim];
        for row in dz.iter_rows() {
            for (b, g) in db.iter_mut().zip(row) {
                *b += g;
            }
        }
        delta = matmul(&dz, &layer.weights)?;
        let mut tensors = vec![dw.into_vec(), db];
        if let Some((dgamma, dbeta)) = bn_grads {
            tensors.push(dgamma);
            tensors.push(dbeta);
        }
        per_layer.push(tensors);
    }
    per_layer.reverse();
    let tensors: Vec<Vec<f64>> = per_layer.into_iter().flatten().collect();
    if tensors.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok(Gradients { tensors })
}

fn bn_backward(
    layer: &DenseLayer,
    bn: &BnCache,
    dy: &Matrix,
    mode: Mode,
) -> (Matrix, Vec<f64>, Vec<f64>) {
    let cols = dy.cols();
    let n = dy.rows() as f64;
    let mut dgamma = vec![0.0; cols];
    let mut dbeta = vec![0.0; cols];
    for (row, xhat) in dy.iter_rows().zip(bn.normalized.iter_rows()) {
        for j in 0..cols {
            dgamma[j] += row[j] * xhat[j];
            dbeta[j] += row[j];
        }
    }
    let mut dz = dy.clone();
    match mode {
        Mode::Infer => {
            for r in 0..dz.rows() {
                for (j, g) in dz.row_mut(r).iter_mut().enumerate() {
                    *g *= layer.gamma[j] * bn.inv_std[j];
                }
            }
        }
        Mode::Train => {
            // dxhat = dy·γ; dz = inv_std/n · (n·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
            let sum_dxhat: Vec<f64> = (0..cols).map(|j| dbeta[j] * layer.gamma[j]).collect();
            let sum_dxhat_xhat: Vec<f64> = (0..cols).map(|j| dgamma[j] * layer.gamma[j]).collect();
            for r in 0..dz.rows() {
                let xhat = bn.normalized.row(r);
                for (j, g) in dz.row_mut(r).iter_mut().enumerate() {
                    let dxhat = *g * layer.gamma[j];
                    *g = bn.inv_std[j] / n
                        * (n * dxhat - sum_dxhat[j] - xhat[j] * sum_dxhat_xhat[j]);
                }
            }
        }
    }
    (dz, dgamma, dbeta)
}

/// Forward in training mode and backpropagate, returning loss and
/// gradients.
pub fn loss_and_gradients(
    model: &MlpModel,
    batch: &Matrix,
    onehot: &Matrix,
    stream: &mut RandomStream,
) -> Result<(f64, Gradients, ForwardPass)> {
    let pass = forward(model, batch, Mode::Train, stream)?;
    let loss = cce_loss(&pass.probabilities, onehot)?;
    let grads = backward(model, &pass, onehot)?;
    Ok((loss, grads, pass))
}

/// Inference-mode probabilities.
pub fn predict_proba(model: &MlpModel, features: &Matrix) -> Result<Matrix> {
    // Inference draws nothing from the stream.
    let mut unused = RandomStream::new(0);
    Ok(forward(model, features, Mode::Infer, &mut unused)?.probabilities)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Arg-max labels and probability rows.
pub fn predict(model: &MlpModel, features: &Matrix) -> Result<(Vec<usize>, Matrix)> {
    let probs = predict_proba(model, features)?;
    let labels = probs.iter_rows().map(argmax).collect();
    Ok((labels, probs))
}

/// Agreement between backpropagated gradients and central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    /// Largest `|analytic − numeric| / max(|analytic| + |numeric|, 1e-6)`.
    pub max_relative_error: f64,
    pub checked: usize,
    /// Coordinates where `θ ± h` moved some ReLU input across zero, so the
    /// loss is not differentiable over the probe interval.
    pub skipped: usize,
}

fn relu_signs(pass: &ForwardPass) -> Vec<bool> {
    pass.caches
        .iter()
        .flat_map(|c| c.pre_relu.data().iter().map(|&v| v > 0.0))
        .collect()
}

/// Compares [`backward`] in training mode with central differences of step
/// `h` on up to `per_tensor` evenly spaced coordinates of every parameter
/// tensor. Each evaluation reseeds the dropout stream with `dropout_seed`,
/// so all probes share one dropout mask.
pub fn gradient_check(
    model: &MlpModel,
    batch: &Matrix,
    onehot: &Matrix,
    h: f64,
    per_tensor: usize,
    dropout_seed: u64,
) -> Result<GradientCheck> {
    let eval = |m: &MlpModel| -> Result<(f64, ForwardPass)> {
        let pass = forward(m, batch, Mode::Train, &mut RandomStream::new(dropout_seed))?;
        Ok((cce_loss(&pass.probabilities, onehot)?, pass))
    };
    let (_, base) = eval(model)?;
    let grads = backward(model, &base, onehot)?;
    let base_signs = relu_signs(&base);
    let mut probe = model.clone();
    let mut report = GradientCheck {
        max_relative_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (t, g) in grads.tensors.iter().enumerate() {
        let len = g.len();
        let count = per_tensor.min(len);
        for c in 0..count {
            let i = c * len / count;
            let original = probe.params_mut()[t][i];
            probe.params_mut()[t][i] = original + h;
            let (up, up_pass) = eval(&probe)?;
            probe.params_mut()[t][i] = original - h;
            let (down, down_pass) = eval(&probe)?;
            probe.params_mut()[t][i] = original;
            if relu_signs(&up_pass) != base_signs || relu_signs(&down_pass) != base_signs {
                report.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let analytic = g[i];
            let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6);
            report.max_relative_error = report.max_relative_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}
