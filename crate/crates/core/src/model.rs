//! Desk-scale classifiers: multinomial softmax regression and a one-hidden-layer
//! tanh perceptron, with analytic cross-entropy gradients.
//!
//! Flattening order is layer-major; within a layer the weight matrix comes
//! first in row-major order (`rows = fan_out`, `cols = fan_in`), followed by the
//! bias. Layer `i` maps to the gradient segment `"layer{i}"`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FedselError, Result};
use crate::numerics::{GradientVector, Segment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum Arch {
    Linear { d_in: usize, classes: usize },
    Mlp { d_in: usize, hidden: usize, classes: usize },
}

impl Arch {
    pub fn d_in(&self) -> usize {
        match *self {
            Arch::Linear { d_in, .. } | Arch::Mlp { d_in, .. } => d_in,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            Arch::Linear { classes, .. } | Arch::Mlp { classes, .. } => classes,
        }
    }

    /// (fan_out, fan_in) per layer.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        match *self {
            Arch::Linear { d_in, classes } => vec![(classes, d_in)],
            Arch::Mlp {
                d_in,
                hidden,
                classes,
            } => vec![(hidden, d_in), (classes, hidden)],
        }
    }

    pub fn segment_ids(&self) -> Vec<String> {
        (0..self.layer_shapes().len())
            .map(|i| format!("layer{i}"))
            .collect()
    }

    /// Total parameter count `m`.
    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(|(r, c)| r * c + r).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            *o = self.bias[r] + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
        }
    }

    fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Labeled examples: `features` is row-major `n × d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
}

impl Batch {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(FedselError::Shape("feature dimension must be positive".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(FedselError::Shape(format!(
                "{} feature values for {} rows of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self {
            features,
            labels,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows at the given indices, in that order.
    pub fn subset(&self, idx: &[usize]) -> Batch {
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch {
            features,
            labels,
            dim: self.dim,
        }
    }

    /// Concatenation of batches sharing a feature dimension.
    pub fn concat(parts: &[&Batch]) -> Result<Batch> {
        let dim = parts
            .first()
            .map(|b| b.dim)
            .ok_or_else(|| FedselError::Shape("nothing to concatenate".into()))?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for b in parts {
            if b.dim != dim {
                return Err(FedselError::Shape("mixed feature dimensions".into()));
            }
            features.extend_from_slice(&b.features);
            labels.extend_from_slice(&b.labels);
        }
        Batch::new(features, labels, dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters {
    pub arch: Arch,
    pub layers: Vec<Layer>,
}

impl ModelParameters {
    pub fn zeros(arch: Arch) -> Self {
        Self {
            arch,
            layers: arch
                .layer_shapes()
                .into_iter()
                .map(|(r, c)| Layer::zeros(r, c))
                .collect(),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(arch: Arch, rng: &mut R) -> Self {
        let mut params = Self::zeros(arch);
        for layer in &mut params.layers {
            let a = (6.0 / (layer.rows + layer.cols) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-a..a);
            }
        }
        params
    }

    /// Parameters in flattening order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.arch.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn from_flat(arch: Arch, flat: &[f64]) -> Result<Self> {
        if flat.len() != arch.num_params() {
            return Err(FedselError::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                arch.num_params()
            )));
        }
        let mut params = Self::zeros(arch);
        let mut off = 0;
        for l in &mut params.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(params)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(FedselError::Shape("empty batch".into()));
        }
        if batch.dim != self.arch.d_in() {
            return Err(FedselError::Shape(format!(
                "batch dimension {} but model expects {}",
                batch.dim,
                self.arch.d_in()
            )));
        }
        let c = self.arch.classes();
        if let Some(l) = batch.labels.iter().find(|&&l| l >= c) {
            return Err(FedselError::Shape(format!("label {l} outside [0, {c})")));
        }
        Ok(())
    }

    /// Hidden activations (empty for the linear model) and logits for one row.
    fn forward(&self, x: &[f64], hidden: &mut Vec<f64>, logits: &mut Vec<f64>) {
        let last = self.layers.last().expect("at least one layer");
        logits.resize(last.rows, 0.0);
        if self.layers.len() == 1 {
            hidden.clear();
            last.forward(x, logits);
        } else {
            let first = &self.layers[0];
            hidden.resize(first.rows, 0.0);
            first.forward(x, hidden);
            hidden.iter_mut().for_each(|h| *h = h.tanh());
            last.forward(hidden, logits);
        }
    }
}

/// In-place log-softmax.
fn log_softmax(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter_mut().for_each(|z| *z -= lse);
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy over the batch.
pub fn loss(params: &ModelParameters, batch: &Batch) -> Result<f64> {
    evaluate(params, batch).map(|(l, _)| l)
}

/// Fraction of rows whose argmax logit equals the label (ties go to the
/// lowest class index).
pub fn accuracy(params: &ModelParameters, batch: &Batch) -> Result<f64> {
    evaluate(params, batch).map(|(_, a)| a)
}

/// `(loss, accuracy)` in one pass.
pub fn evaluate(params: &ModelParameters, batch: &Batch) -> Result<(f64, f64)> {
    params.check_batch(batch)?;
    let (mut hidden, mut logits) = (Vec::new(), Vec::new());
    let mut total = 0.0;
    let mut correct = 0usize;
    for i in 0..batch.len() {
        params.forward(batch.row(i), &mut hidden, &mut logits);
        if argmax(&logits) == batch.labels[i] {
            correct += 1;
        }
        log_softmax(&mut logits);
        total -= logits[batch.labels[i]];
    }
    let n = batch.len() as f64;
    Ok((total / n, correct as f64 / n))
}

/// Analytic gradient of the mean cross-entropy, one segment per layer.
pub fn gradient(params: &ModelParameters, batch: &Batch) -> Result<GradientVector> {
    params.check_batch(batch)?;
    let mut grads: Vec<Layer> = params
        .layers
        .iter()
        .map(|l| Layer::zeros(l.rows, l.cols))
        .collect();
    let (mut hidden, mut logits) = (Vec::new(), Vec::new());
    let mut dhidden = Vec::new();
    let inv_n = 1.0 / batch.len() as f64;
    let last = params.layers.len() - 1;

    for i in 0..batch.len() {
        let x = batch.row(i);
        params.forward(x, &mut hidden, &mut logits);
        log_softmax(&mut logits);
        // dL/dlogits = softmax - onehot
        let dlogits: Vec<f64> = logits
            .iter()
            .enumerate()
            .map(|(c, lp)| (lp.exp() - f64::from(c == batch.labels[i])) * inv_n)
            .collect();
        let input: &[f64] = if last == 0 { x } else { &hidden };
        accumulate_outer(&mut grads[last], &dlogits, input);

        if last == 1 {
            let top = &params.layers[1];
            dhidden.clear();
            dhidden.resize(top.cols, 0.0);
            for (r, d) in dlogits.iter().enumerate() {
                let row = &top.weights[r * top.cols..(r + 1) * top.cols];
                for (dh, w) in dhidden.iter_mut().zip(row) {
                    *dh += d * w;
                }
            }
            for (dh, h) in dhidden.iter_mut().zip(&hidden) {
                *dh *= 1.0 - h * h;
            }
            accumulate_outer(&mut grads[0], &dhidden, x);
        }
    }

    let segments = grads
        .into_iter()
        .enumerate()
        .map(|(i, mut g)| {
            g.weights.extend_from_slice(&g.bias);
            Segment {
                id: format!("layer{i}"),
                values: g.weights,
            }
        })
        .collect();
    GradientVector::new(segments)
}

fn accumulate_outer(layer: &mut Layer, delta: &[f64], input: &[f64]) {
    let cols = layer.cols;
    for (r, d) in delta.iter().enumerate() {
        if *d == 0.0 {
            continue;
        }
        for (w, x) in layer.weights[r * cols..(r + 1) * cols].iter_mut().zip(input) {
            *w += d * x;
        }
        layer.bias[r] += d;
    }
}

/// `params − eta·g`.
pub fn apply_update(params: &ModelParameters, g: &GradientVector, eta: f64) -> Result<ModelParameters> {
    let segs = g.segments();
    if segs.len() != params.layers.len()
        || segs
            .iter()
            .zip(&params.layers)
            .enumerate()
            .any(|(i, (s, l))| s.values.len() != l.len() || s.id != format!("layer{i}"))
    {
        return Err(FedselError::Layout(
            "gradient layout does not match model layers".into(),
        ));
    }
    let mut out = params.clone();
    for (layer, seg) in out.layers.iter_mut().zip(segs) {
        let nw = layer.weights.len();
        for (w, gv) in layer.weights.iter_mut().zip(&seg.values[..nw]) {
            *w -= eta * gv;
        }
        for (b, gv) in layer.bias.iter_mut().zip(&seg.values[nw..]) {
            *b -= eta * gv;
        }
    }
    Ok(out)
}
