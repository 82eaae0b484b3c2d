//! Small softmax classifiers with hand-written gradients.
//!
//! Two architectures are supported: multinomial logistic regression and a
//! one-hidden-layer ReLU network. Both use mean cross-entropy loss.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{layout, LayerShape, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LogisticRegression,
    Mlp2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// Ignored for logistic regression.
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::LogisticRegression,
            input_dim,
            hidden_dim: 0,
            num_classes,
        }
    }

    pub fn mlp2(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp2,
            input_dim,
            hidden_dim,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "model needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::config("model input_dim must be positive"));
        }
        if self.kind == ModelKind::Mlp2 && self.hidden_dim == 0 {
            return Err(Error::config("mlp2 hidden_dim must be positive"));
        }
        Ok(())
    }
}

/// A borrowed batch of row-major inputs and their labels.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    inputs: &'a [f64],
    labels: &'a [usize],
    input_dim: usize,
}

impl<'a> Batch<'a> {
    pub fn new(inputs: &'a [f64], labels: &'a [usize], input_dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::usage("empty batch"));
        }
        if input_dim == 0 || inputs.len() != labels.len() * input_dim {
            return Err(Error::Shape(format!(
                "batch holds {} input scalars for {} labels of dimension {}",
                inputs.len(),
                labels.len(),
                input_dim
            )));
        }
        Ok(Self {
            inputs,
            labels,
            input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &'a [usize] {
        self.labels
    }
}

/// Reusable buffers for single-sample forward/backward passes.
#[derive(Debug, Clone, Default)]
pub struct Scratch {
    logits: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    hidden_grad: Vec<f64>,
}

/// A classifier architecture bound to its parameter layout.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    shapes: Arc<[LayerShape]>,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let (d, h, k) = (spec.input_dim, spec.hidden_dim, spec.num_classes);
        let shapes = match spec.kind {
            ModelKind::LogisticRegression => layout([("weight", d * k), ("bias", k)]),
            ModelKind::Mlp2 => layout([
                ("fc1.weight", d * h),
                ("fc1.bias", h),
                ("fc2.weight", h * k),
                ("fc2.bias", k),
            ]),
        };
        Ok(Self { spec, shapes })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn shapes(&self) -> &Arc<[LayerShape]> {
        &self.shapes
    }

    pub fn dim(&self) -> usize {
        self.shapes.iter().map(|s| s.len).sum()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    /// Weights ~ N(0, 1/fan_in), biases zero. Deterministic per seed.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; self.dim()];
        let (d, h) = (self.spec.input_dim, self.spec.hidden_dim);
        for shape in self.shapes.iter() {
            let fan_in = match shape.name.as_str() {
                "weight" | "fc1.weight" => d,
                "fc2.weight" => h,
                _ => continue,
            };
            let std = 1.0 / (fan_in as f64).sqrt();
            for v in &mut values[shape.range()] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = z * std;
            }
        }
        ParamVector::from_parts_unchecked(values, Arc::clone(&self.shapes))
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector::zeros(Arc::clone(&self.shapes))
    }

    pub(crate) fn check_params(&self, theta: &ParamVector) -> Result<()> {
        if theta.shapes().as_ref() == self.shapes.as_ref() {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "parameters of dimension {} do not match model of dimension {}",
                theta.dim(),
                self.dim()
            )))
        }
    }

    pub(crate) fn check_batch(&self, batch: &Batch<'_>) -> Result<()> {
        if batch.input_dim() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "batch input dimension {} does not match model input dimension {}",
                batch.input_dim(),
                self.spec.input_dim
            )));
        }
        if let Some(&bad) = batch.labels().iter().find(|&&y| y >= self.spec.num_classes) {
            return Err(Error::usage(format!(
                "label {bad} out of range for {} classes",
                self.spec.num_classes
            )));
        }
        Ok(())
    }

    /// Writes the logits of one input into `scratch.logits`.
    fn forward(&self, params: &[f64], x: &[f64], scratch: &mut Scratch) {
        let (d, h, k) = (self.spec.input_dim, self.spec.hidden_dim, self.spec.num_classes);
        scratch.logits.resize(k, 0.0);
        match self.spec.kind {
            ModelKind::LogisticRegression => {
                let (w, b) = params.split_at(d * k);
                scratch.logits.copy_from_slice(b);
                for (j, &xj) in x.iter().enumerate() {
                    if xj == 0.0 {
                        continue;
                    }
                    let row = &w[j * k..(j + 1) * k];
                    for (z, wjk) in scratch.logits.iter_mut().zip(row) {
                        *z += xj * wjk;
                    }
                }
            }
            ModelKind::Mlp2 => {
                let (w1, rest) = params.split_at(d * h);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(h * k);
                scratch.hidden_pre.clear();
                scratch.hidden_pre.extend_from_slice(b1);
                for (j, &xj) in x.iter().enumerate() {
                    if xj == 0.0 {
                        continue;
                    }
                    let row = &w1[j * h..(j + 1) * h];
                    for (a, wjh) in scratch.hidden_pre.iter_mut().zip(row) {
                        *a += xj * wjh;
                    }
                }
                scratch.hidden.clear();
                scratch
                    .hidden
                    .extend(scratch.hidden_pre.iter().map(|&a| if a > 0.0 { a } else { 0.0 }));
                scratch.logits.copy_from_slice(b2);
                for (hi, &hv) in scratch.hidden.iter().enumerate() {
                    if hv == 0.0 {
                        continue;
                    }
                    let row = &w2[hi * k..(hi + 1) * k];
                    for (z, w) in scratch.logits.iter_mut().zip(row) {
                        *z += hv * w;
                    }
                }
            }
        }
    }

    /// Per-sample negative log-likelihood and its gradient.
    ///
    /// `grad` is overwritten with the parameter gradient. When `input_grad`
    /// is given it receives the gradient with respect to `x`.
    pub(crate) fn sample_grad(
        &self,
        params: &[f64],
        x: &[f64],
        y: usize,
        grad: &mut [f64],
        input_grad: Option<&mut [f64]>,
        scratch: &mut Scratch,
    ) -> f64 {
        let (d, h, k) = (self.spec.input_dim, self.spec.hidden_dim, self.spec.num_classes);
        self.forward(params, x, scratch);
        let loss = softmax_in_place(&mut scratch.logits, y);
        // logits now hold dL/dz = softmax - onehot
        let delta = &scratch.logits;
        match self.spec.kind {
            ModelKind::LogisticRegression => {
                let (gw, gb) = grad.split_at_mut(d * k);
                for (j, &xj) in x.iter().enumerate() {
                    let row = &mut gw[j * k..(j + 1) * k];
                    if xj == 0.0 {
                        row.fill(0.0);
                    } else {
                        for (g, dk) in row.iter_mut().zip(delta) {
                            *g = xj * dk;
                        }
                    }
                }
                gb.copy_from_slice(delta);
                if let Some(gx) = input_grad {
                    let w = &params[..d * k];
                    for (j, gxj) in gx.iter_mut().enumerate() {
                        *gxj = w[j * k..(j + 1) * k].iter().zip(delta).map(|(a, b)| a * b).sum();
                    }
                }
            }
            ModelKind::Mlp2 => {
                let w1 = &params[..d * h];
                let w2 = &params[d * h + h..d * h + h + h * k];
                let (gw1, rest) = grad.split_at_mut(d * h);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(h * k);
                for (hi, &hv) in scratch.hidden.iter().enumerate() {
                    let row = &mut gw2[hi * k..(hi + 1) * k];
                    for (g, dk) in row.iter_mut().zip(delta) {
                        *g = hv * dk;
                    }
                }
                gb2.copy_from_slice(delta);
                scratch.hidden_grad.clear();
                for hi in 0..h {
                    let back: f64 = w2[hi * k..(hi + 1) * k].iter().zip(delta).map(|(a, b)| a * b).sum();
                    // ReLU subgradient at 0 is 0.
                    let g = if scratch.hidden_pre[hi] > 0.0 { back } else { 0.0 };
                    scratch.hidden_grad.push(g);
                }
                let dpre = &scratch.hidden_grad;
                for (j, &xj) in x.iter().enumerate() {
                    let row = &mut gw1[j * h..(j + 1) * h];
                    if xj == 0.0 {
                        row.fill(0.0);
                    } else {
                        for (g, dh) in row.iter_mut().zip(dpre) {
                            *g = xj * dh;
                        }
                    }
                }
                gb1.copy_from_slice(dpre);
                if let Some(gx) = input_grad {
                    for (j, gxj) in gx.iter_mut().enumerate() {
                        *gxj = w1[j * h..(j + 1) * h].iter().zip(dpre).map(|(a, b)| a * b).sum();
                    }
                }
            }
        }
        loss
    }

    /// Mean cross-entropy over the batch.
    pub fn loss(&self, theta: &ParamVector, batch: &Batch<'_>) -> Result<f64> {
        self.check_params(theta)?;
        self.check_batch(batch)?;
        let mut scratch = Scratch::default();
        let mut total = 0.0;
        for i in 0..batch.len() {
            self.forward(theta.values(), batch.row(i), &mut scratch);
            total += softmax_in_place(&mut scratch.logits, batch.label(i));
        }
        Ok(total / batch.len() as f64)
    }

    /// Gradient of the mean loss: per-sample gradients summed in batch
    /// order, then divided by the batch size.
    pub fn grad(&self, theta: &ParamVector, batch: &Batch<'_>) -> Result<ParamVector> {
        self.check_params(theta)?;
        self.check_batch(batch)?;
        let mut scratch = Scratch::default();
        let mut acc = vec![0.0; self.dim()];
        let mut g = vec![0.0; self.dim()];
        for i in 0..batch.len() {
            self.sample_grad(theta.values(), batch.row(i), batch.label(i), &mut g, None, &mut scratch);
            for (a, gi) in acc.iter_mut().zip(&g) {
                *a += gi;
            }
        }
        let n = batch.len() as f64;
        for a in &mut acc {
            *a /= n;
        }
        theta.with_values(acc)
    }

    /// Gradient of the negated loss, `-grad`.
    pub fn reverse_grad(&self, theta: &ParamVector, batch: &Batch<'_>) -> Result<ParamVector> {
        self.grad(theta, batch)?.scale(-1.0)
    }

    /// Logits for one input.
    pub fn logits(&self, theta: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
        self.check_params(theta)?;
        if x.len() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "input of dimension {} for model input dimension {}",
                x.len(),
                self.spec.input_dim
            )));
        }
        let mut scratch = Scratch::default();
        self.forward(theta.values(), x, &mut scratch);
        Ok(scratch.logits)
    }

    /// Predicted class per sample; ties go to the lowest class index.
    pub fn predict(&self, theta: &ParamVector, batch: &Batch<'_>) -> Result<Vec<usize>> {
        self.check_params(theta)?;
        if batch.input_dim() != self.spec.input_dim {
            return Err(Error::Shape("batch input dimension mismatch".into()));
        }
        let mut scratch = Scratch::default();
        Ok((0..batch.len())
            .map(|i| {
                self.forward(theta.values(), batch.row(i), &mut scratch);
                argmax(&scratch.logits)
            })
            .collect())
    }

    /// `1 - accuracy` on `test`.
    pub fn error_rate(&self, theta: &ParamVector, test: &Batch<'_>) -> Result<f64> {
        self.check_batch(test)?;
        let predictions = self.predict(theta, test)?;
        let wrong = predictions
            .iter()
            .zip(test.labels())
            .filter(|(p, y)| p != y)
            .count();
        Ok(wrong as f64 / test.len() as f64)
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Replaces logits by `softmax - onehot(label)` and returns the sample's
/// negative log-likelihood.
fn softmax_in_place(z: &mut [f64], label: usize) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted_label = z[label] - max;
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let loss = sum.ln() - shifted_label;
    for v in z.iter_mut() {
        *v /= sum;
    }
    z[label] -= 1.0;
    loss
}
