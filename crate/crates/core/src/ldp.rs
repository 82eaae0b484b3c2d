//! Client-side protocols of locally differentially private FL.
//!
//! * LDPSGD: Poisson-sampled batches, per-sample clipping to norm `C`,
//!   Gaussian noise `N(0, sigma^2 C^2 I)` added to the gradient sum.
//! * PrivateFL: the same, with a private per-feature affine input layer
//!   trained jointly and never uploaded.
//! * LDP-FL: plain per-sample SGD, then every uploaded weight is randomized
//!   to one of two per-layer values.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{Model, Scratch};
use crate::params::{clip_in_place, l2_norm, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Ldpsgd,
    Privatefl,
    Ldpfl,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Ldpsgd => "ldpsgd",
            Protocol::Privatefl => "privatefl",
            Protocol::Ldpfl => "ldpfl",
        }
    }

    /// LDPSGD and PrivateFL perturb gradients during training.
    pub fn is_gradient_perturbing(self) -> bool {
        !matches!(self, Protocol::Ldpfl)
    }
}

fn default_epochs() -> usize {
    1
}
fn default_sample_prob() -> f64 {
    0.1
}
fn default_clip_c() -> f64 {
    5.0
}
fn default_sigma() -> f64 {
    0.8
}
fn default_epsilon() -> f64 {
    0.75
}

/// Local-training and perturbation parameters shared by all clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub protocol: Protocol,
    /// Learning rate.
    pub eta: f64,
    /// Local iterations per round (one Poisson batch each for LDPSGD and
    /// PrivateFL, one pass over the data for LDP-FL).
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_sample_prob")]
    pub sample_prob: f64,
    #[serde(default = "default_clip_c")]
    pub clip_c: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl ProtocolConfig {
    pub fn new(protocol: Protocol, eta: f64) -> Self {
        Self {
            protocol,
            eta,
            epochs: default_epochs(),
            sample_prob: default_sample_prob(),
            clip_c: default_clip_c(),
            sigma: default_sigma(),
            epsilon: default_epsilon(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config(format!("eta must be positive, got {}", self.eta)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.protocol.is_gradient_perturbing() {
            if !(self.sample_prob > 0.0 && self.sample_prob <= 1.0) {
                return Err(Error::config(format!(
                    "sample_prob must lie in (0, 1], got {}",
                    self.sample_prob
                )));
            }
            if !(self.clip_c > 0.0 && self.clip_c.is_finite()) {
                return Err(Error::config(format!("clip_c must be positive, got {}", self.clip_c)));
            }
            if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
                return Err(Error::config(format!("sigma must be non-negative, got {}", self.sigma)));
            }
        } else if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }

    fn expect(&self, protocol: Protocol) -> Result<()> {
        if self.protocol == protocol {
            Ok(())
        } else {
            Err(Error::usage(format!(
                "{} round requested with a {} configuration",
                protocol.name(),
                self.protocol.name()
            )))
        }
    }
}

/// How one local round should behave.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundOptions {
    /// Train on the negated loss.
    pub malicious: bool,
    /// Clip and noise gradients. `false` is the bypass used by output-side
    /// attacks. Ignored by LDP-FL, which perturbs at upload.
    pub apply_ldp: bool,
    pub epochs: usize,
}

impl RoundOptions {
    pub fn benign(cfg: &ProtocolConfig) -> Self {
        Self {
            malicious: false,
            apply_ldp: true,
            epochs: cfg.epochs,
        }
    }
}

/// Per-round training statistics of one client.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalDiag {
    pub steps: usize,
    /// Iterations whose Poisson batch came out empty.
    pub skipped_batches: usize,
    /// Largest per-sample gradient norm after clipping.
    pub max_clipped_norm: f64,
}

/// PrivateFL's private input layer, `x -> scale * x + shift` per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformLayer {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    /// A frozen layer is applied but never trained.
    pub frozen: bool,
}

impl TransformLayer {
    pub fn identity(input_dim: usize) -> Self {
        Self {
            scale: vec![1.0; input_dim],
            shift: vec![0.0; input_dim],
            frozen: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(x.iter().zip(&self.scale).zip(&self.shift).map(|((x, a), b)| a * x + b));
    }
}

fn poisson_batch<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<usize> {
    if p >= 1.0 {
        (0..n).collect()
    } else {
        (0..n).filter(|_| rng.gen::<f64>() < p).collect()
    }
}

/// Shared DP-SGD loop; `transform` switches on the PrivateFL joint update.
#[allow(clippy::too_many_arguments)]
fn dp_sgd<R: Rng + ?Sized>(
    model: &Model,
    theta: &mut [f64],
    mut transform: Option<&mut TransformLayer>,
    ds: &Dataset,
    cfg: &ProtocolConfig,
    opts: RoundOptions,
    rng: &mut R,
) -> LocalDiag {
    let d = model.dim();
    let input_dim = model.input_dim();
    let trains_transform = transform.as_ref().is_some_and(|t| !t.frozen);
    let total = if trains_transform { d + 2 * input_dim } else { d };
    let mut sum = vec![0.0; total];
    let mut sample = vec![0.0; total];
    let mut input_grad = vec![0.0; input_dim];
    let mut transformed = Vec::with_capacity(input_dim);
    let mut scratch = Scratch::default();
    let mut diag = LocalDiag::default();
    let noise_std = cfg.sigma * cfg.clip_c;

    for _ in 0..opts.epochs {
        let batch = poisson_batch(ds.len(), cfg.sample_prob, rng);
        if batch.is_empty() {
            diag.skipped_batches += 1;
            continue;
        }
        sum.fill(0.0);
        for &i in &batch {
            let x = ds.row(i);
            let y = ds.labels()[i];
            let (param_grad, tail) = sample.split_at_mut(d);
            match transform.as_deref() {
                Some(t) => {
                    t.apply(x, &mut transformed);
                    let gx = trains_transform.then_some(input_grad.as_mut_slice());
                    model.sample_grad(theta, &transformed, y, param_grad, gx, &mut scratch);
                    if trains_transform {
                        let (g_scale, g_shift) = tail.split_at_mut(input_dim);
                        for j in 0..input_dim {
                            g_scale[j] = input_grad[j] * x[j];
                            g_shift[j] = input_grad[j];
                        }
                    }
                }
                None => {
                    model.sample_grad(theta, x, y, param_grad, None, &mut scratch);
                }
            }
            if opts.malicious {
                for g in sample.iter_mut() {
                    *g = -*g;
                }
            }
            if opts.apply_ldp {
                clip_in_place(&mut sample, cfg.clip_c);
                diag.max_clipped_norm = diag.max_clipped_norm.max(l2_norm(&sample));
            }
            for (s, g) in sum.iter_mut().zip(&sample) {
                *s += g;
            }
        }
        if opts.apply_ldp && noise_std > 0.0 {
            for s in sum.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *s += noise_std * z;
            }
        }
        let nb = batch.len() as f64;
        let (sum_params, sum_tail) = sum.split_at(d);
        for (w, s) in theta.iter_mut().zip(sum_params) {
            *w -= cfg.eta * (s / nb);
        }
        if trains_transform {
            let t = transform.as_deref_mut().expect("transform present");
            let (s_scale, s_shift) = sum_tail.split_at(input_dim);
            for j in 0..input_dim {
                t.scale[j] -= cfg.eta * (s_scale[j] / nb);
                t.shift[j] -= cfg.eta * (s_shift[j] / nb);
            }
        }
        diag.steps += 1;
    }
    diag
}

fn finite_params(theta_g: &ParamVector, values: Vec<f64>) -> Result<ParamVector> {
    theta_g
        .with_values(values)
        .map_err(|_| Error::NonFinite("local training diverged"))
}

/// One LDPSGD client round starting from the global model.
pub fn ldpsgd_local_round<R: Rng + ?Sized>(
    model: &Model,
    theta_g: &ParamVector,
    ds: &Dataset,
    cfg: &ProtocolConfig,
    opts: RoundOptions,
    rng: &mut R,
) -> Result<(ParamVector, LocalDiag)> {
    cfg.expect(Protocol::Ldpsgd)?;
    model.check_params(theta_g)?;
    let mut theta = theta_g.values().to_vec();
    let diag = dp_sgd(model, &mut theta, None, ds, cfg, opts, rng);
    Ok((finite_params(theta_g, theta)?, diag))
}

/// One PrivateFL client round. Returns the uploadable parameters and the
/// updated private transform.
pub fn privatefl_local_round<R: Rng + ?Sized>(
    model: &Model,
    theta_g: &ParamVector,
    transform: &TransformLayer,
    ds: &Dataset,
    cfg: &ProtocolConfig,
    opts: RoundOptions,
    rng: &mut R,
) -> Result<(ParamVector, TransformLayer, LocalDiag)> {
    cfg.expect(Protocol::Privatefl)?;
    model.check_params(theta_g)?;
    if transform.dim() != model.input_dim() || transform.shift.len() != model.input_dim() {
        return Err(Error::Shape(format!(
            "transform of dimension {} for model input dimension {}",
            transform.dim(),
            model.input_dim()
        )));
    }
    let mut theta = theta_g.values().to_vec();
    let mut t = transform.clone();
    let diag = dp_sgd(model, &mut theta, Some(&mut t), ds, cfg, opts, rng);
    if !t.scale.iter().chain(&t.shift).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("transform layer"));
    }
    Ok((finite_params(theta_g, theta)?, t, diag))
}

/// One LDP-FL client round: per-sample SGD over the full local dataset,
/// in order, `opts.epochs` times. Returns raw (unperturbed) parameters.
pub fn ldpfl_local_round(
    model: &Model,
    theta_g: &ParamVector,
    ds: &Dataset,
    cfg: &ProtocolConfig,
    opts: RoundOptions,
) -> Result<(ParamVector, LocalDiag)> {
    cfg.expect(Protocol::Ldpfl)?;
    model.check_params(theta_g)?;
    let mut theta = theta_g.values().to_vec();
    let mut g = vec![0.0; model.dim()];
    let mut scratch = Scratch::default();
    let mut diag = LocalDiag::default();
    let sign = if opts.malicious { -1.0 } else { 1.0 };
    for _ in 0..opts.epochs {
        for i in 0..ds.len() {
            model.sample_grad(&theta, ds.row(i), ds.labels()[i], &mut g, None, &mut scratch);
            for (w, gi) in theta.iter_mut().zip(&g) {
                *w -= cfg.eta * (sign * gi);
            }
            diag.steps += 1;
        }
    }
    Ok((finite_params(theta_g, theta)?, diag))
}

/// Runs the configured protocol's local round. PrivateFL requires the
/// client's transform, which is updated in place.
pub fn train_local<R: Rng + ?Sized>(
    model: &Model,
    theta_g: &ParamVector,
    ds: &Dataset,
    cfg: &ProtocolConfig,
    transform: Option<&mut TransformLayer>,
    opts: RoundOptions,
    rng: &mut R,
) -> Result<(ParamVector, LocalDiag)> {
    match cfg.protocol {
        Protocol::Ldpsgd => ldpsgd_local_round(model, theta_g, ds, cfg, opts, rng),
        Protocol::Privatefl => {
            let t = transform.ok_or_else(|| Error::usage("PrivateFL round without a transform layer"))?;
            let (theta, updated, diag) = privatefl_local_round(model, theta_g, t, ds, cfg, opts, rng)?;
            *t = updated;
            Ok((theta, diag))
        }
        Protocol::Ldpfl => ldpfl_local_round(model, theta_g, ds, cfg, opts),
    }
}

/// Turns locally trained parameters into the upload. LDP-FL reports go
/// through [`data_perturbation`] (honest) or [`clip2val`] (bypass); the
/// gradient-perturbing protocols upload parameters as they are.
pub fn finalize_upload<R: Rng + ?Sized>(
    raw: ParamVector,
    cfg: &ProtocolConfig,
    ranges: &LayerRanges,
    perturb: bool,
    rng: &mut R,
) -> Result<ParamVector> {
    match cfg.protocol {
        Protocol::Ldpfl if perturb => data_perturbation(&raw, ranges, cfg.epsilon, rng),
        Protocol::Ldpfl => clip2val(&raw, ranges, cfg.epsilon),
        _ => Ok(raw),
    }
}

/// Per-layer center `c` and half-width `r` of the LDP-FL value range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerRange {
    pub center: f64,
    pub radius: f64,
}

/// Smallest half-width the server hands out.
pub const MIN_RANGE_RADIUS: f64 = 1e-3;

/// One [`LayerRange`] per layer of the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRanges(Vec<LayerRange>);

impl LayerRanges {
    pub fn new(ranges: Vec<LayerRange>) -> Result<Self> {
        for r in &ranges {
            if !(r.radius > 0.0 && r.radius.is_finite() && r.center.is_finite()) {
                return Err(Error::config(format!(
                    "layer range radius must be positive, got {}",
                    r.radius
                )));
            }
        }
        Ok(Self(ranges))
    }

    /// The same range for every layer.
    pub fn uniform(center: f64, radius: f64, layers: usize) -> Result<Self> {
        Self::new(vec![LayerRange { center, radius }; layers])
    }

    /// Server-side range: midpoint and half-width of each layer of the
    /// global model, with the half-width floored at [`MIN_RANGE_RADIUS`].
    pub fn from_global(theta_g: &ParamVector) -> Self {
        Self(
            theta_g
                .layers()
                .map(|(_, vals)| {
                    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let (lo, hi) = if vals.is_empty() { (0.0, 0.0) } else { (lo, hi) };
                    LayerRange {
                        center: 0.5 * (lo + hi),
                        radius: (0.5 * (hi - lo)).max(MIN_RANGE_RADIUS),
                    }
                })
                .collect(),
        )
    }

    pub fn as_slice(&self) -> &[LayerRange] {
        &self.0
    }

    fn check(&self, theta: &ParamVector) -> Result<()> {
        if self.0.len() == theta.shapes().len() {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{} layer ranges for {} layers",
                self.0.len(),
                theta.shapes().len()
            )))
        }
    }
}

/// The two output values `(c - rK, c + rK)` with `K = (e^eps+1)/(e^eps-1)`.
pub fn two_point_values(range: LayerRange, epsilon: f64) -> (f64, f64) {
    let em1 = epsilon.exp_m1();
    let k = (em1 + 2.0) / em1;
    (range.center - range.radius * k, range.center + range.radius * k)
}

/// Probability of reporting the high value for weight `w` (clamped into
/// `[c - r, c + r]` first).
pub fn high_probability(w: f64, range: LayerRange, epsilon: f64) -> f64 {
    let (c, r) = (range.center, range.radius);
    let e = epsilon.exp();
    let w = w.clamp(c - r, c + r);
    if w == c + r {
        e / (e + 1.0)
    } else if w == c - r {
        1.0 / (e + 1.0)
    } else {
        ((w - c) * (e - 1.0) + r * (e + 1.0)) / (2.0 * r * (e + 1.0))
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("epsilon must be positive, got {epsilon}")))
    }
}

/// LDP-FL's randomized report: each weight becomes one of the two layer
/// values, unbiased for in-range inputs.
pub fn data_perturbation<R: Rng + ?Sized>(
    theta: &ParamVector,
    ranges: &LayerRanges,
    epsilon: f64,
    rng: &mut R,
) -> Result<ParamVector> {
    ranges.check(theta)?;
    check_epsilon(epsilon)?;
    let mut out = Vec::with_capacity(theta.dim());
    for ((_, vals), &range) in theta.layers().zip(ranges.as_slice()) {
        let (low, high) = two_point_values(range, epsilon);
        for &w in vals {
            let p = high_probability(w, range, epsilon);
            out.push(if rng.gen::<f64>() < p { high } else { low });
        }
    }
    theta.with_values(out)
}

/// Deterministic bypass mapping onto the two-point codomain: high if
/// `w > c`, low otherwise.
pub fn clip2val(theta: &ParamVector, ranges: &LayerRanges, epsilon: f64) -> Result<ParamVector> {
    ranges.check(theta)?;
    check_epsilon(epsilon)?;
    let mut out = Vec::with_capacity(theta.dim());
    for ((_, vals), &range) in theta.layers().zip(ranges.as_slice()) {
        let (low, high) = two_point_values(range, epsilon);
        out.extend(vals.iter().map(|&w| if w > range.center { high } else { low }));
    }
    theta.with_values(out)
}

/// Per coordinate: `Some(true)` for the high value, `Some(false)` for the
/// low value, `None` if the value is outside the two-point codomain.
pub fn two_point_pattern(theta: &ParamVector, ranges: &LayerRanges, epsilon: f64) -> Result<Vec<Option<bool>>> {
    ranges.check(theta)?;
    let mut out = Vec::with_capacity(theta.dim());
    for ((_, vals), &range) in theta.layers().zip(ranges.as_slice()) {
        let (low, high) = two_point_values(range, epsilon);
        out.extend(vals.iter().map(|&w| {
            if w == high {
                Some(true)
            } else if w == low {
                Some(false)
            } else {
                None
            }
        }));
    }
    Ok(out)
}

pub fn is_two_point(theta: &ParamVector, ranges: &LayerRanges, epsilon: f64) -> bool {
    two_point_pattern(theta, ranges, epsilon).is_ok_and(|p| p.iter().all(Option::is_some))
}
