//! Model poisoning attacks by compromised clients.
//!
//! * RPA: random Gaussian update of fixed norm (baseline).
//! * LLRA: local training on the negated loss; the `input` variant goes
//!   through the protocol's perturbation, the `output` variant bypasses it.
//! * TMMA: uploads `(N * target - (N - n) * estimate) / n` so that FedAvg
//!   lands exactly on the attacker's target model.
//! * AdaPA: negated-loss training where every step is projected onto the
//!   set of updates the robust aggregator is likely to accept.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::aggregation::{geometric_median, AggregationConfig, GEOMEDIAN_MAX_ITER, GEOMEDIAN_TOL};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ldp::{
    clip2val, finalize_upload, train_local, two_point_pattern, two_point_values, LayerRanges, Protocol,
    ProtocolConfig, RoundOptions, TransformLayer,
};
use crate::models::{Batch, Model};
use crate::params::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Rpa,
    Llra,
    Tmma,
    Adapa,
}

/// Whether the crafted model passes through the LDP mechanism.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    #[default]
    Input,
    Output,
}

/// What the attacker knows about the other clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Knowledge {
    /// Own data only.
    Local,
    /// Also the client counts `N` and `n`.
    Partial,
    /// Also the benign uploads of the current round.
    Global,
}

fn default_ate() -> usize {
    1
}
fn default_scal() -> f64 {
    1.0
}
fn default_t_scale() -> f64 {
    50.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackPlan {
    pub kind: AttackKind,
    #[serde(default)]
    pub mode: AttackMode,
    /// Defaults to the least knowledge the attack needs.
    #[serde(default)]
    pub knowledge: Option<Knowledge>,
    /// Adversarial training epochs.
    #[serde(default = "default_ate")]
    pub ate: usize,
    /// Zoom factor of the AdaPA projection (and the LDP-FL merge fraction).
    #[serde(default = "default_scal")]
    pub scal: f64,
    /// RPA norm multiplier `t`.
    #[serde(default = "default_t_scale")]
    pub t_scale: f64,
    /// TMMA: estimate benign behaviour as the mean of eavesdropped uploads
    /// instead of a local benign round. Needs global knowledge.
    #[serde(default)]
    pub estimate_from_view: bool,
}

impl AttackPlan {
    pub fn new(kind: AttackKind) -> Self {
        Self {
            kind,
            mode: AttackMode::Input,
            knowledge: None,
            ate: default_ate(),
            scal: default_scal(),
            t_scale: default_t_scale(),
            estimate_from_view: false,
        }
    }

    pub fn with_mode(mut self, mode: AttackMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_ate(mut self, ate: usize) -> Self {
        self.ate = ate;
        self
    }

    pub fn required_knowledge(&self) -> Knowledge {
        match self.kind {
            AttackKind::Rpa | AttackKind::Llra => Knowledge::Local,
            AttackKind::Tmma if self.estimate_from_view => Knowledge::Global,
            AttackKind::Tmma => Knowledge::Partial,
            AttackKind::Adapa => Knowledge::Global,
        }
    }

    pub fn knowledge(&self) -> Knowledge {
        self.knowledge.unwrap_or_else(|| self.required_knowledge())
    }

    /// Short label such as `llra-o` or `adapa`.
    pub fn label(&self) -> String {
        let suffix = match self.mode {
            AttackMode::Input => "i",
            AttackMode::Output => "o",
        };
        match self.kind {
            AttackKind::Rpa => "rpa".into(),
            AttackKind::Adapa => "adapa".into(),
            AttackKind::Llra => format!("llra-{suffix}"),
            AttackKind::Tmma => format!("tmma-{suffix}"),
        }
    }

    pub fn validate(&self, protocol: Protocol, aggregation: &AggregationConfig) -> Result<()> {
        if self.ate == 0 {
            return Err(Error::config("attack ate must be at least 1"));
        }
        if self.scal.is_nan() || self.scal <= 0.0 {
            return Err(Error::config(format!("attack scal must be positive, got {}", self.scal)));
        }
        if !(self.t_scale >= 0.0 && self.t_scale.is_finite()) {
            return Err(Error::config(format!("attack t_scale must be non-negative, got {}", self.t_scale)));
        }
        if self.knowledge() < self.required_knowledge() {
            return Err(Error::config(format!(
                "{} needs {:?} knowledge, plan grants {:?}",
                self.label(),
                self.required_knowledge(),
                self.knowledge()
            )));
        }
        if self.kind == AttackKind::Adapa && protocol == Protocol::Ldpfl {
            if matches!(aggregation, AggregationConfig::Trimmedmean { .. }) {
                return Err(Error::config("adapa against trimmed mean is not defined for ldpfl"));
            }
            if self.scal > 1.0 {
                return Err(Error::config(format!(
                    "adapa on ldpfl merges a scal fraction of dimensions; scal must be <= 1, got {}",
                    self.scal
                )));
            }
        }
        Ok(())
    }
}

/// What a compromised client can see of the round.
#[derive(Debug, Clone, Default)]
pub struct EavesdropView {
    /// Benign uploads of this round, ascending client id (global knowledge).
    pub benign_uploads: Option<Vec<ParamVector>>,
    /// Total number of clients `N` (partial knowledge and above).
    pub n_total: Option<usize>,
    /// Number of compromised clients `n` (partial knowledge and above).
    pub n_malicious: Option<usize>,
}

impl EavesdropView {
    /// Assembles the view for `knowledge`; uploads are dropped below global.
    pub fn for_knowledge(
        knowledge: Knowledge,
        benign_uploads: &[ParamVector],
        n_total: usize,
        n_malicious: usize,
    ) -> Self {
        match knowledge {
            Knowledge::Local => Self::default(),
            Knowledge::Partial => Self {
                benign_uploads: None,
                n_total: Some(n_total),
                n_malicious: Some(n_malicious),
            },
            Knowledge::Global => Self {
                benign_uploads: Some(benign_uploads.to_vec()),
                n_total: Some(n_total),
                n_malicious: Some(n_malicious),
            },
        }
    }

    pub fn uploads(&self) -> Result<&[ParamVector]> {
        match &self.benign_uploads {
            Some(u) if !u.is_empty() => Ok(u),
            _ => Err(Error::usage("attack needs the benign uploads of the round")),
        }
    }

    fn counts(&self) -> Result<(usize, usize)> {
        match (self.n_total, self.n_malicious) {
            (Some(total), Some(n)) => Ok((total, n)),
            _ => Err(Error::usage("attack needs the client counts N and n")),
        }
    }
}

/// Round-level inputs shared by every attack.
#[derive(Debug, Clone, Copy)]
pub struct AttackContext<'a> {
    pub model: &'a Model,
    pub global: &'a ParamVector,
    pub protocol: &'a ProtocolConfig,
    pub aggregation: &'a AggregationConfig,
    /// LDP-FL value ranges of this round.
    pub ranges: &'a LayerRanges,
}

/// The compromised client's own resources.
#[derive(Debug)]
pub struct AttackerData<'a> {
    pub data: &'a Dataset,
    /// PrivateFL private layer; `None` for other protocols.
    pub transform: Option<&'a mut TransformLayer>,
}

/// Whether a crafted update satisfies the defense constraint it was
/// fitted to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    /// `ball`, `box`, `two_point` or `none`.
    pub constraint: String,
    pub satisfied: bool,
    /// Distance to the constraint boundary; negative when violated.
    pub slack: f64,
}

/// Random poisoning baseline.
pub fn rpa_update<R: Rng + ?Sized>(ctx: &AttackContext<'_>, plan: &AttackPlan, rng: &mut R) -> Result<ParamVector> {
    let cfg = ctx.protocol;
    if cfg.protocol == Protocol::Ldpfl {
        let mut out = Vec::with_capacity(ctx.global.dim());
        for ((_, vals), &range) in ctx.global.layers().zip(ctx.ranges.as_slice()) {
            let (low, high) = two_point_values(range, cfg.epsilon);
            out.extend(vals.iter().map(|_| if rng.gen::<bool>() { high } else { low }));
        }
        return ctx.global.with_values(out);
    }
    let target_norm = plan.t_scale * cfg.clip_c * plan.ate as f64;
    let mut g: Vec<f64> = (0..ctx.global.dim()).map(|_| StandardNormal.sample(rng)).collect();
    let norm = crate::params::l2_norm(&g);
    let factor = if norm > 0.0 { target_norm / norm } else { 0.0 };
    for v in &mut g {
        *v *= factor;
    }
    let out = ctx
        .global
        .values()
        .iter()
        .zip(&g)
        .map(|(w, gi)| w - cfg.eta * gi)
        .collect();
    ctx.global.with_values(out)
}

/// Local loss reversal.
pub fn llra_update<R: Rng + ?Sized>(
    ctx: &AttackContext<'_>,
    attacker: AttackerData<'_>,
    plan: &AttackPlan,
    rng: &mut R,
) -> Result<ParamVector> {
    if plan.kind != AttackKind::Llra {
        return Err(Error::usage(format!("llra_update called with a {} plan", plan.label())));
    }
    let apply_ldp = plan.mode == AttackMode::Input;
    let opts = RoundOptions {
        malicious: true,
        apply_ldp,
        epochs: plan.ate,
    };
    let (raw, _) = train_local(ctx.model, ctx.global, attacker.data, ctx.protocol, attacker.transform, opts, rng)?;
    finalize_upload(raw, ctx.protocol, ctx.ranges, apply_ldp, rng)
}

/// `(N * target - (N - n) * estimate) / n`, coordinate-wise.
pub fn tmma_combine(target: &ParamVector, estimate: &ParamVector, n_total: usize, n_malicious: usize) -> Result<ParamVector> {
    if n_malicious == 0 || n_malicious > n_total {
        return Err(Error::usage(format!(
            "tmma needs 1 <= n <= N, got n = {n_malicious}, N = {n_total}"
        )));
    }
    if !target.same_shape(estimate) {
        return Err(Error::Shape("tmma target and estimate differ in shape".into()));
    }
    let big_n = n_total as f64;
    let benign = (n_total - n_malicious) as f64;
    let n = n_malicious as f64;
    let values = target
        .values()
        .iter()
        .zip(estimate.values())
        .map(|(t, e)| (big_n * t - benign * e) / n)
        .collect();
    target.with_values(values)
}

/// Targeted model manipulation. `estimate_rng` drives the benign-style
/// estimate round so it can mirror a real benign client's stream.
pub fn tmma_update<R: Rng + ?Sized, E: Rng + ?Sized>(
    ctx: &AttackContext<'_>,
    attacker: AttackerData<'_>,
    view: &EavesdropView,
    plan: &AttackPlan,
    rng: &mut R,
    estimate_rng: &mut E,
) -> Result<ParamVector> {
    if plan.kind != AttackKind::Tmma {
        return Err(Error::usage(format!("tmma_update called with a {} plan", plan.label())));
    }
    let (n_total, n_malicious) = view.counts()?;
    if n_malicious == 0 {
        return Err(Error::usage("tmma with zero compromised clients"));
    }
    let AttackerData { data, transform } = attacker;

    let estimate = if plan.estimate_from_view {
        ParamVector::mean(view.uploads()?)?
    } else {
        // Benign-style round on a scratch copy of the private layer.
        let mut scratch_t = transform.as_deref().cloned();
        let (est, _) = train_local(
            ctx.model,
            ctx.global,
            data,
            ctx.protocol,
            scratch_t.as_mut(),
            RoundOptions::benign(ctx.protocol),
            estimate_rng,
        )?;
        est
    };

    let apply_ldp = plan.mode == AttackMode::Input;
    let target_opts = RoundOptions {
        malicious: true,
        // LDP-FL perturbs at upload, never during training.
        apply_ldp: apply_ldp && ctx.protocol.protocol.is_gradient_perturbing(),
        epochs: plan.ate,
    };
    let (target, _) = train_local(ctx.model, ctx.global, data, ctx.protocol, transform, target_opts, rng)?;
    let crafted = tmma_combine(&target, &estimate, n_total, n_malicious)?;
    finalize_upload(crafted, ctx.protocol, ctx.ranges, apply_ldp, rng)
}

/// Starting point of the adaptive attack.
pub fn adapa_init(
    protocol: Protocol,
    global: &ParamVector,
    view: &EavesdropView,
    aggregation: &AggregationConfig,
) -> Result<ParamVector> {
    if protocol == Protocol::Ldpfl {
        return Ok(global.clone());
    }
    match aggregation {
        AggregationConfig::Multikrum { .. } => geometric_median(view.uploads()?, GEOMEDIAN_TOL, GEOMEDIAN_MAX_ITER),
        AggregationConfig::Trimmedmean { .. } => ParamVector::mean(view.uploads()?),
        AggregationConfig::Fedavg => Ok(global.clone()),
    }
}

/// The feasible set an adaptive update is projected onto.
#[derive(Debug, Clone)]
pub enum DefenseFit {
    /// No constraint.
    Identity,
    /// Ball around the benign geometric median.
    Ball { center: ParamVector, radius: f64 },
    /// Per-coordinate survivor range of the benign uploads.
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

impl DefenseFit {
    /// Precomputes the constraint for this round.
    pub fn prepare(
        protocol: Protocol,
        view: &EavesdropView,
        aggregation: &AggregationConfig,
        scal: f64,
    ) -> Result<Self> {
        if protocol == Protocol::Ldpfl {
            return Ok(DefenseFit::Identity);
        }
        match *aggregation {
            AggregationConfig::Fedavg => Ok(DefenseFit::Identity),
            AggregationConfig::Multikrum { .. } => {
                let uploads = view.uploads()?;
                let center = geometric_median(uploads, GEOMEDIAN_TOL, GEOMEDIAN_MAX_ITER)?;
                let nearest = uploads
                    .iter()
                    .map(|u| u.distance(&center))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .fold(f64::INFINITY, f64::min);
                Ok(DefenseFit::Ball {
                    center,
                    radius: scal * nearest,
                })
            }
            AggregationConfig::Trimmedmean { beta } => {
                let uploads = view.uploads()?;
                let (lower, upper) = survivor_range(uploads, beta)?;
                Ok(DefenseFit::Box { lower, upper })
            }
        }
    }

    /// Projects `theta_adv` onto the feasible set.
    pub fn apply(&self, theta_adv: &ParamVector) -> Result<ParamVector> {
        match self {
            DefenseFit::Identity => Ok(theta_adv.clone()),
            DefenseFit::Ball { center, radius } => {
                let delta = theta_adv.sub(center)?;
                let norm = delta.l2_norm();
                if norm <= *radius || radius.is_infinite() {
                    return Ok(theta_adv.clone());
                }
                let mut factor = radius / norm;
                loop {
                    let values = center
                        .values()
                        .iter()
                        .zip(delta.values())
                        .map(|(c, d)| c + d * factor)
                        .collect();
                    let out = center.with_values(values)?;
                    if out.distance(center)? <= *radius {
                        return Ok(out);
                    }
                    factor *= 1.0 - 4.0 * f64::EPSILON;
                }
            }
            DefenseFit::Box { lower, upper } => {
                if lower.len() != theta_adv.dim() {
                    return Err(Error::Shape("survivor range dimension mismatch".into()));
                }
                let values = theta_adv
                    .values()
                    .iter()
                    .zip(lower.iter().zip(upper))
                    .map(|(&w, (&lo, &hi))| w.clamp(lo, hi))
                    .collect();
                theta_adv.with_values(values)
            }
        }
    }

    /// Checks `theta` against the constraint without modifying it.
    pub fn check(&self, theta: &ParamVector) -> Result<ConstraintReport> {
        match self {
            DefenseFit::Identity => Ok(ConstraintReport {
                constraint: "none".into(),
                satisfied: true,
                slack: f64::INFINITY,
            }),
            DefenseFit::Ball { center, radius } => {
                let slack = radius - theta.distance(center)?;
                Ok(ConstraintReport {
                    constraint: "ball".into(),
                    satisfied: slack >= 0.0,
                    slack,
                })
            }
            DefenseFit::Box { lower, upper } => {
                let slack = theta
                    .values()
                    .iter()
                    .zip(lower.iter().zip(upper))
                    .map(|(&w, (&lo, &hi))| (w - lo).min(hi - w))
                    .fold(f64::INFINITY, f64::min);
                Ok(ConstraintReport {
                    constraint: "box".into(),
                    satisfied: slack >= 0.0,
                    slack,
                })
            }
        }
    }
}

/// Per coordinate, the `(beta+1)`-th smallest and `(M-beta)`-th smallest of
/// the `M` benign values: the range trimmed mean keeps.
pub fn survivor_range(uploads: &[ParamVector], beta: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = uploads.len();
    if m < 2 * beta + 1 {
        return Err(Error::config(format!(
            "{m} benign uploads leave no survivors after trimming {beta} per side"
        )));
    }
    let dim = uploads[0].dim();
    let mut column = vec![0.0; m];
    let mut lower = Vec::with_capacity(dim);
    let mut upper = Vec::with_capacity(dim);
    for j in 0..dim {
        for (c, u) in column.iter_mut().zip(uploads) {
            *c = u.values()[j];
        }
        column.sort_by(f64::total_cmp);
        lower.push(column[beta]);
        upper.push(column[m - beta - 1]);
    }
    Ok((lower, upper))
}

/// Projects one adversarial iterate onto the defense's acceptance region.
pub fn fit_on_def(
    theta_adv: &ParamVector,
    view: &EavesdropView,
    protocol: Protocol,
    aggregation: &AggregationConfig,
    scal: f64,
) -> Result<ParamVector> {
    DefenseFit::prepare(protocol, view, aggregation, scal)?.apply(theta_adv)
}

/// Per coordinate the value most benign clients reported; ties go to the
/// low value.
pub fn restricted_median(uploads: &[ParamVector], ranges: &LayerRanges, epsilon: f64) -> Result<ParamVector> {
    let first = uploads.first().ok_or_else(|| Error::usage("restricted median of no uploads"))?;
    let mut high_votes = vec![0usize; first.dim()];
    for u in uploads {
        let pattern = two_point_pattern(u, ranges, epsilon)?;
        for (votes, p) in high_votes.iter_mut().zip(pattern) {
            match p {
                Some(true) => *votes += 1,
                Some(false) => {}
                None => return Err(Error::usage("upload is not two-point valued")),
            }
        }
    }
    let mut out = Vec::with_capacity(first.dim());
    let mut votes = high_votes.iter();
    for ((_, vals), &range) in first.layers().zip(ranges.as_slice()) {
        let (low, high) = two_point_values(range, epsilon);
        for (_, &v) in vals.iter().zip(&mut votes) {
            out.push(if 2 * v > uploads.len() { high } else { low });
        }
    }
    first.with_values(out)
}

fn hamming(a: &ParamVector, b: &ParamVector) -> usize {
    a.values().iter().zip(b.values()).filter(|(x, y)| x != y).count()
}

/// Starts from `restricted` and copies `floor(scal * max_diff)` differing
/// coordinates (chosen uniformly) from `adversarial`, where `max_diff` is
/// the smallest Hamming distance between a benign upload and `restricted`.
pub fn ldpfl_dimension_merge<R: Rng + ?Sized>(
    adversarial: &ParamVector,
    restricted: &ParamVector,
    uploads: &[ParamVector],
    scal: f64,
    rng: &mut R,
) -> Result<ParamVector> {
    if !adversarial.same_shape(restricted) {
        return Err(Error::Shape("merge inputs differ in shape".into()));
    }
    let max_diff = uploads.iter().map(|u| hamming(u, restricted)).min().unwrap_or(0);
    let wanted = (scal * max_diff as f64).floor() as usize;
    let differing: Vec<usize> = (0..adversarial.dim())
        .filter(|&j| adversarial.values()[j] != restricted.values()[j])
        .collect();
    let count = wanted.min(differing.len());
    let mut out = restricted.values().to_vec();
    for pick in index::sample(rng, differing.len(), count) {
        let j = differing[pick];
        out[j] = adversarial.values()[j];
    }
    restricted.with_values(out)
}

/// Mean gradient of the attacker's data, seen through its private layer
/// when one is present. `None` for an empty dataset.
fn local_gradient(model: &Model, theta: &ParamVector, data: &Dataset, transform: Option<&TransformLayer>) -> Result<Option<ParamVector>> {
    if data.is_empty() {
        return Ok(None);
    }
    match transform {
        None => model.grad(theta, &data.batch().expect("non-empty")).map(Some),
        Some(t) => {
            let mut inputs = Vec::with_capacity(data.inputs().len());
            let mut row = Vec::with_capacity(data.input_dim());
            for i in 0..data.len() {
                t.apply(data.row(i), &mut row);
                inputs.extend_from_slice(&row);
            }
            let batch = Batch::new(&inputs, data.labels(), data.input_dim())?;
            model.grad(theta, &batch).map(Some)
        }
    }
}

/// Adaptive poisoning: initialize from the benign uploads, then alternate
/// negated-loss steps with projection onto the defense's feasible set. For
/// LDP-FL the result is mapped to the two-point codomain and merged with
/// the restricted median.
pub fn adapa_generate<R: Rng + ?Sized>(
    ctx: &AttackContext<'_>,
    view: &EavesdropView,
    attacker: AttackerData<'_>,
    plan: &AttackPlan,
    rng: &mut R,
) -> Result<(ParamVector, ConstraintReport)> {
    if plan.kind != AttackKind::Adapa {
        return Err(Error::usage(format!("adapa_generate called with a {} plan", plan.label())));
    }
    plan.validate(ctx.protocol.protocol, ctx.aggregation)?;
    let protocol = ctx.protocol.protocol;
    let uploads = view.uploads()?;
    let fit = DefenseFit::prepare(protocol, view, ctx.aggregation, plan.scal)?;
    let transform = attacker.transform.as_deref();

    let mut theta = adapa_init(protocol, ctx.global, view, ctx.aggregation)?;
    for _ in 0..plan.ate {
        let Some(g) = local_gradient(ctx.model, &theta, attacker.data, transform)? else {
            break;
        };
        // theta - eta * grad(-L) = theta + eta * grad(L)
        let stepped: Vec<f64> = theta
            .values()
            .iter()
            .zip(g.values())
            .map(|(w, gi)| w + ctx.protocol.eta * gi)
            .collect();
        theta = fit.apply(&theta.with_values(stepped)?)?;
    }

    if protocol == Protocol::Ldpfl {
        let eps = ctx.protocol.epsilon;
        let restricted = restricted_median(uploads, ctx.ranges, eps)?;
        let adversarial = clip2val(&theta, ctx.ranges, eps)?;
        let merged = ldpfl_dimension_merge(&adversarial, &restricted, uploads, plan.scal, rng)?;
        let satisfied = crate::ldp::is_two_point(&merged, ctx.ranges, eps);
        return Ok((
            merged,
            ConstraintReport {
                constraint: "two_point".into(),
                satisfied,
                slack: 0.0,
            },
        ));
    }
    let report = fit.check(&theta)?;
    Ok((theta, report))
}
