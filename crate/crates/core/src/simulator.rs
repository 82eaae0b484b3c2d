//! Round loop: local training, eavesdropping, attacks, aggregation and
//! evaluation.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, AggregationConfig};
use crate::attacks::{
    adapa_generate, llra_update, rpa_update, tmma_update, AttackContext, AttackKind, AttackPlan, AttackerData,
    ConstraintReport, EavesdropView,
};
use crate::data::{dirichlet_partition, load_idx, stratified_split, stratified_subset, synth_blobs, Dataset, PartitionConfig};
use crate::error::{Error, Result};
use crate::ldp::{finalize_upload, train_local, LayerRanges, Protocol, ProtocolConfig, RoundOptions, TransformLayer};
use crate::models::{Model, ModelKind, ModelSpec};
use crate::params::ParamVector;
use crate::rng::{stream, stream_seed, Purpose};

fn default_hidden_dim() -> usize {
    64
}
fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Hidden width of `mlp2`; ignored for logistic regression.
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    pub alpha: f64,
    /// Defaults to a stream derived from the global seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// IDX image/label files, optionally gzipped.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Stratified subset size drawn from the training files.
        #[serde(default)]
        subset: Option<usize>,
        /// Held-out files. When absent, a stratified `test_fraction` of the
        /// (subset) data is held out.
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    /// Gaussian blobs.
    Synth {
        num_classes: usize,
        input_dim: usize,
        samples_per_class: usize,
        spread: f64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

impl DatasetSource {
    /// Makes relative paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let DatasetSource::Idx {
            images,
            labels,
            test_images,
            test_labels,
            ..
        } = self
        {
            for p in [Some(images), Some(labels), test_images.as_mut(), test_labels.as_mut()]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }

    /// Loads `(train, test)`.
    pub fn load(&self, global_seed: u64) -> Result<(Dataset, Dataset)> {
        let split_seed = stream_seed(global_seed, 0, 0, Purpose::DataSplit);
        match self {
            DatasetSource::Idx {
                images,
                labels,
                subset,
                test_images,
                test_labels,
                test_fraction,
            } => {
                let mut train = load_idx(images, labels)?;
                if let Some(n) = *subset {
                    train = stratified_subset(&train, n, split_seed)?;
                }
                match (test_images, test_labels) {
                    (Some(ti), Some(tl)) => {
                        let test = load_idx(ti, tl)?;
                        if test.input_dim() != train.input_dim() {
                            return Err(Error::config("test files differ in input dimension"));
                        }
                        Ok((train, test))
                    }
                    (None, None) => stratified_split(&train, *test_fraction, split_seed ^ 1),
                    _ => Err(Error::config("test_images and test_labels must be given together")),
                }
            }
            DatasetSource::Synth {
                num_classes,
                input_dim,
                samples_per_class,
                spread,
                test_fraction,
            } => {
                let seed = stream_seed(global_seed, 0, 0, Purpose::Synthetic);
                let ds = synth_blobs(*num_classes, *input_dim, *samples_per_class, *spread, seed)?;
                stratified_split(&ds, *test_fraction, split_seed)
            }
        }
    }
}

/// Everything that defines one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: ProtocolConfig,
    pub aggregation: AggregationConfig,
    #[serde(default)]
    pub attack: Option<AttackPlan>,
    pub rounds: usize,
    pub num_clients: usize,
    #[serde(default)]
    pub malicious_ids: Vec<usize>,
    pub partition: PartitionSection,
    pub model: ModelSection,
    pub dataset: DatasetSource,
    pub global_seed: u64,
}

impl ExperimentConfig {
    /// Checks everything that does not need the data.
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds must be at least 1"));
        }
        if self.num_clients == 0 {
            return Err(Error::config("num_clients must be at least 1"));
        }
        let mut ids = self.malicious_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.malicious_ids.len() {
            return Err(Error::config("malicious_ids contains duplicates"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.num_clients) {
            return Err(Error::config(format!(
                "malicious id {bad} out of range for {} clients",
                self.num_clients
            )));
        }
        self.protocol.validate()?;
        self.aggregation.validate(self.num_clients)?;
        if self.protocol.protocol == Protocol::Ldpfl && matches!(self.aggregation, AggregationConfig::Trimmedmean { .. }) {
            return Err(Error::config("trimmed mean is not supported with ldpfl"));
        }
        PartitionConfig {
            num_clients: self.num_clients,
            alpha: self.partition.alpha,
            seed: 0,
        }
        .validate()?;
        if let Some(plan) = &self.attack {
            plan.validate(self.protocol.protocol, &self.aggregation)?;
            let n = ids.len();
            if n > 0 && plan.kind == AttackKind::Adapa {
                let benign = self.num_clients - n;
                if benign == 0 {
                    return Err(Error::config("adapa needs at least one benign client to eavesdrop on"));
                }
                if let AggregationConfig::Trimmedmean { beta } = self.aggregation {
                    if benign < 2 * beta + 1 {
                        return Err(Error::config(format!(
                            "adapa needs N - n >= 2 * beta + 1, got {benign} benign clients and beta = {beta}"
                        )));
                    }
                }
            }
            if n > 0 && plan.estimate_from_view && self.num_clients == n {
                return Err(Error::config("estimate_from_view needs at least one benign client"));
            }
        }
        Ok(())
    }

    pub fn partition_config(&self) -> PartitionConfig {
        PartitionConfig {
            num_clients: self.num_clients,
            alpha: self.partition.alpha,
            seed: self
                .partition
                .seed
                .unwrap_or_else(|| stream_seed(self.global_seed, 0, 0, Purpose::Partition)),
        }
    }

    pub fn model_spec(&self, input_dim: usize, num_classes: usize) -> ModelSpec {
        match self.model.kind {
            ModelKind::LogisticRegression => ModelSpec::logistic(input_dim, num_classes),
            ModelKind::Mlp2 => ModelSpec::mlp2(input_dim, self.model.hidden_dim, num_classes),
        }
    }

    /// The attack only matters when someone carries it out.
    fn active_attack(&self) -> Option<&AttackPlan> {
        self.attack.as_ref().filter(|_| !self.malicious_ids.is_empty())
    }
}

/// Outcome of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub error_rate: f64,
    pub test_loss: f64,
    pub global_norm: f64,
    /// Multi-Krum selection, ascending client id.
    pub selected: Option<Vec<usize>>,
    /// Compromised clients among `selected`.
    pub malicious_selected: Option<usize>,
    /// Empty Poisson batches per client.
    pub skipped_batches: Vec<usize>,
    /// AdaPA constraint check per compromised client.
    pub constraints: Option<Vec<ConstraintReport>>,
}

struct ClientOutput {
    upload: ParamVector,
    transform: Option<TransformLayer>,
    skipped: usize,
}

/// A running experiment.
#[derive(Debug, Clone)]
pub struct Simulation {
    cfg: ExperimentConfig,
    model: Model,
    global: ParamVector,
    shards: Vec<Dataset>,
    test: Dataset,
    transforms: Vec<Option<TransformLayer>>,
    malicious: Vec<bool>,
    round: usize,
}

impl Simulation {
    /// Loads and partitions the data, then initializes the global model.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let (train, test) = cfg.dataset.load(cfg.global_seed)?;
        let partition = dirichlet_partition(&train, &cfg.partition_config())?;
        Self::from_parts(cfg, partition.shards, test)
    }

    /// Builds a simulation over caller-supplied client shards.
    pub fn from_parts(cfg: ExperimentConfig, shards: Vec<Dataset>, test: Dataset) -> Result<Self> {
        cfg.validate()?;
        if shards.len() != cfg.num_clients {
            return Err(Error::config(format!(
                "{} shards for {} clients",
                shards.len(),
                cfg.num_clients
            )));
        }
        let input_dim = test.input_dim();
        let num_classes = shards.iter().map(Dataset::num_classes).fold(test.num_classes(), usize::max);
        if shards.iter().any(|s| s.input_dim() != input_dim) {
            return Err(Error::Shape("client shards and test set differ in input dimension".into()));
        }
        let model = Model::new(cfg.model_spec(input_dim, num_classes))?;
        let global = model.init_params(stream_seed(cfg.global_seed, 0, 0, Purpose::ModelInit));
        let transforms = (0..cfg.num_clients)
            .map(|_| (cfg.protocol.protocol == Protocol::Privatefl).then(|| TransformLayer::identity(input_dim)))
            .collect();
        let mut malicious = vec![false; cfg.num_clients];
        for &i in &cfg.malicious_ids {
            malicious[i] = true;
        }
        Ok(Self {
            cfg,
            model,
            global,
            shards,
            test,
            transforms,
            malicious,
            round: 0,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn global(&self) -> &ParamVector {
        &self.global
    }

    /// Replaces the global model, e.g. to start from a pretrained state.
    pub fn set_global(&mut self, theta: ParamVector) -> Result<()> {
        self.model.check_params(&theta)?;
        self.global = theta;
        Ok(())
    }

    pub fn shards(&self) -> &[Dataset] {
        &self.shards
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    /// Index of the next round.
    pub fn round(&self) -> usize {
        self.round
    }

    /// `(error_rate, test_loss)` of the current global model.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        let batch = self.test.batch().ok_or_else(|| Error::usage("empty test set"))?;
        Ok((
            self.model.error_rate(&self.global, &batch)?,
            self.model.loss(&self.global, &batch)?,
        ))
    }

    fn benign_client(&self, id: usize, round: usize, ranges: &LayerRanges) -> Result<ClientOutput> {
        let seed = self.cfg.global_seed;
        let mut transform = self.transforms[id].clone();
        let mut rng = stream(seed, id as u64, round as u64, Purpose::LocalTraining);
        let (raw, diag) = train_local(
            &self.model,
            &self.global,
            &self.shards[id],
            &self.cfg.protocol,
            transform.as_mut(),
            RoundOptions::benign(&self.cfg.protocol),
            &mut rng,
        )?;
        let mut prng = stream(seed, id as u64, round as u64, Purpose::Perturbation);
        let upload = finalize_upload(raw, &self.cfg.protocol, ranges, true, &mut prng)?;
        Ok(ClientOutput {
            upload,
            transform,
            skipped: diag.skipped_batches,
        })
    }

    fn attack_client(
        &self,
        id: usize,
        round: usize,
        plan: &AttackPlan,
        view: &EavesdropView,
        ctx: &AttackContext<'_>,
    ) -> Result<(ClientOutput, Option<ConstraintReport>)> {
        let seed = self.cfg.global_seed;
        let mut rng = stream(seed, id as u64, round as u64, Purpose::Attack);
        let mut transform = self.transforms[id].clone();
        let attacker = AttackerData {
            data: &self.shards[id],
            transform: transform.as_mut(),
        };
        let mut report = None;
        let upload = match plan.kind {
            AttackKind::Rpa => rpa_update(ctx, plan, &mut rng)?,
            AttackKind::Llra => llra_update(ctx, attacker, plan, &mut rng)?,
            AttackKind::Tmma => {
                let mut est_rng = stream(seed, id as u64, round as u64, Purpose::AttackEstimate);
                tmma_update(ctx, attacker, view, plan, &mut rng, &mut est_rng)?
            }
            AttackKind::Adapa => {
                let (theta, r) = adapa_generate(ctx, view, attacker, plan, &mut rng)?;
                report = Some(r);
                theta
            }
        };
        Ok((
            ClientOutput {
                upload,
                transform,
                skipped: 0,
            },
            report,
        ))
    }

    /// Runs one round and replaces the global model.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let round = self.round;
        self.step(round).map_err(|e| e.in_round(round))
    }

    fn step(&mut self, round: usize) -> Result<RoundRecord> {
        let n_total = self.cfg.num_clients;
        let ranges = LayerRanges::from_global(&self.global);
        let attack = self.cfg.active_attack().cloned();
        let attacking = |id: usize| attack.is_some() && self.malicious[id];

        let benign_ids: Vec<usize> = (0..n_total).filter(|&i| !attacking(i)).collect();
        let benign: Vec<ClientOutput> = benign_ids
            .par_iter()
            .map(|&id| self.benign_client(id, round, &ranges))
            .collect::<Result<_>>()?;

        let mut outputs: Vec<Option<ClientOutput>> = (0..n_total).map(|_| None).collect();
        let mut constraints = None;
        if let Some(plan) = &attack {
            let malicious_ids = &self.cfg.malicious_ids;
            let benign_uploads: Vec<ParamVector> = benign.iter().map(|o| o.upload.clone()).collect();
            let view = EavesdropView::for_knowledge(plan.knowledge(), &benign_uploads, n_total, malicious_ids.len());
            let ctx = AttackContext {
                model: &self.model,
                global: &self.global,
                protocol: &self.cfg.protocol,
                aggregation: &self.cfg.aggregation,
                ranges: &ranges,
            };
            let mut ordered: Vec<usize> = malicious_ids.clone();
            ordered.sort_unstable();
            // Under Multi-Krum every compromised client uploads the same
            // adaptive vector, crafted on the lowest id's data.
            let shared = plan.kind == AttackKind::Adapa && matches!(self.cfg.aggregation, AggregationConfig::Multikrum { .. });
            let crafted: Vec<(ClientOutput, Option<ConstraintReport>)> = if shared {
                let (first, report) = self.attack_client(ordered[0], round, plan, &view, &ctx)?;
                let copies = ordered
                    .iter()
                    .map(|&id| {
                        let out = ClientOutput {
                            upload: first.upload.clone(),
                            transform: if id == ordered[0] {
                                first.transform.clone()
                            } else {
                                self.transforms[id].clone()
                            },
                            skipped: 0,
                        };
                        (out, report.clone())
                    })
                    .collect();
                copies
            } else {
                ordered
                    .par_iter()
                    .map(|&id| self.attack_client(id, round, plan, &view, &ctx))
                    .collect::<Result<_>>()?
            };
            let mut reports = Vec::new();
            for (&id, (out, report)) in ordered.iter().zip(crafted) {
                outputs[id] = Some(out);
                reports.extend(report);
            }
            if plan.kind == AttackKind::Adapa {
                constraints = Some(reports);
            }
        }
        for (id, out) in benign_ids.iter().zip(benign) {
            outputs[*id] = Some(out);
        }

        let mut uploads = Vec::with_capacity(n_total);
        let mut skipped_batches = Vec::with_capacity(n_total);
        for (id, out) in outputs.into_iter().enumerate() {
            let out = out.expect("every client produced an upload");
            uploads.push(out.upload);
            skipped_batches.push(out.skipped);
            self.transforms[id] = out.transform;
        }
        debug_assert_eq!(uploads.len(), n_total);
        let agg = aggregate(&self.cfg.aggregation, &uploads)?;
        self.global = agg.model;
        self.round += 1;

        let (error_rate, test_loss) = self.evaluate()?;
        let malicious_selected = agg
            .selected
            .as_ref()
            .map(|sel| sel.iter().filter(|&&i| self.malicious[i]).count());
        let record = RoundRecord {
            round,
            error_rate,
            test_loss,
            global_norm: self.global.l2_norm(),
            selected: agg.selected,
            malicious_selected,
            skipped_batches,
            constraints,
        };
        log::debug!("round {round}: error rate {error_rate:.4}");
        Ok(record)
    }

    /// Runs all remaining rounds.
    pub fn run(&mut self) -> Result<Vec<RoundRecord>> {
        (self.round..self.cfg.rounds).map(|_| self.run_round()).collect()
    }
}

/// Loads, partitions and runs `cfg` to completion.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RoundRecord>> {
    Simulation::new(cfg.clone())?.run()
}
