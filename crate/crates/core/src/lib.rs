//! Deterministic simulator for model poisoning against federated learning
//! with local differential privacy.
//!
//! Clients train small classifiers under one of three LDP protocols
//! (LDPSGD, PrivateFL, LDP-FL), a server aggregates their uploads with
//! FedAvg, Multi-Krum or trimmed mean, and a configurable set of
//! compromised clients runs one of several poisoning attacks. Every random
//! draw is keyed by `(seed, client, round, purpose)`, so a run is
//! reproducible bit for bit regardless of thread scheduling.

pub mod aggregation;
pub mod attacks;
pub mod data;
pub mod error;
pub mod ldp;
pub mod models;
pub mod params;
pub mod rng;
pub mod simulator;

pub use aggregation::{aggregate, Aggregate, AggregationConfig};
pub use attacks::{AttackKind, AttackMode, AttackPlan, EavesdropView, Knowledge};
pub use data::{Dataset, PartitionConfig};
pub use error::{Error, Result};
pub use ldp::{LayerRange, LayerRanges, Protocol, ProtocolConfig, RoundOptions, TransformLayer};
pub use models::{Batch, Model, ModelKind, ModelSpec};
pub use params::{LayerShape, ParamVector};
pub use simulator::{run_experiment, DatasetSource, ExperimentConfig, RoundRecord, Simulation};
