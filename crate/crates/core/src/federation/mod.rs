//! Partitioning, the round schedule and the end-to-end experiment loop.

mod client;
mod config;
mod partition;
mod run;
mod schedule;

pub use client::{client_round, ClientOutput, ClientPhase, LocalSettings};
pub use config::{
    lenet5_keep_cr10, lenet5_keep_cr87, ArchKind, ConfigError, DatasetKind, ExperimentConfig, Mode,
    PartitionKind,
};
pub use partition::{partition_iid, partition_noniid, Partition, Scheme};
pub use run::{
    load_data, partition_for, run_experiment, run_experiment_with, ExperimentData, ExperimentOutcome,
    RoundMetrics, RoundTimes, RunError,
};
pub use schedule::{Phase, Schedule};

use thiserror::Error;

use crate::channel::ChannelError;
use crate::codec::DecodeError;
use crate::enclave::EnclaveError;
use crate::model::{DataError, ModelError};
use crate::pruning::PruneError;

#[derive(Debug, Error)]
pub enum FederationError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("partition: {0}")]
    Partition(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Enclave(#[from] EnclaveError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}
