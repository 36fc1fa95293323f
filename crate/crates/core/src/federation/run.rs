use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};
use rayon::prelude::*;

use super::client::{client_round, ClientOutput, ClientPhase, LocalSettings};
use super::config::{DatasetKind, ExperimentConfig, Mode, PartitionKind};
use super::partition::{partition_iid, partition_noniid, Partition};
use super::schedule::{Phase, Schedule};
use super::FederationError;
use crate::channel::{
    encrypt_update, ClientSealer, EncryptedUpdate, TranscriptLog, RECORD_HEADER_LEN, TAG_LEN,
};
use crate::codec::{self, CommLedger, LedgerEntry, RoundVolume, WireFormat};
use crate::enclave::{fedavg, BoundaryStats, EnclaveContext, Submission};
use crate::model::data::{gaussian_blobs, load_cifar10, load_mnist};
use crate::model::{Dataset, Model, ParameterSet, Split};
use crate::pruning::{
    admm_init, compression_rate, final_hard_prune, magnitude_mask_update, AdmmState, PruneMask,
    SparsityConfig,
};

const SYNTHETIC_SEPARATION: f32 = 0.05;
const SYNTHETIC_TRAIN: usize = 50_000;
const SYNTHETIC_TEST: usize = 10_000;

pub struct ExperimentData {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_data(cfg: &ExperimentConfig, dir: &Path) -> Result<ExperimentData, FederationError> {
    let (train, test) = match cfg.dataset {
        DatasetKind::Mnist => (load_mnist(dir, Split::Train)?, load_mnist(dir, Split::Test)?),
        DatasetKind::Cifar10 => (load_cifar10(dir, Split::Train)?, load_cifar10(dir, Split::Test)?),
        DatasetKind::SyntheticCifar => {
            let n_train = cfg.train_examples.unwrap_or(SYNTHETIC_TRAIN);
            let n_test = cfg.test_examples.unwrap_or(SYNTHETIC_TEST);
            let all = gaussian_blobs(n_train + n_test, &[3, 32, 32], 10, SYNTHETIC_SEPARATION, cfg.seed);
            let train_idx: Vec<usize> = (0..n_train).collect();
            let test_idx: Vec<usize> = (n_train..n_train + n_test).collect();
            (all.subset(&train_idx), all.subset(&test_idx))
        }
    };
    let cap = |d: Dataset, n: Option<usize>| match n {
        Some(n) if n < d.len() => d.take(n),
        _ => d,
    };
    Ok(ExperimentData { train: cap(train, cfg.train_examples), test: cap(test, cfg.test_examples) })
}

pub fn partition_for(cfg: &ExperimentConfig, train: &Dataset) -> Result<Partition, FederationError> {
    let seed = derive_seed(cfg.seed, Stream::Partition, 0, 0);
    match cfg.partition {
        PartitionKind::Iid => partition_iid(train.len(), cfg.num_clients, seed),
        PartitionKind::NonIid { shard_size, shards_per_client } => partition_noniid(
            train.labels(),
            cfg.num_clients,
            cfg.num_clients * shards_per_client,
            shard_size,
            shards_per_client,
            seed,
        ),
    }
}

/// Seconds spent in each part of a round. `transmission` includes the
/// modelled link time, which is also reported on its own.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RoundTimes {
    pub attestation: f64,
    pub provisioning: f64,
    pub transmission: f64,
    pub ecall: f64,
    pub ocall: f64,
    pub local_training: f64,
    pub aggregation: f64,
    pub total: f64,
    pub link_model: f64,
}

impl RoundTimes {
    pub fn component_sum(&self) -> f64 {
        self.attestation
            + self.provisioning
            + self.transmission
            + self.ecall
            + self.ocall
            + self.local_training
            + self.aggregation
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub phase: Phase,
    pub stage: usize,
    pub accuracy: f64,
    pub eval_examples: usize,
    pub keep_fraction: f64,
    pub global_density: f64,
    pub clients: usize,
    pub rejected: usize,
    pub train_loss: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub dense_bytes_up: u64,
    pub dense_bytes_down: u64,
    pub times: RoundTimes,
}

impl RoundMetrics {
    pub fn pruning_phase(&self) -> bool {
        self.phase != Phase::Warmup
    }
}

pub struct ExperimentOutcome {
    pub metrics: Vec<RoundMetrics>,
    pub final_params: ParameterSet,
    pub final_accuracy: f64,
    pub compression_rate: f64,
    pub ledger: CommLedger,
    pub transcript: TranscriptLog,
    pub boundary: BoundaryStats,
    pub mask: Option<PruneMask>,
}

#[derive(Debug, thiserror::Error)]
#[error("experiment aborted after {} completed rounds: {error}", completed.len())]
pub struct RunError {
    pub completed: Vec<RoundMetrics>,
    #[source]
    pub error: FederationError,
}

#[derive(Clone, Copy)]
enum Stream {
    Partition = 1,
    Sampling = 2,
    Shuffle = 3,
    Keys = 4,
    Init = 5,
    Eval = 6,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, stream: Stream, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(seed ^ ((stream as u64) << 56)) ^ a) ^ b)
}

pub fn run_experiment(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<ExperimentOutcome, RunError> {
    run_experiment_with(cfg, data, |_| {})
}

/// Run the experiment, calling `on_round` after every completed round.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    mut on_round: impl FnMut(&RoundMetrics),
) -> Result<ExperimentOutcome, RunError> {
    let mut completed = Vec::new();
    match drive(cfg, data, &mut completed, &mut on_round) {
        Ok(outcome) => Ok(outcome),
        Err(error) => Err(RunError { completed, error }),
    }
}

struct Upload {
    client: usize,
    record: EncryptedUpdate,
    examples: u64,
    dense_equivalent: u64,
}

fn drive(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    completed: &mut Vec<RoundMetrics>,
    on_round: &mut dyn FnMut(&RoundMetrics),
) -> Result<ExperimentOutcome, FederationError> {
    cfg.validate()?;
    let arch = cfg.arch.build(data.train.input_shape(), data.train.num_classes());
    let model = Model::new(arch)?;
    let partition = partition_for(cfg, &data.train)?;
    let schedule = Schedule::new(cfg);
    let settings = LocalSettings {
        epochs: cfg.local_epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        momentum: cfg.momentum,
    };

    let mut global = model.init_params(derive_seed(cfg.seed, Stream::Init, 0, 0)).to_wire_precision();
    let target = SparsityConfig::from_keep_fractions(&global, &cfg.keep_fractions)?;

    let mut eval_order: Vec<usize> = (0..data.test.len()).collect();
    eval_order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, Stream::Eval, 0, 0)));
    let eval_set = data.test.subset(&eval_order[..cfg.eval_examples.min(eval_order.len())]);

    let mut key_rng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, Stream::Keys, 0, 0));
    let mut enclave = EnclaveContext::new(cfg.trusted_buffer_bytes, &mut key_rng);
    let mut sealers: Vec<ClientSealer> = Vec::with_capacity(cfg.num_clients);
    let mut published = Vec::new();

    let mut ledger = CommLedger::new();
    let mut mask: Option<PruneMask> = None;
    let mut admm_states: HashMap<usize, AdmmState> = HashMap::new();
    let mut admm_stage = 0usize;
    let mut final_accuracy = 0.0;

    for round in 0..schedule.total() {
        let round_start = Instant::now();
        let mut times = RoundTimes::default();
        let r32 = round as u32;
        let phase = schedule.phase(round);
        let budget = schedule.budget(round, &target);

        if round == 0 {
            let t = Instant::now();
            for id in 0..cfg.num_clients {
                let (key, _) = enclave.register_client(id as u32, 0, &mut key_rng)?;
                sealers.push(ClientSealer::new(key));
            }
            times.attestation = t.elapsed().as_secs_f64();
            let t = Instant::now();
            published = enclave.publish_model(&global)?.to_bytes();
            times.ocall += t.elapsed().as_secs_f64();
        }

        let mut sample_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, Stream::Sampling, round as u64, 0));
        let mut chosen = sample(&mut sample_rng, cfg.num_clients, cfg.clients_per_round).into_vec();
        chosen.sort_unstable();

        // Download: every chosen client decodes the published model.
        let t = Instant::now();
        let starts = chosen.iter().map(|_| codec::decode(&published)).collect::<Result<Vec<_>, _>>()?;
        let mut transmission = t.elapsed().as_secs_f64();
        let download_bytes = published.len() as u64;

        if phase == Phase::AdmmPrune {
            let stage = schedule.stage(round).unwrap_or(0);
            if stage != admm_stage {
                admm_states.clear();
                admm_stage = stage;
            }
        }
        let mut jobs = Vec::with_capacity(chosen.len());
        for (&c, start) in chosen.iter().zip(starts) {
            let client_phase = match (phase, budget.as_ref()) {
                (Phase::AdmmPrune, Some(b)) => {
                    let state = match admm_states.remove(&c) {
                        Some(s) => s,
                        None => admm_init(&start, b, cfg.rho)?,
                    };
                    ClientPhase::AdmmPrune { state, budget: b, mask: mask.as_ref() }
                }
                (Phase::MaskedFinetune, _) => ClientPhase::MaskedFinetune {
                    mask: mask.as_ref().expect("fine-tune follows the last ramp stage"),
                },
                (Phase::MaskedPrune, Some(b)) => ClientPhase::MaskedBaseline { budget: b },
                _ => ClientPhase::Warmup,
            };
            jobs.push((c, start, client_phase));
        }

        let t = Instant::now();
        let outputs: Vec<(usize, ClientOutput)> = jobs
            .into_par_iter()
            .map(|(c, start, client_phase)| {
                let seed = derive_seed(cfg.seed, Stream::Shuffle, c as u64, round as u64);
                client_round(&model, &start, &data.train, partition.client(c), &settings, client_phase, seed)
                    .map(|out| (c, out))
            })
            .collect::<Result<_, _>>()?;
        times.local_training = t.elapsed().as_secs_f64();

        let train_loss = outputs.iter().map(|(_, o)| o.mean_loss).sum::<f64>() / outputs.len() as f64;
        let format = if schedule.in_pruning_phase(round) && cfg.mode != Mode::Dense {
            WireFormat::Csr
        } else {
            WireFormat::Dense
        };

        let t = Instant::now();
        let mut uploads = Vec::with_capacity(outputs.len());
        for (c, out) in outputs {
            let bytes = codec::encode(&out.update, format);
            let record = encrypt_update(&bytes, &mut sealers[c], r32, format)?;
            let dense_equivalent =
                (RECORD_HEADER_LEN + TAG_LEN + codec::encoded_size(&out.update, WireFormat::Dense)) as u64;
            if let Some(state) = out.admm {
                admm_states.insert(c, state);
            }
            uploads.push(Upload { client: c, record, examples: out.examples as u64, dense_equivalent });
        }
        times.provisioning = t.elapsed().as_secs_f64();

        // Upload: records cross the wire as bytes and are parsed by the server.
        let t = Instant::now();
        let mut submissions = Vec::with_capacity(uploads.len());
        let mut upload_sizes = Vec::with_capacity(uploads.len());
        for up in &uploads {
            debug_assert_eq!(up.record.client_id as usize, up.client);
            let wire = up.record.to_bytes();
            upload_sizes.push(wire.len() as u64);
            submissions
                .push(Submission { record: EncryptedUpdate::from_bytes(&wire)?, example_count: up.examples });
        }
        transmission += t.elapsed().as_secs_f64();

        let volume = codec::account_round(&upload_sizes, download_bytes, chosen.len());
        let dense_volume = RoundVolume {
            uploaded: uploads.iter().map(|u| u.dense_equivalent).sum(),
            downloaded: download_bytes * chosen.len() as u64,
        };
        times.link_model = volume.uploaded as f64 * 8.0 / (cfg.uplink_mbps * 1e6)
            + volume.downloaded as f64 * 8.0 / (cfg.downlink_mbps * 1e6);
        times.transmission = transmission + times.link_model;

        let t = Instant::now();
        let loaded = enclave.enclave_load(&submissions);
        times.ecall = t.elapsed().as_secs_f64();
        let rejected = loaded.rejected.len();

        let t = Instant::now();
        if !loaded.input.is_empty() {
            global = fedavg(loaded.input)?.to_wire_precision();
        }
        if phase == Phase::AdmmPrune && schedule.stage_ends(round) {
            if let Some(b) = budget.as_ref() {
                let (pruned, m) = final_hard_prune(&global, b)?;
                global = pruned;
                mask = Some(m);
            }
        }
        let last = round + 1 == schedule.total();
        if cfg.mode == Mode::Masked && last {
            if let Some(b) = budget.as_ref() {
                global = magnitude_mask_update(&global, b)?;
            }
        }
        times.aggregation = t.elapsed().as_secs_f64();

        let t = Instant::now();
        published = enclave.publish_model(&global)?.to_bytes();
        times.ocall += t.elapsed().as_secs_f64();

        times.total = round_start.elapsed().as_secs_f64() + times.link_model;

        let scored = match (phase, budget.as_ref()) {
            (Phase::MaskedPrune, Some(b)) if !last => magnitude_mask_update(&global, b)?,
            _ => global.clone(),
        };
        let (accuracy, eval_examples) = if last {
            (model.evaluate(&scored, &data.test)?, data.test.len())
        } else {
            (model.evaluate(&scored, &eval_set)?, eval_set.len())
        };
        if last {
            final_accuracy = accuracy;
        }

        ledger.record(LedgerEntry {
            round,
            pruning_phase: schedule.in_pruning_phase(round),
            actual: volume,
            dense_equivalent: dense_volume,
        });
        let metrics = RoundMetrics {
            round,
            phase,
            stage: schedule.stage(round).unwrap_or(0),
            accuracy,
            eval_examples,
            keep_fraction: budget.as_ref().map_or(1.0, SparsityConfig::keep_fraction),
            global_density: scored.weight_density(),
            clients: chosen.len(),
            rejected,
            train_loss,
            bytes_up: volume.uploaded,
            bytes_down: volume.downloaded,
            dense_bytes_up: dense_volume.uploaded,
            dense_bytes_down: dense_volume.downloaded,
            times,
        };
        on_round(&metrics);
        completed.push(metrics);
    }

    Ok(ExperimentOutcome {
        metrics: completed.clone(),
        compression_rate: compression_rate(&global),
        final_params: global,
        final_accuracy,
        ledger,
        transcript: enclave.transcript().clone(),
        boundary: enclave.stats(),
        mask,
    })
}
