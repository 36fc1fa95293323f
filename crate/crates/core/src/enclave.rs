//! Emulated enclave on the aggregation server.
//!
//! Every boundary crossing copies its payload through a bounded trusted
//! buffer and charges the measured wall time to an ecall or ocall counter.
//! Decrypted updates only exist as [`Plaintext`] values, which need a
//! [`TrustedSection`] to read; neither can be built outside this crate's
//! enclave code.
//!
//! The types are nameable from outside,
//!
//! ```
//! use esmfl_core::channel::Plaintext;
//! use esmfl_core::enclave::{AggregationInput, TrustedSection};
//! fn _named(_: Option<&TrustedSection>, _: Option<&Plaintext>, _: Option<&AggregationInput>) {}
//! ```
//!
//! but not constructible:
//!
//! ```compile_fail
//! let section = esmfl_core::enclave::TrustedSection { _private: () };
//! ```
//!
//! ```compile_fail
//! let leaked = esmfl_core::channel::Plaintext(vec![0u8; 4]);
//! ```
//!
//! ```compile_fail
//! use esmfl_core::enclave::AggregationInput;
//! let input = AggregationInput { entries: Vec::new() };
//! ```

use std::time::{Duration, Instant};

use rand::RngCore;
use thiserror::Error;

use crate::channel::{
    attest_and_exchange, decrypt_update, AttestationTranscript, ChannelError, ClientKey, EncryptedUpdate,
    KeyManager, Plaintext, TranscriptLog,
};
use crate::codec::{self, DecodeError, DenseBlob};
use crate::model::ParameterSet;
use crate::tensor::TensorError;

pub const DEFAULT_TRUSTED_BUFFER: usize = 64 << 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnclaveError {
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("update payload: {0}")]
    Decode(#[from] DecodeError),
    #[error("update shape: {0}")]
    Shape(#[from] TensorError),
    #[error("payload of {needed} bytes exceeds the {capacity}-byte trusted buffer")]
    BufferOverflow { needed: usize, capacity: usize },
    #[error("update from client {0} carries a zero example count")]
    ZeroWeight(u32),
    #[error("no updates to aggregate")]
    EmptyInput,
    #[error("client {0} appears twice in one aggregation")]
    DuplicateContribution(u32),
}

/// Capability held only by code running inside the enclave.
pub struct TrustedSection {
    _private: (),
}

impl TrustedSection {
    fn enter() -> Self {
        TrustedSection { _private: () }
    }

    #[cfg(test)]
    pub(crate) fn for_tests() -> Self {
        Self::enter()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BoundaryStats {
    pub ecalls: u64,
    pub ecall_time: Duration,
    pub ocalls: u64,
    pub ocall_time: Duration,
}

/// An encrypted record together with the sender's example count.
#[derive(Debug, Clone)]
pub struct Submission {
    pub record: EncryptedUpdate,
    pub example_count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub client_id: u32,
    pub error: EnclaveError,
}

/// Decoded client updates awaiting aggregation, sorted by client id.
pub struct AggregationInput {
    entries: Vec<(u32, u64, ParameterSet)>,
}

impl AggregationInput {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn client_ids(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn total_examples(&self) -> u64 {
        self.entries.iter().map(|e| e.1).sum()
    }
}

pub struct LoadOutcome {
    pub input: AggregationInput,
    pub rejected: Vec<Rejection>,
}

pub struct EnclaveContext {
    key_manager: KeyManager,
    capacity: usize,
    buffer: Vec<u8>,
    stats: BoundaryStats,
    log: TranscriptLog,
}

impl EnclaveContext {
    pub fn new(capacity: usize, rng: &mut impl RngCore) -> Self {
        Self {
            key_manager: KeyManager::new(rng),
            capacity,
            buffer: Vec::new(),
            stats: BoundaryStats::default(),
            log: TranscriptLog::new(),
        }
    }

    pub fn key_manager(&self) -> &KeyManager {
        &self.key_manager
    }

    pub fn stats(&self) -> BoundaryStats {
        self.stats
    }

    pub fn transcript(&self) -> &TranscriptLog {
        &self.log
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Attest the enclave to one client and register its key.
    pub fn register_client(
        &mut self,
        client_id: u32,
        round: u32,
        rng: &mut impl RngCore,
    ) -> Result<(ClientKey, AttestationTranscript), ChannelError> {
        let done = attest_and_exchange(client_id, round, &mut self.key_manager, rng)?;
        self.log.attestation(&done.1);
        Ok(done)
    }

    fn copy_in(&mut self, bytes: &[u8]) -> Result<(), EnclaveError> {
        if bytes.len() > self.capacity {
            return Err(EnclaveError::BufferOverflow { needed: bytes.len(), capacity: self.capacity });
        }
        self.buffer.clear();
        self.buffer.extend_from_slice(bytes);
        Ok(())
    }

    fn open(&mut self, sub: &Submission, section: &TrustedSection) -> Result<ParameterSet, EnclaveError> {
        if sub.example_count == 0 {
            return Err(EnclaveError::ZeroWeight(sub.record.client_id));
        }
        self.copy_in(&sub.record.ciphertext)?;
        let plain: Plaintext = decrypt_update(&sub.record, &mut self.key_manager, section)?;
        Ok(codec::decode(plain.bytes(section))?)
    }

    /// Move each record across the boundary, decrypt and decode it. Records
    /// that fail are reported and left out of the returned input.
    pub fn enclave_load(&mut self, submissions: &[Submission]) -> LoadOutcome {
        let section = TrustedSection::enter();
        let mut entries: Vec<(u32, u64, ParameterSet)> = Vec::with_capacity(submissions.len());
        let mut rejected = Vec::new();
        for sub in submissions {
            let start = Instant::now();
            let opened = self.open(sub, &section).and_then(|params| {
                if entries.iter().any(|e| e.0 == sub.record.client_id) {
                    return Err(EnclaveError::DuplicateContribution(sub.record.client_id));
                }
                if let Some(first) = entries.first() {
                    first.2.check_congruent(&params)?;
                }
                Ok(params)
            });
            self.stats.ecalls += 1;
            self.stats.ecall_time += start.elapsed();
            match opened {
                Ok(params) => {
                    self.log.accepted(&sub.record);
                    entries.push((sub.record.client_id, sub.example_count, params));
                }
                Err(error) => {
                    if let EnclaveError::Channel(e) = &error {
                        self.log.rejected(sub.record.client_id, sub.record.round, e);
                    }
                    rejected.push(Rejection { client_id: sub.record.client_id, error });
                }
            }
        }
        self.buffer.clear();
        entries.sort_by_key(|e| e.0);
        LoadOutcome { input: AggregationInput { entries }, rejected }
    }

    /// Serialize the global model and copy it out to the clients.
    pub fn publish_model(&mut self, params: &ParameterSet) -> Result<DenseBlob, EnclaveError> {
        let start = Instant::now();
        let blob = codec::dense_encode(params);
        let bytes = blob.to_bytes();
        self.copy_in(&bytes)?;
        let exported = self.buffer.clone();
        self.buffer.clear();
        self.stats.ocalls += 1;
        self.stats.ocall_time += start.elapsed();
        debug_assert_eq!(exported, bytes);
        Ok(blob)
    }
}

/// Example-weighted mean of the client models, summed in ascending client
/// id order as `x_0 + sum_k (w_k / W) (x_k - x_0)` so identical inputs
/// reproduce exactly.
pub fn weighted_mean(entries: &[(u32, u64, &ParameterSet)]) -> Result<ParameterSet, EnclaveError> {
    let mut order: Vec<&(u32, u64, &ParameterSet)> = entries.iter().collect();
    order.sort_by_key(|e| e.0);
    let first = order.first().ok_or(EnclaveError::EmptyInput)?;
    for pair in order.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(EnclaveError::DuplicateContribution(pair[0].0));
        }
    }
    let mut total: u64 = 0;
    for e in &order {
        if e.1 == 0 {
            return Err(EnclaveError::ZeroWeight(e.0));
        }
        e.2.check_congruent(first.2)?;
        total += e.1;
    }
    let base = first.2;
    let mut out = base.clone();
    for e in &order[1..] {
        let w = e.1 as f64 / total as f64;
        for ((o, x), x0) in out.values_mut().zip(e.2.values()).zip(base.values()) {
            *o += w * (x - x0);
        }
    }
    Ok(out)
}

pub fn fedavg(input: AggregationInput) -> Result<ParameterSet, EnclaveError> {
    let refs: Vec<(u32, u64, &ParameterSet)> = input.entries.iter().map(|(c, w, p)| (*c, *w, p)).collect();
    weighted_mean(&refs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{encrypt_update, ClientSealer};
    use crate::codec::WireFormat;
    use crate::model::LayerParams;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn params(w: &[f64]) -> ParameterSet {
        ParameterSet::new(vec![LayerParams {
            id: "fc1".into(),
            weight: Tensor::new(vec![1, w.len()], w.to_vec()).unwrap(),
            bias: Tensor::zeros(&[1]),
        }])
        .unwrap()
    }

    fn weights(p: &ParameterSet) -> Vec<f64> {
        p.layers()[0].weight.data().to_vec()
    }

    fn context(n: u32) -> (EnclaveContext, Vec<ClientSealer>) {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut ctx = EnclaveContext::new(1 << 20, &mut rng);
        let sealers =
            (0..n).map(|id| ClientSealer::new(ctx.register_client(id, 0, &mut rng).unwrap().0)).collect();
        (ctx, sealers)
    }

    fn submit(sealer: &mut ClientSealer, p: &ParameterSet, round: u32, examples: u64) -> Submission {
        let bytes = codec::encode(p, WireFormat::Dense);
        Submission {
            record: encrypt_update(&bytes, sealer, round, WireFormat::Dense).unwrap(),
            example_count: examples,
        }
    }

    #[test]
    fn two_update_mean() {
        let a = params(&[1.0, 2.0]);
        let b = params(&[3.0, 4.0]);
        let avg = weighted_mean(&[(0, 5, &a), (1, 5, &b)]).unwrap();
        assert_eq!(weights(&avg), vec![2.0, 3.0]);
    }

    #[test]
    fn identical_updates_are_reproduced_exactly() {
        let p = params(&[0.1, -0.3, 1e-7]);
        let entries: Vec<_> = (0..10).map(|c| (c, 600 + c as u64, &p)).collect();
        assert_eq!(weighted_mean(&entries).unwrap(), p);
    }

    #[test]
    fn balanced_weights_give_the_plain_mean() {
        let ps: Vec<_> = (0..10).map(|k| params(&[k as f64, 2.0 * k as f64])).collect();
        let entries: Vec<_> = ps.iter().enumerate().map(|(k, p)| (k as u32, 600, p)).collect();
        let avg = weighted_mean(&entries).unwrap();
        let expect = [4.5, 9.0];
        for (a, e) in weights(&avg).iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn unequal_weights() {
        let a = params(&[0.0]);
        let b = params(&[4.0]);
        let avg = weighted_mean(&[(3, 300, &a), (1, 100, &b)]).unwrap();
        assert_eq!(weights(&avg), vec![1.0]);
    }

    #[test]
    fn aggregation_errors() {
        assert_eq!(weighted_mean(&[]).unwrap_err(), EnclaveError::EmptyInput);
        let a = params(&[1.0]);
        let b = params(&[1.0, 2.0]);
        assert!(matches!(weighted_mean(&[(0, 1, &a), (1, 1, &b)]), Err(EnclaveError::Shape(_))));
        assert_eq!(weighted_mean(&[(0, 0, &a)]).unwrap_err(), EnclaveError::ZeroWeight(0));
    }

    #[test]
    fn load_counts_one_ecall_per_record() {
        let (mut ctx, mut sealers) = context(3);
        let subs: Vec<_> = sealers.iter_mut().map(|s| submit(s, &params(&[1.0, 2.0]), 0, 10)).collect();
        let out = ctx.enclave_load(&subs);
        assert_eq!(out.input.len(), 3);
        assert!(out.rejected.is_empty());
        assert_eq!(ctx.stats().ecalls, 3);
        let empty = ctx.enclave_load(&[]);
        assert!(empty.input.is_empty() && empty.rejected.is_empty());
        assert_eq!(ctx.stats().ecalls, 3);
    }

    #[test]
    fn one_tampered_record_among_ten_is_dropped() {
        let (mut ctx, mut sealers) = context(10);
        let mut subs: Vec<_> =
            sealers.iter_mut().enumerate().map(|(k, s)| submit(s, &params(&[k as f64]), 1, 600)).collect();
        subs[4].record.ciphertext[3] ^= 0x20;
        let out = ctx.enclave_load(&subs);
        assert_eq!(out.input.len(), 9);
        assert_eq!(out.rejected.len(), 1);
        assert_eq!(out.rejected[0].client_id, 4);
        assert!(!out.input.client_ids().contains(&4));
        assert!(ctx.transcript().lines().iter().any(|l| l.starts_with("reject client=4")));
    }

    #[test]
    fn oversize_record_overflows_the_buffer() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut ctx = EnclaveContext::new(32, &mut rng);
        let mut sealer = ClientSealer::new(ctx.register_client(0, 0, &mut rng).unwrap().0);
        let sub = submit(&mut sealer, &params(&[1.0; 16]), 0, 1);
        let out = ctx.enclave_load(&[sub]);
        assert!(matches!(out.rejected[0].error, EnclaveError::BufferOverflow { .. }));
    }

    #[test]
    fn arrival_order_does_not_matter() {
        let ps: Vec<_> = (0..5).map(|k| params(&[0.1 * k as f64, 1.0 / (k + 1) as f64])).collect();
        let forward: Vec<_> = ps.iter().enumerate().map(|(k, p)| (k as u32, 10 + k as u64, p)).collect();
        let mut backward = forward.clone();
        backward.reverse();
        assert_eq!(weighted_mean(&forward).unwrap(), weighted_mean(&backward).unwrap());
    }

    #[test]
    fn publish_round_trips_and_counts_ocalls() {
        let (mut ctx, mut sealers) = context(2);
        let subs = vec![
            submit(&mut sealers[0], &params(&[1.0, 2.0]), 0, 1),
            submit(&mut sealers[1], &params(&[3.0, 5.0]), 0, 1),
        ];
        let global = fedavg(ctx.enclave_load(&subs).input).unwrap();
        let blob = ctx.publish_model(&global).unwrap();
        assert_eq!(ctx.stats().ocalls, 1);
        let bytes = blob.to_bytes();
        let a = codec::decode(&bytes).unwrap();
        let b = codec::decode(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, global.to_wire_precision());
    }
}
