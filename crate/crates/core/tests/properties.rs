mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{csr_blob_len, dense_blob_len, exhaustive_projection, single_layer};
use esmfl_core::channel::{encrypt_update, ClientSealer, EncryptedUpdate};
use esmfl_core::codec::{
    csr_decode, csr_encode, decode, dense_decode, dense_encode, encode, encoded_size, WireFormat,
};
use esmfl_core::enclave::{fedavg, weighted_mean, EnclaveContext, Submission, DEFAULT_TRUSTED_BUFFER};
use esmfl_core::federation::{client_round, partition_iid, partition_noniid, ClientPhase, LocalSettings};
use esmfl_core::model::data::gaussian_blobs;
use esmfl_core::pruning::{
    admm_init, admm_z_step, compression_rate, euclidean_project, final_hard_prune, SparsityConfig,
};
use esmfl_core::{Model, ModelArch, ParameterSet, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn nonzero_value() -> impl Strategy<Value = f64> {
    prop_oneof![-4.0f64..-1e-3, 1e-3f64..4.0]
}

/// Values drawn from a small integer grid so equal magnitudes are common.
fn tied_value() -> impl Strategy<Value = f64> {
    (-3i32..=3).prop_map(|v| v as f64 * 0.5)
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(nonzero_value(), rows * cols)
}

/// A two-layer parameter set with random shapes and fully non-zero weights.
fn two_layer_params() -> impl Strategy<Value = ParameterSet> {
    (1usize..6, 1usize..8, 1usize..6)
        .prop_flat_map(|(r1, c1, r2)| (matrix(r1, c1), matrix(r2, r1), Just((r1, c1, r2))))
        .prop_map(|(w1, w2, (r1, c1, r2))| {
            ParameterSet::new(vec![
                single_layer("fc1", r1, c1, w1, vec![0.25; r1]),
                single_layer("fc2", r2, r1, w2, vec![-0.5; r2]),
            ])
            .unwrap()
        })
}

fn sparse_params() -> impl Strategy<Value = ParameterSet> {
    (1usize..7, 1usize..9)
        .prop_flat_map(|(r, c)| {
            (
                prop::collection::vec(prop_oneof![3 => Just(0.0), 2 => nonzero_value()], r * c),
                prop::collection::vec(-1.0f64..1.0, r),
                Just((r, c)),
            )
        })
        .prop_map(|(w, b, (r, c))| ParameterSet::new(vec![single_layer("fc1", r, c, w, b)]).unwrap())
}

fn fp32(params: &ParameterSet) -> ParameterSet {
    params.to_wire_precision()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn projection_is_optimal_with_lowest_index_ties(
        (v, k) in prop::collection::vec(prop_oneof![tied_value(), -2.0f64..2.0], 1..=12)
            .prop_flat_map(|v| { let n = v.len(); (Just(v), 0..=n) })
    ) {
        let n = v.len();
        let got = euclidean_project(&Tensor::new(vec![n], v.clone()).unwrap(), k).unwrap();
        let expected = exhaustive_projection(&v, k);
        prop_assert_eq!(got.data(), expected.as_slice());
    }

    #[test]
    fn z_step_is_always_feasible(
        params in two_layer_params(),
        keep1 in 0.0f64..=1.0,
        keep2 in 0.0f64..=1.0,
        noise in prop::collection::vec(-1.0f64..1.0, 64),
    ) {
        let fractions = BTreeMap::from([("fc1".to_string(), keep1), ("fc2".to_string(), keep2)]);
        let cfg = SparsityConfig::from_keep_fractions(&params, &fractions).unwrap();
        let mut state = admm_init(&params, &cfg, 1e-3).unwrap();
        let mut w = params.clone();
        for step in 0..4 {
            for (i, v) in w.values_mut().enumerate() {
                *v += noise[(i + step) % noise.len()];
            }
            state = admm_z_step(&w, &state).unwrap();
            for layer in state.layers() {
                prop_assert!(layer.z.cardinality() <= layer.keep);
                prop_assert_eq!(layer.z.shape(), w.layer(&layer.id).unwrap().weight.shape());
                prop_assert_eq!(layer.u.shape(), layer.z.shape());
            }
        }
    }

    #[test]
    fn hard_prune_hits_budget_and_analytic_rate(
        params in two_layer_params(),
        keep1 in 0.01f64..=1.0,
        keep2 in prop::option::of(0.01f64..=1.0),
    ) {
        let mut fractions = BTreeMap::from([("fc1".to_string(), keep1)]);
        if let Some(k) = keep2 {
            fractions.insert("fc2".to_string(), k);
        }
        let cfg = SparsityConfig::from_keep_fractions(&params, &fractions).unwrap();
        prop_assume!(cfg.layers().iter().all(|b| b.keep > 0));
        let (pruned, mask) = final_hard_prune(&params, &cfg).unwrap();
        let mut expected_nonzero = 0;
        for (layer, budget) in pruned.layers().iter().zip(cfg.layers()) {
            let want = if budget.constrained { budget.keep } else { budget.size };
            prop_assert_eq!(layer.weight.cardinality(), want);
            expected_nonzero += want;
        }
        let analytic = params.num_weights() as f64 / expected_nonzero as f64;
        prop_assert_eq!(compression_rate(&pruned), analytic);
        prop_assert_eq!(mask.compression_rate(), analytic);
        prop_assert!(mask.conforms(&pruned));
    }

    #[test]
    fn codecs_round_trip_at_wire_precision(params in sparse_params()) {
        let csr = csr_decode(&csr_encode(&params)).unwrap();
        let dense = dense_decode(&dense_encode(&params)).unwrap();
        prop_assert_eq!(&csr, &fp32(&params));
        prop_assert_eq!(&csr, &dense);
        for format in [WireFormat::Csr, WireFormat::Dense] {
            prop_assert_eq!(decode(&encode(&params, format)).unwrap(), fp32(&params));
        }
    }

    #[test]
    fn encoded_sizes_match_first_principles(params in sparse_params()) {
        let l = &params.layers()[0];
        let shape = l.weight.shape().to_vec();
        let nnz = l.weight.cardinality();
        let csr = csr_blob_len(&[("fc1", shape.clone(), l.bias.len(), nnz)]);
        let dense = dense_blob_len(&[("fc1", shape, l.bias.len())]);
        prop_assert_eq!(encode(&params, WireFormat::Csr).len(), csr);
        prop_assert_eq!(encoded_size(&params, WireFormat::Csr), csr);
        prop_assert_eq!(encode(&params, WireFormat::Dense).len(), dense);
        prop_assert_eq!(encoded_size(&params, WireFormat::Dense), dense);
    }

    #[test]
    fn csr_blob_shrinks_strictly_with_nnz(params in sparse_params()) {
        let mut p = params;
        let mut last = encode(&p, WireFormat::Csr).len();
        while p.nonzero_weights() > 0 {
            let v = p.values_mut().find(|v| **v != 0.0).unwrap();
            *v = 0.0;
            let size = encode(&p, WireFormat::Csr).len();
            prop_assert!(size < last);
            last = size;
        }
    }

    #[test]
    fn csr_structure_is_well_formed(params in sparse_params()) {
        let blob = csr_encode(&params);
        for layer in &blob.layers {
            let m = &layer.matrix;
            prop_assert_eq!(m.row_ptr[0], 0);
            prop_assert_eq!(*m.row_ptr.last().unwrap() as usize, m.nnz());
            prop_assert!(m.row_ptr.windows(2).all(|w| w[0] <= w[1]));
            for r in 0..m.rows {
                let cols = &m.col_idx[m.row_ptr[r] as usize..m.row_ptr[r + 1] as usize];
                prop_assert!(cols.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn channel_round_trip_and_bit_flips(
        params in sparse_params(),
        client in 0u32..1000,
        round in 0u32..100,
        bit in any::<prop::sample::Index>(),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut enclave = EnclaveContext::new(DEFAULT_TRUSTED_BUFFER, &mut rng);
        let (key, _) = enclave.register_client(client, 0, &mut rng).unwrap();
        let mut sealer = ClientSealer::new(key);
        let payload = encode(&params, WireFormat::Csr);
        let record = encrypt_update(&payload, &mut sealer, round, WireFormat::Csr).unwrap();
        let wire = record.to_bytes();
        let i = bit.index(wire.len() * 8);
        let mut tampered = wire.clone();
        tampered[i / 8] ^= 1 << (i % 8);
        if let Ok(bad) = EncryptedUpdate::from_bytes(&tampered) {
            let outcome = enclave.enclave_load(&[Submission { record: bad, example_count: 1 }]);
            prop_assert_eq!(outcome.input.len(), 0);
            prop_assert_eq!(outcome.rejected.len(), 1);
        }
        let ok = enclave.enclave_load(&[Submission {
            record: EncryptedUpdate::from_bytes(&wire).unwrap(),
            example_count: 1,
        }]);
        prop_assert!(ok.rejected.is_empty());
        prop_assert_eq!(fedavg(ok.input).unwrap(), fp32(&params));
    }

    #[test]
    fn fedavg_is_order_independent(
        updates in prop::collection::vec((matrix(2, 3), 1u64..500), 1..8),
        seed in any::<u64>(),
    ) {
        let sets: Vec<ParameterSet> = updates
            .iter()
            .map(|(w, _)| ParameterSet::new(vec![single_layer("fc1", 2, 3, w.clone(), vec![0.0, 1.0])]).unwrap())
            .collect();
        let forward: Vec<(u32, u64, &ParameterSet)> =
            sets.iter().zip(&updates).enumerate().map(|(i, (p, (_, n)))| (i as u32, *n, p)).collect();
        let mut shuffled = forward.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
        prop_assert_eq!(weighted_mean(&forward).unwrap(), weighted_mean(&shuffled).unwrap());
    }

    #[test]
    fn encrypted_fedavg_equals_plaintext_fedavg(
        updates in prop::collection::vec((matrix(3, 2), 1u64..500), 1..6),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut enclave = EnclaveContext::new(DEFAULT_TRUSTED_BUFFER, &mut rng);
        let sets: Vec<ParameterSet> = updates
            .iter()
            .map(|(w, _)| ParameterSet::new(vec![single_layer("fc1", 3, 2, w.clone(), vec![0.5; 3])]).unwrap())
            .collect();
        let mut subs = Vec::new();
        for (i, (p, (_, n))) in sets.iter().zip(&updates).enumerate() {
            let (key, _) = enclave.register_client(i as u32, 0, &mut rng).unwrap();
            let mut sealer = ClientSealer::new(key);
            let record = encrypt_update(&encode(p, WireFormat::Csr), &mut sealer, 1, WireFormat::Csr).unwrap();
            subs.push(Submission { record, example_count: *n });
        }
        subs.reverse();
        let loaded = enclave.enclave_load(&subs);
        prop_assert!(loaded.rejected.is_empty());
        let encrypted = fedavg(loaded.input).unwrap().to_wire_precision();
        let wire: Vec<ParameterSet> = sets.iter().map(fp32).collect();
        let plain: Vec<(u32, u64, &ParameterSet)> =
            wire.iter().zip(&updates).enumerate().map(|(i, (p, (_, n)))| (i as u32, *n, p)).collect();
        prop_assert_eq!(encrypted, weighted_mean(&plain).unwrap().to_wire_precision());
    }

    #[test]
    fn iid_partition_is_disjoint_and_balanced(size in 10usize..3000, clients in 1usize..40, seed in any::<u64>()) {
        prop_assume!(clients <= size);
        let p = partition_iid(size, clients, seed).unwrap();
        prop_assert!(p.is_disjoint());
        prop_assert_eq!(p.assigned() + p.dropped, size);
        prop_assert!(p.dropped < clients);
        prop_assert!(p.clients.iter().all(|c| c.len() == size / clients));
        prop_assert!(p.clients.iter().flatten().all(|&i| i < size));
    }

    #[test]
    fn noniid_partition_is_disjoint_and_covers_shards(
        clients in 1usize..30,
        shards_per_client in 1usize..4,
        shard_size in 1usize..20,
        extra in 0usize..15,
        seed in any::<u64>(),
    ) {
        let shards = clients * shards_per_client;
        let n = shards * shard_size + extra;
        let labels: Vec<u8> = (0..n).map(|i| (i * 7 % 10) as u8).collect();
        let p = partition_noniid(&labels, clients, shards, shard_size, shards_per_client, seed).unwrap();
        prop_assert!(p.is_disjoint());
        prop_assert_eq!(p.assigned(), shards * shard_size);
        prop_assert_eq!(p.dropped, extra);
        prop_assert!(p.clients.iter().all(|c| c.len() == shards_per_client * shard_size));
    }
}

fn tiny_setup() -> (Model, ParameterSet, esmfl_core::Dataset) {
    let arch = ModelArch::mlp(&[6, 8, 3]);
    let model = Model::new(arch).unwrap();
    let params = model.init_params(4);
    let data = gaussian_blobs(60, &[6], 3, 1.5, 9);
    (model, params, data)
}

#[test]
fn masked_training_keeps_pruned_weights_at_zero() {
    let (model, params, data) = tiny_setup();
    let cfg = SparsityConfig::from_keep_fractions(
        &params,
        &BTreeMap::from([("fc1".to_string(), 0.2), ("fc2".to_string(), 0.5)]),
    )
    .unwrap();
    let (pruned, mask) = final_hard_prune(&params, &cfg).unwrap();
    let settings = LocalSettings { epochs: 3, batch_size: 5, lr: 0.05, momentum: 0.9 };
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut global = pruned;
    for round in 0..4 {
        let out = client_round(
            &model,
            &global,
            &data,
            &indices,
            &settings,
            ClientPhase::MaskedFinetune { mask: &mask },
            round,
        )
        .unwrap();
        assert!(mask.conforms(&out.update), "round {round}");
        assert_ne!(out.update, global);
        global = out.update;
    }
}

#[test]
fn local_training_is_deterministic() {
    let (model, params, data) = tiny_setup();
    let settings = LocalSettings { epochs: 2, batch_size: 7, lr: 0.05, momentum: 0.9 };
    let indices: Vec<usize> = (0..data.len()).step_by(2).collect();
    let run = || client_round(&model, &params, &data, &indices, &settings, ClientPhase::Warmup, 77).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.update, b.update);
    assert_eq!(a.mean_loss.to_bits(), b.mean_loss.to_bits());
}

#[test]
fn small_step_decreases_convex_last_layer_loss() {
    let model = Model::new(ModelArch::mlp(&[6, 3])).unwrap();
    let data = gaussian_blobs(30, &[6], 3, 1.0, 2);
    let batch = data.batch(&(0..30).collect::<Vec<_>>()).unwrap();
    let mut params = model.init_params(1);
    let mut loss = model.forward_loss(&params, &batch).unwrap().0;
    for _ in 0..50 {
        let grad = model.backward(&params, &batch).unwrap();
        params = esmfl_core::model::sgd_step(&params, &grad, 1e-2, None).unwrap();
        let next = model.forward_loss(&params, &batch).unwrap().0;
        assert!(next < loss, "{next} >= {loss}");
        loss = next;
    }
}

#[test]
fn noniid_shards_concentrate_labels() {
    // 60000 label-sorted-style labels, 10 classes, 200 shards of 300.
    let labels: Vec<u8> = (0..60_000).map(|i| (i % 10) as u8).collect();
    let p = partition_noniid(&labels, 100, 200, 300, 2, 1).unwrap();
    let concentrated = (0..100).filter(|&k| p.distinct_labels(k, &labels) <= 3).count();
    assert!(concentrated >= 95, "{concentrated} of 100 clients hold at most 3 labels");
    let owned: BTreeSet<usize> = p.clients.iter().flatten().copied().collect();
    assert_eq!(owned.len(), 60_000);
}
