use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::FederationError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Iid,
    NonIid { shards_per_client: usize, shard_size: usize },
}

/// Example indices owned by each client; client `k` owns `clients[k]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub scheme: Scheme,
    pub clients: Vec<Vec<usize>>,
    /// Examples left unassigned because they did not divide evenly.
    pub dropped: usize,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client(&self, id: usize) -> &[usize] {
        &self.clients[id]
    }

    pub fn assigned(&self) -> usize {
        self.clients.iter().map(Vec::len).sum()
    }

    pub fn is_disjoint(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.clients.iter().flatten().all(|i| seen.insert(*i))
    }

    pub fn distinct_labels(&self, id: usize, labels: &[u8]) -> usize {
        self.clients[id].iter().map(|&i| labels[i]).collect::<BTreeSet<_>>().len()
    }
}

/// Shuffle the indices and deal equal contiguous slices to the clients.
pub fn partition_iid(
    dataset_size: usize,
    num_clients: usize,
    seed: u64,
) -> Result<Partition, FederationError> {
    if num_clients == 0 || num_clients > dataset_size {
        return Err(FederationError::Partition(format!(
            "cannot split {dataset_size} examples across {num_clients} clients"
        )));
    }
    let per_client = dataset_size / num_clients;
    let mut order: Vec<usize> = (0..dataset_size).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let clients = order.chunks_exact(per_client).take(num_clients).map(|c| c.to_vec()).collect();
    Ok(Partition { scheme: Scheme::Iid, clients, dropped: dataset_size - per_client * num_clients })
}

/// Sort by label, cut into contiguous shards and hand every client
/// `shards_per_client` shards drawn without replacement.
pub fn partition_noniid(
    labels: &[u8],
    num_clients: usize,
    num_shards: usize,
    shard_size: usize,
    shards_per_client: usize,
    seed: u64,
) -> Result<Partition, FederationError> {
    if num_clients == 0 || shards_per_client == 0 || shard_size == 0 {
        return Err(FederationError::Partition("shard parameters must be positive".into()));
    }
    if num_shards != num_clients * shards_per_client {
        return Err(FederationError::Partition(format!(
            "{num_shards} shards cannot give {num_clients} clients {shards_per_client} each"
        )));
    }
    if num_shards * shard_size > labels.len() {
        return Err(FederationError::Partition(format!(
            "{num_shards} shards of {shard_size} exceed {} examples",
            labels.len()
        )));
    }
    let mut sorted: Vec<usize> = (0..labels.len()).collect();
    sorted.sort_by_key(|&i| (labels[i], i));
    let mut shard_ids: Vec<usize> = (0..num_shards).collect();
    shard_ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let clients = shard_ids
        .chunks_exact(shards_per_client)
        .map(|mine| {
            let mut idx: Vec<usize> = mine
                .iter()
                .flat_map(|&s| sorted[s * shard_size..(s + 1) * shard_size].iter().copied())
                .collect();
            idx.sort_unstable();
            idx
        })
        .collect();
    Ok(Partition {
        scheme: Scheme::NonIid { shards_per_client, shard_size },
        clients,
        dropped: labels.len() - num_shards * shard_size,
    })
}
