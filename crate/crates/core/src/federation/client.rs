use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::FederationError;
use crate::model::{Dataset, Model, ModelError, Momentum, ParameterSet};
use crate::pruning::{
    accumulate_reg_gradient, admm_u_step, admm_z_step, final_hard_prune, magnitude_mask_update, AdmmState,
    PruneMask, SparsityConfig,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

/// What a client does with the global model in a given round.
pub enum ClientPhase<'a> {
    /// Plain local SGD.
    Warmup,
    /// SGD on the augmented loss, then one Z and U update. The outgoing
    /// model is projected onto `budget`; `mask` pins weights pruned in
    /// earlier stages.
    AdmmPrune { state: AdmmState, budget: &'a SparsityConfig, mask: Option<&'a PruneMask> },
    /// SGD with masked gradients; pruned weights stay exactly zero.
    MaskedFinetune { mask: &'a PruneMask },
    /// Baseline: plain SGD, then top-n magnitude projection of the update.
    MaskedBaseline { budget: &'a SparsityConfig },
}

#[derive(Debug, Clone)]
pub struct ClientOutput {
    pub update: ParameterSet,
    pub admm: Option<AdmmState>,
    pub mean_loss: f64,
    pub examples: usize,
}

/// Train one client's copy of the global model on its own examples.
pub fn client_round(
    model: &Model,
    global: &ParameterSet,
    data: &Dataset,
    indices: &[usize],
    settings: &LocalSettings,
    phase: ClientPhase<'_>,
    shuffle_seed: u64,
) -> Result<ClientOutput, FederationError> {
    if indices.is_empty() {
        return Err(FederationError::Partition("client holds no examples".into()));
    }
    let mut params = global.clone();
    let (state, mask) = match &phase {
        ClientPhase::AdmmPrune { state, mask, .. } => (Some(state), *mask),
        ClientPhase::MaskedFinetune { mask } => (None, Some(*mask)),
        _ => (None, None),
    };
    let mut momentum = Momentum::new(settings.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut order = indices.to_vec();
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    let train = settings.lr > 0.0 && settings.epochs > 0;
    for _ in 0..settings.epochs {
        if !train {
            break;
        }
        order.shuffle(&mut rng);
        for chunk in order.chunks(settings.batch_size) {
            let batch = data.batch(chunk)?;
            let (loss, mut grad) = model.loss_and_gradient(&params, &batch)?;
            if let Some(state) = state {
                accumulate_reg_gradient(&params, state, &mut grad)?;
            }
            if let Some(mask) = mask {
                mask.apply(&mut grad);
            }
            momentum.step(&mut params, &grad, settings.lr)?;
            if let Some(mask) = mask {
                mask.apply(&mut params);
            }
            loss_sum += loss;
            batches += 1;
        }
    }
    if !params.values().all(|v| v.abs() <= f32::MAX as f64) {
        return Err(ModelError::Diverged.into());
    }
    let mean_loss = if batches > 0 { loss_sum / batches as f64 } else { f64::NAN };
    let (update, admm) = match phase {
        ClientPhase::Warmup | ClientPhase::MaskedFinetune { .. } => (params, None),
        ClientPhase::AdmmPrune { state, budget, .. } => {
            let state = admm_z_step(&params, &state)?;
            let state = admm_u_step(&params, &state)?;
            (final_hard_prune(&params, budget)?.0, Some(state))
        }
        ClientPhase::MaskedBaseline { budget } => (magnitude_mask_update(&params, budget)?, None),
    };
    Ok(ClientOutput { update, admm, mean_loss, examples: indices.len() })
}
