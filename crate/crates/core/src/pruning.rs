//! Cardinality-constrained weight pruning.
//!
//! Each constrained layer `i` must end with at most `n_i` non-zero weights.
//! The ADMM route splits the problem into a loss-minimizing W-step (SGD on
//! the loss plus `(rho/2)||W - Z + U||²`), a Z-step that projects `W + U`
//! onto the cardinality set, and a dual update `U += W - Z`. The masked
//! baseline simply keeps the top-`n_i` magnitudes of every update.
//!
//! Biases are never pruned.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{Gradient, ParameterSet};
use crate::tensor::Tensor;

pub const DEFAULT_RHO: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PruneError {
    #[error("cannot keep {keep} of {len} entries")]
    KeepOutOfRange { keep: usize, len: usize },
    #[error("keep fraction {fraction} for layer {id} is outside [0, 1]")]
    Fraction { id: String, fraction: f64 },
    #[error("layer {0} is not part of the model")]
    UnknownLayer(String),
    #[error("sparsity config and parameters disagree on layer {0}")]
    LayerMismatch(String),
    #[error("no layer is constrained")]
    NoConstrainedLayer,
    #[error("penalty rho must be positive and finite, got {0}")]
    Rho(f64),
}

/// Keep the `n_keep` largest-magnitude entries in place and zero the rest.
/// Equal magnitudes are resolved in favour of the lower flat index.
pub fn euclidean_project(t: &Tensor, n_keep: usize) -> Result<Tensor, PruneError> {
    let mut out = t.clone();
    project_in_place(out.data_mut(), n_keep)?;
    Ok(out)
}

fn project_in_place(values: &mut [f64], n_keep: usize) -> Result<(), PruneError> {
    let len = values.len();
    if n_keep > len {
        return Err(PruneError::KeepOutOfRange { keep: n_keep, len });
    }
    if n_keep == len {
        return Ok(());
    }
    if n_keep == 0 {
        values.fill(0.0);
        return Ok(());
    }
    let mut order: Vec<usize> = (0..len).collect();
    let rank = |a: &usize, b: &usize| -> Ordering {
        values[*b].abs().total_cmp(&values[*a].abs()).then_with(|| a.cmp(b))
    };
    order.select_nth_unstable_by(n_keep - 1, rank);
    let mut keep = vec![false; len];
    for &i in &order[..n_keep] {
        keep[i] = true;
    }
    for (v, k) in values.iter_mut().zip(keep) {
        if !k {
            *v = 0.0;
        }
    }
    Ok(())
}

/// Non-zero budget of one weight tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerBudget {
    pub id: String,
    /// Number of weights in the layer.
    pub size: usize,
    /// Maximum number of non-zero weights, `n_i`.
    pub keep: usize,
    pub constrained: bool,
}

/// Per-layer non-zero budgets for every weight tensor of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityConfig {
    layers: Vec<LayerBudget>,
}

impl SparsityConfig {
    /// Build budgets from keep fractions, `n_i = round(fraction * size)`.
    /// Layers missing from `fractions` stay dense and unconstrained.
    pub fn from_keep_fractions(
        params: &ParameterSet,
        fractions: &BTreeMap<String, f64>,
    ) -> Result<Self, PruneError> {
        let sizes: Vec<(String, usize)> =
            params.layers().iter().map(|l| (l.id.clone(), l.weight.len())).collect();
        Self::from_sizes(&sizes, fractions)
    }

    pub fn from_sizes(
        sizes: &[(String, usize)],
        fractions: &BTreeMap<String, f64>,
    ) -> Result<Self, PruneError> {
        for id in fractions.keys() {
            if !sizes.iter().any(|(s, _)| s == id) {
                return Err(PruneError::UnknownLayer(id.clone()));
            }
        }
        let mut layers = Vec::with_capacity(sizes.len());
        for (id, size) in sizes {
            let budget = match fractions.get(id) {
                Some(&f) => {
                    if !(0.0..=1.0).contains(&f) {
                        return Err(PruneError::Fraction { id: id.clone(), fraction: f });
                    }
                    LayerBudget {
                        id: id.clone(),
                        size: *size,
                        keep: (f * *size as f64).round() as usize,
                        constrained: true,
                    }
                }
                None => LayerBudget { id: id.clone(), size: *size, keep: *size, constrained: false },
            };
            layers.push(budget);
        }
        Self::from_budgets(layers)
    }

    pub fn from_budgets(layers: Vec<LayerBudget>) -> Result<Self, PruneError> {
        if !layers.iter().any(|l| l.constrained) {
            return Err(PruneError::NoConstrainedLayer);
        }
        if let Some(l) = layers.iter().find(|l| l.keep > l.size) {
            return Err(PruneError::KeepOutOfRange { keep: l.keep, len: l.size });
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[LayerBudget] {
        &self.layers
    }

    pub fn budget(&self, id: &str) -> Option<&LayerBudget> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn total_weights(&self) -> usize {
        self.layers.iter().map(|l| l.size).sum()
    }

    pub fn total_keep(&self) -> usize {
        self.layers.iter().map(|l| l.keep).sum()
    }

    /// Overall fraction of weights allowed to be non-zero.
    pub fn keep_fraction(&self) -> f64 {
        self.total_keep() as f64 / self.total_weights() as f64
    }

    /// Analytic compression rate implied by the budgets.
    pub fn compression_rate(&self) -> f64 {
        self.total_weights() as f64 / self.total_keep() as f64
    }

    /// Budgets of stage `stage` of `stages` in a geometric ramp from dense to
    /// these budgets: layer `i` keeps `size * (keep_i / size)^(stage / stages)`.
    pub fn ramp_stage(&self, stage: usize, stages: usize) -> SparsityConfig {
        assert!(stages > 0 && stage <= stages);
        let t = stage as f64 / stages as f64;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let keep = if !l.constrained || stage == stages {
                    l.keep
                } else {
                    let frac = l.keep as f64 / l.size as f64;
                    ((l.size as f64 * frac.powf(t)).round() as usize).clamp(l.keep, l.size)
                };
                LayerBudget { keep, ..l.clone() }
            })
            .collect();
        SparsityConfig { layers }
    }

    fn check_params(&self, params: &ParameterSet) -> Result<(), PruneError> {
        if params.layers().len() != self.layers.len() {
            return Err(PruneError::LayerMismatch(format!(
                "{} layers vs {} budgets",
                params.layers().len(),
                self.layers.len()
            )));
        }
        for (p, b) in params.layers().iter().zip(&self.layers) {
            if p.id != b.id || p.weight.len() != b.size {
                return Err(PruneError::LayerMismatch(p.id.clone()));
            }
        }
        Ok(())
    }
}

/// Per-layer retention mask; `true` marks a weight that may be non-zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    layers: Vec<(String, Vec<bool>)>,
}

impl PruneMask {
    /// Retain exactly the currently non-zero weights.
    pub fn from_nonzeros(params: &ParameterSet) -> Self {
        Self {
            layers: params
                .layers()
                .iter()
                .map(|l| (l.id.clone(), l.weight.data().iter().map(|v| *v != 0.0).collect()))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[(String, Vec<bool>)] {
        &self.layers
    }

    pub fn retained(&self) -> usize {
        self.layers.iter().map(|(_, m)| m.iter().filter(|k| **k).count()).sum()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(|(_, m)| m.len()).sum()
    }

    pub fn compression_rate(&self) -> f64 {
        self.total() as f64 / self.retained() as f64
    }

    /// Zero masked-out weight entries (used on parameters, gradients and
    /// optimizer state alike). Biases are untouched.
    pub fn apply(&self, params: &mut ParameterSet) {
        for (layer, (_, mask)) in params.layers_mut().iter_mut().zip(&self.layers) {
            for (v, keep) in layer.weight.data_mut().iter_mut().zip(mask) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
    }

    /// True when every masked-out weight of `params` is exactly zero.
    pub fn conforms(&self, params: &ParameterSet) -> bool {
        params
            .layers()
            .iter()
            .zip(&self.layers)
            .all(|(l, (_, mask))| l.weight.data().iter().zip(mask).all(|(v, k)| *k || *v == 0.0))
    }
}

/// Weights / non-zero weights of a parameter set (biases excluded).
pub fn compression_rate(params: &ParameterSet) -> f64 {
    params.num_weights() as f64 / params.nonzero_weights() as f64
}

/// Project every constrained layer onto its budget and record the survivors.
pub fn final_hard_prune(
    params: &ParameterSet,
    cfg: &SparsityConfig,
) -> Result<(ParameterSet, PruneMask), PruneError> {
    let pruned = project_layers(params, cfg)?;
    let mask = PruneMask {
        layers: pruned
            .layers()
            .iter()
            .zip(cfg.layers())
            .map(|(l, b)| {
                let mut keep: Vec<bool> = l.weight.data().iter().map(|v| *v != 0.0).collect();
                // A retained weight that happens to be exactly zero still owns its slot.
                let mut missing = b.keep.saturating_sub(keep.iter().filter(|k| **k).count());
                if b.constrained && missing > 0 {
                    for k in keep.iter_mut() {
                        if missing == 0 {
                            break;
                        }
                        if !*k {
                            *k = true;
                            missing -= 1;
                        }
                    }
                } else if !b.constrained {
                    keep.fill(true);
                }
                (l.id.clone(), keep)
            })
            .collect(),
    };
    Ok((pruned, mask))
}

/// Masked-pruning baseline: top-`n_i` magnitude projection of an outgoing
/// client update, computed independently by every client in every round.
pub fn magnitude_mask_update(
    update: &ParameterSet,
    cfg: &SparsityConfig,
) -> Result<ParameterSet, PruneError> {
    project_layers(update, cfg)
}

fn project_layers(params: &ParameterSet, cfg: &SparsityConfig) -> Result<ParameterSet, PruneError> {
    cfg.check_params(params)?;
    let mut out = params.clone();
    for (layer, budget) in out.layers_mut().iter_mut().zip(cfg.layers()) {
        if budget.constrained {
            project_in_place(layer.weight.data_mut(), budget.keep)?;
        }
    }
    Ok(out)
}

/// Auxiliary and scaled dual variables of one constrained layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmLayer {
    pub id: String,
    pub keep: usize,
    pub z: Tensor,
    pub u: Tensor,
}

/// ADMM iterate for all constrained layers of one client.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    layers: Vec<AdmmLayer>,
    rho: f64,
    step: u64,
}

impl AdmmState {
    pub fn layers(&self) -> &[AdmmLayer] {
        &self.layers
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Sum over constrained layers of `||W_i - Z_i||²_F`.
    pub fn primal_residual_sq(&self, params: &ParameterSet) -> f64 {
        self.layers.iter().filter_map(|l| params.layer(&l.id).map(|p| p.weight.squared_distance(&l.z))).sum()
    }
}

/// `Z_i = project(W_i, n_i)`, `U_i = 0`, step 0.
pub fn admm_init(params: &ParameterSet, cfg: &SparsityConfig, rho: f64) -> Result<AdmmState, PruneError> {
    if !(rho.is_finite() && rho > 0.0) {
        return Err(PruneError::Rho(rho));
    }
    cfg.check_params(params)?;
    let layers = params
        .layers()
        .iter()
        .zip(cfg.layers())
        .filter(|(_, b)| b.constrained)
        .map(|(p, b)| {
            Ok(AdmmLayer {
                id: p.id.clone(),
                keep: b.keep,
                z: euclidean_project(&p.weight, b.keep)?,
                u: Tensor::zeros(p.weight.shape()),
            })
        })
        .collect::<Result<_, PruneError>>()?;
    Ok(AdmmState { layers, rho, step: 0 })
}

/// Gradient of the augmented term, `rho * (W_i - Z_i + U_i)` on constrained
/// weights and zero everywhere else.
pub fn admm_reg_gradient(params: &ParameterSet, state: &AdmmState) -> Result<Gradient, PruneError> {
    let mut grad = params.zeros_like();
    accumulate_reg_gradient(params, state, &mut grad)?;
    Ok(grad)
}

/// Add `rho * (W - Z + U)` into an existing gradient.
pub fn accumulate_reg_gradient(
    params: &ParameterSet,
    state: &AdmmState,
    grad: &mut Gradient,
) -> Result<(), PruneError> {
    for layer in &state.layers {
        let w = params.layer(&layer.id).ok_or_else(|| PruneError::UnknownLayer(layer.id.clone()))?;
        if w.weight.shape() != layer.z.shape() {
            return Err(PruneError::LayerMismatch(layer.id.clone()));
        }
        let g = grad
            .layers_mut()
            .iter_mut()
            .find(|g| g.id == layer.id)
            .ok_or_else(|| PruneError::UnknownLayer(layer.id.clone()))?;
        for (((gv, wv), zv), uv) in
            g.weight.data_mut().iter_mut().zip(w.weight.data()).zip(layer.z.data()).zip(layer.u.data())
        {
            *gv += state.rho * (wv - zv + uv);
        }
    }
    Ok(())
}

/// `Z_i <- project(W_i + U_i, n_i)`.
pub fn admm_z_step(params: &ParameterSet, state: &AdmmState) -> Result<AdmmState, PruneError> {
    let mut next = state.clone();
    for layer in &mut next.layers {
        let w = params.layer(&layer.id).ok_or_else(|| PruneError::UnknownLayer(layer.id.clone()))?;
        let mut v: Vec<f64> = w.weight.data().iter().zip(layer.u.data()).map(|(a, b)| a + b).collect();
        project_in_place(&mut v, layer.keep)?;
        layer.z.data_mut().copy_from_slice(&v);
    }
    Ok(next)
}

/// `U_i <- U_i + W_i - Z_i` and advance the step counter.
pub fn admm_u_step(params: &ParameterSet, state: &AdmmState) -> Result<AdmmState, PruneError> {
    let mut next = state.clone();
    for layer in &mut next.layers {
        let w = params.layer(&layer.id).ok_or_else(|| PruneError::UnknownLayer(layer.id.clone()))?;
        for ((u, wv), zv) in layer.u.data_mut().iter_mut().zip(w.weight.data()).zip(layer.z.data()) {
            *u += wv - zv;
        }
    }
    next.step += 1;
    Ok(next)
}
