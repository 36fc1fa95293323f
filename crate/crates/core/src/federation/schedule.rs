use std::fmt;

use super::config::{ExperimentConfig, Mode};
use crate::pruning::SparsityConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Warmup,
    AdmmPrune,
    MaskedFinetune,
    MaskedPrune,
    Dense,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Warmup => "warmup",
            Phase::AdmmPrune => "admm_prune",
            Phase::MaskedFinetune => "masked_finetune",
            Phase::MaskedPrune => "masked_prune",
            Phase::Dense => "dense",
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "warmup" => Ok(Phase::Warmup),
            "admm_prune" => Ok(Phase::AdmmPrune),
            "masked_finetune" => Ok(Phase::MaskedFinetune),
            "masked_prune" => Ok(Phase::MaskedPrune),
            "dense" => Ok(Phase::Dense),
            other => Err(format!("unknown phase `{other}`")),
        }
    }
}

/// Round layout: `warmup` dense rounds, then `ramp` rounds split into
/// `stages` stages of a geometric keep-fraction ramp, then a tail at the
/// final budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub mode: Mode,
    pub warmup: usize,
    pub pruning: usize,
    pub ramp: usize,
    pub stages: usize,
}

impl Schedule {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            mode: cfg.mode,
            warmup: cfg.warmup_rounds,
            pruning: cfg.pruning_rounds,
            ramp: cfg.ramp_rounds(),
            stages: cfg.stages.max(1),
        }
    }

    pub fn total(&self) -> usize {
        self.warmup + self.pruning
    }

    pub fn in_pruning_phase(&self, round: usize) -> bool {
        round >= self.warmup
    }

    pub fn phase(&self, round: usize) -> Phase {
        if round < self.warmup {
            return Phase::Warmup;
        }
        match self.mode {
            Mode::Dense => Phase::Dense,
            Mode::Masked => Phase::MaskedPrune,
            Mode::Admm if round - self.warmup < self.ramp => Phase::AdmmPrune,
            Mode::Admm => Phase::MaskedFinetune,
        }
    }

    /// Ramp stage (1-based) of a round, `stages` in the tail, `None` in
    /// warm-up or dense rounds.
    pub fn stage(&self, round: usize) -> Option<usize> {
        if round < self.warmup || self.mode == Mode::Dense {
            return None;
        }
        let p = round - self.warmup;
        if p >= self.ramp {
            return Some(self.stages);
        }
        Some(((p + 1) * self.stages).div_ceil(self.ramp))
    }

    /// True for the last ramp round of a stage.
    pub fn stage_ends(&self, round: usize) -> bool {
        match self.stage(round) {
            Some(s) if round - self.warmup < self.ramp => {
                round + 1 - self.warmup == self.ramp || self.stage(round + 1) != Some(s)
            }
            _ => false,
        }
    }

    pub fn budget(&self, round: usize, target: &SparsityConfig) -> Option<SparsityConfig> {
        self.stage(round).map(|s| target.ramp_stage(s, self.stages))
    }
}
