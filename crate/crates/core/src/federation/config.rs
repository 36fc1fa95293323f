use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use ini::Ini;
use thiserror::Error;

use crate::model::{Layer, ModelArch};
use crate::pruning::DEFAULT_RHO;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("unknown section [{0}]")]
    UnknownSection(String),
    #[error("unknown key `{key}` in [{section}]")]
    UnknownKey { section: String, key: String },
    #[error("key `{key}` appears twice in [{section}]")]
    DuplicateKey { section: String, key: String },
    #[error("[{section}] {key} = {value}: {reason}")]
    BadValue { section: String, key: String, value: String, reason: String },
    #[error("invalid experiment: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArchKind {
    Lenet5,
    SmallConvnet,
    Mlp(Vec<usize>),
}

impl ArchKind {
    pub fn build(&self, input_shape: &[usize], num_classes: usize) -> ModelArch {
        match self {
            ArchKind::Lenet5 => ModelArch::lenet5(),
            ArchKind::SmallConvnet => ModelArch::small_convnet(input_shape[0], input_shape[1], num_classes),
            ArchKind::Mlp(widths) => {
                let mut arch = ModelArch::mlp(widths);
                if input_shape.len() > 1 {
                    arch.input_shape = input_shape.to_vec();
                    arch.layers.insert(0, Layer::Flatten);
                }
                arch
            }
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchKind::Lenet5 => f.write_str("lenet5"),
            ArchKind::SmallConvnet => f.write_str("small-convnet"),
            ArchKind::Mlp(w) => {
                let parts: Vec<String> = w.iter().map(|x| x.to_string()).collect();
                write!(f, "mlp:{}", parts.join("-"))
            }
        }
    }
}

impl FromStr for ArchKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lenet5" => Ok(ArchKind::Lenet5),
            "small-convnet" => Ok(ArchKind::SmallConvnet),
            _ => {
                let widths =
                    s.strip_prefix("mlp:").ok_or("expected lenet5, small-convnet or mlp:W1-W2-...")?;
                let widths = widths
                    .split('-')
                    .map(|w| w.parse::<usize>().map_err(|e| e.to_string()))
                    .collect::<Result<Vec<_>, _>>()?;
                if widths.len() < 2 || widths.contains(&0) {
                    return Err("an mlp needs at least two positive widths".into());
                }
                Ok(ArchKind::Mlp(widths))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    /// Class-conditional Gaussian images shaped like CIFAR-10.
    SyntheticCifar,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::SyntheticCifar => "synthetic-cifar",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            "synthetic-cifar" => Ok(DatasetKind::SyntheticCifar),
            _ => Err("expected mnist, cifar10 or synthetic-cifar".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionKind {
    Iid,
    NonIid { shard_size: usize, shards_per_client: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Admm,
    Masked,
    Dense,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Admm => "admm",
            Mode::Masked => "masked",
            Mode::Dense => "dense",
        })
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "admm" => Ok(Mode::Admm),
            "masked" => Ok(Mode::Masked),
            "dense" => Ok(Mode::Dense),
            _ => Err("expected admm, masked or dense".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub arch: ArchKind,
    pub dataset: DatasetKind,
    pub partition: PartitionKind,
    /// Cap on training examples; `None` uses the whole split.
    pub train_examples: Option<usize>,
    pub test_examples: Option<usize>,
    /// Test examples scored every round; the last round scores the full test set.
    pub eval_examples: usize,
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub warmup_rounds: usize,
    pub pruning_rounds: usize,
    pub mode: Mode,
    pub seed: u64,
    pub uplink_mbps: f64,
    pub downlink_mbps: f64,
    pub keep_fractions: BTreeMap<String, f64>,
    pub rho: f64,
    pub stages: usize,
    /// Trailing pruning-phase rounds trained under the final fixed mask.
    pub finetune_rounds: usize,
    pub trusted_buffer_bytes: usize,
}

/// Keep fractions giving LeNet-5 10.01% non-zero weights.
pub fn lenet5_keep_cr10() -> BTreeMap<String, f64> {
    [("conv1", 1.0), ("conv2", 0.3), ("fc1", 0.0852325), ("fc2", 0.2)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

/// Keep fractions giving LeNet-5 1.15% non-zero weights.
pub fn lenet5_keep_cr87() -> BTreeMap<String, f64> {
    [("conv1", 0.6), ("conv2", 0.06), ("fc1", 0.0066275), ("fc2", 0.1)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            arch: ArchKind::Lenet5,
            dataset: DatasetKind::Mnist,
            partition: PartitionKind::Iid,
            train_examples: None,
            test_examples: None,
            eval_examples: 2000,
            num_clients: 100,
            clients_per_round: 10,
            local_epochs: 5,
            batch_size: 10,
            lr: 0.01,
            momentum: 0.9,
            warmup_rounds: 10,
            pruning_rounds: 50,
            mode: Mode::Admm,
            seed: 1,
            uplink_mbps: 20.0,
            downlink_mbps: 100.0,
            keep_fractions: lenet5_keep_cr10(),
            rho: DEFAULT_RHO,
            stages: 4,
            finetune_rounds: 30,
            trusted_buffer_bytes: crate::enclave::DEFAULT_TRUSTED_BUFFER,
        }
    }
}

fn bad(section: &str, key: &str, value: &str, reason: impl ToString) -> ConfigError {
    ConfigError::BadValue {
        section: section.into(),
        key: key.into(),
        value: value.into(),
        reason: reason.to_string(),
    }
}

fn parse<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: ToString,
{
    value.parse().map_err(|e: T::Err| bad(section, key, value, e))
}

fn parse_limit(section: &str, key: &str, value: &str) -> Result<Option<usize>, ConfigError> {
    if value == "all" {
        Ok(None)
    } else {
        parse(section, key, value).map(Some)
    }
}

impl ExperimentConfig {
    pub fn from_ini_str(text: &str) -> Result<Self, ConfigError> {
        let ini = Ini::load_from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let mut cfg = Self::default();
        let mut partition = "iid".to_string();
        let mut shard_size = 300usize;
        let mut shards_per_client = 2usize;
        let mut fractions_given = false;
        for (section, props) in ini.iter() {
            let section = match section {
                None if props.is_empty() => continue,
                None => return Err(ConfigError::Syntax("keys outside any section".into())),
                Some(s) => s,
            };
            let mut seen = BTreeSet::new();
            for (key, value) in props.iter() {
                if !seen.insert(key) {
                    return Err(ConfigError::DuplicateKey { section: section.into(), key: key.into() });
                }
                let unknown = || ConfigError::UnknownKey { section: section.into(), key: key.into() };
                let value = value.trim();
                match section {
                    "model" => match key {
                        "arch" => cfg.arch = parse(section, key, value)?,
                        _ => return Err(unknown()),
                    },
                    "data" => match key {
                        "dataset" => cfg.dataset = parse(section, key, value)?,
                        "partition" => partition = value.to_string(),
                        "shard_size" => shard_size = parse(section, key, value)?,
                        "shards_per_client" => shards_per_client = parse(section, key, value)?,
                        "train_examples" => cfg.train_examples = parse_limit(section, key, value)?,
                        "test_examples" => cfg.test_examples = parse_limit(section, key, value)?,
                        "eval_examples" => cfg.eval_examples = parse(section, key, value)?,
                        _ => return Err(unknown()),
                    },
                    "federation" => match key {
                        "num_clients" => cfg.num_clients = parse(section, key, value)?,
                        "clients_per_round" => cfg.clients_per_round = parse(section, key, value)?,
                        "local_epochs" => cfg.local_epochs = parse(section, key, value)?,
                        "batch_size" => cfg.batch_size = parse(section, key, value)?,
                        "lr" => cfg.lr = parse(section, key, value)?,
                        "momentum" => cfg.momentum = parse(section, key, value)?,
                        "warmup_rounds" => cfg.warmup_rounds = parse(section, key, value)?,
                        "pruning_rounds" => cfg.pruning_rounds = parse(section, key, value)?,
                        "mode" => cfg.mode = parse(section, key, value)?,
                        "seed" => cfg.seed = parse(section, key, value)?,
                        "uplink_mbps" => cfg.uplink_mbps = parse(section, key, value)?,
                        "downlink_mbps" => cfg.downlink_mbps = parse(section, key, value)?,
                        _ => return Err(unknown()),
                    },
                    "pruning" => match key {
                        "rho" => cfg.rho = parse(section, key, value)?,
                        "stages" => cfg.stages = parse(section, key, value)?,
                        "finetune_rounds" => cfg.finetune_rounds = parse(section, key, value)?,
                        layer => {
                            if !fractions_given {
                                cfg.keep_fractions.clear();
                                fractions_given = true;
                            }
                            cfg.keep_fractions.insert(layer.to_string(), parse(section, key, value)?);
                        }
                    },
                    "crypto" => match key {
                        "trusted_buffer_bytes" => cfg.trusted_buffer_bytes = parse(section, key, value)?,
                        _ => return Err(unknown()),
                    },
                    other => return Err(ConfigError::UnknownSection(other.into())),
                }
            }
        }
        if !fractions_given && cfg.arch != ArchKind::Lenet5 {
            cfg.keep_fractions.clear();
        }
        cfg.partition = match partition.as_str() {
            "iid" => PartitionKind::Iid,
            "noniid" => PartitionKind::NonIid { shard_size, shards_per_client },
            other => return Err(bad("data", "partition", other, "expected iid or noniid")),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn total_rounds(&self) -> usize {
        self.warmup_rounds + self.pruning_rounds
    }

    /// Pruning-phase rounds spent in the staged ramp before the fine-tune tail.
    pub fn ramp_rounds(&self) -> usize {
        self.pruning_rounds - self.finetune_rounds.min(self.pruning_rounds)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.num_clients == 0 {
            return invalid("num_clients must be at least 1".into());
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.num_clients {
            return invalid(format!(
                "clients_per_round = {} must lie in 1..={}",
                self.clients_per_round, self.num_clients
            ));
        }
        if self.total_rounds() == 0 {
            return invalid("the experiment needs at least one round".into());
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return invalid(format!("lr = {} must be finite and non-negative", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid(format!("momentum = {} must lie in [0, 1)", self.momentum));
        }
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return invalid(format!("rho = {} must be positive", self.rho));
        }
        if ![self.uplink_mbps, self.downlink_mbps].iter().all(|r| r.is_finite() && *r > 0.0) {
            return invalid("link rates must be positive".into());
        }
        if self.eval_examples == 0 {
            return invalid("eval_examples must be at least 1".into());
        }
        for (layer, f) in &self.keep_fractions {
            if !(*f > 0.0 && *f <= 1.0) {
                return invalid(format!("keep fraction {f} for {layer} must lie in (0, 1]"));
            }
        }
        if self.mode != Mode::Dense && self.pruning_rounds > 0 {
            if self.stages == 0 {
                return invalid("stages must be at least 1".into());
            }
            if self.finetune_rounds >= self.pruning_rounds {
                return invalid(format!(
                    "finetune_rounds = {} leaves no ramp rounds out of {}",
                    self.finetune_rounds, self.pruning_rounds
                ));
            }
        }
        if let PartitionKind::NonIid { shard_size, shards_per_client } = self.partition {
            if shard_size == 0 || shards_per_client == 0 {
                return invalid("shard_size and shards_per_client must be positive".into());
            }
        }
        Ok(())
    }

    /// Change the round budget, keeping warm-up first and shrinking the
    /// fine-tune tail so at least one ramp round remains.
    pub fn set_total_rounds(&mut self, rounds: usize) {
        self.warmup_rounds = self.warmup_rounds.min(rounds);
        self.pruning_rounds = rounds - self.warmup_rounds;
        self.finetune_rounds = self.finetune_rounds.min(self.pruning_rounds.saturating_sub(1));
    }

    pub fn to_ini_string(&self) -> String {
        let mut s = String::new();
        let (partition, shard_size, spc) = match self.partition {
            PartitionKind::Iid => ("iid", None, None),
            PartitionKind::NonIid { shard_size, shards_per_client } => {
                ("noniid", Some(shard_size), Some(shards_per_client))
            }
        };
        let limit = |v: Option<usize>| v.map_or("all".to_string(), |n| n.to_string());
        let _ = writeln!(s, "[model]\narch = {}\n", self.arch);
        let _ = writeln!(s, "[data]\ndataset = {}\npartition = {partition}", self.dataset);
        if let (Some(a), Some(b)) = (shard_size, spc) {
            let _ = writeln!(s, "shard_size = {a}\nshards_per_client = {b}");
        }
        let _ = writeln!(
            s,
            "train_examples = {}\ntest_examples = {}\neval_examples = {}\n",
            limit(self.train_examples),
            limit(self.test_examples),
            self.eval_examples
        );
        let _ = writeln!(
            s,
            "[federation]\nnum_clients = {}\nclients_per_round = {}\nlocal_epochs = {}\nbatch_size = {}\nlr = {}\nmomentum = {}\nwarmup_rounds = {}\npruning_rounds = {}\nmode = {}\nseed = {}\nuplink_mbps = {}\ndownlink_mbps = {}\n",
            self.num_clients,
            self.clients_per_round,
            self.local_epochs,
            self.batch_size,
            self.lr,
            self.momentum,
            self.warmup_rounds,
            self.pruning_rounds,
            self.mode,
            self.seed,
            self.uplink_mbps,
            self.downlink_mbps
        );
        let _ = writeln!(
            s,
            "[pruning]\nrho = {}\nstages = {}\nfinetune_rounds = {}",
            self.rho, self.stages, self.finetune_rounds
        );
        for (layer, f) in &self.keep_fractions {
            let _ = writeln!(s, "{layer} = {f}");
        }
        let _ = writeln!(s, "\n[crypto]\ntrusted_buffer_bytes = {}", self.trusted_buffer_bytes);
        s
    }
}
