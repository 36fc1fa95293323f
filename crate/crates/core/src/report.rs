//! `rounds.csv` and `summary.txt` for one experiment, plus the check that
//! the summary can be rebuilt from the rows.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::codec::saving_percent;
use crate::federation::{ExperimentConfig, RoundMetrics, RoundTimes};

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const CONFIG_FILE: &str = "config.ini";
pub const TRANSCRIPT_FILE: &str = "transcript.log";

pub const COLUMNS: [&str; 23] = [
    "round",
    "phase",
    "stage",
    "accuracy",
    "eval_examples",
    "keep_fraction",
    "global_density",
    "clients",
    "rejected",
    "train_loss",
    "bytes_up",
    "bytes_down",
    "dense_bytes_up",
    "dense_bytes_down",
    "attestation_s",
    "provisioning_s",
    "transmission_s",
    "ecall_s",
    "ocall_s",
    "local_training_s",
    "aggregation_s",
    "total_s",
    "link_model_s",
];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no rounds to report")]
    Empty,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{file}: {reason}")]
    Parse { file: &'static str, reason: String },
    #[error("summary field `{field}` is {reported} but the rows give {derived}")]
    Inconsistent { field: &'static str, reported: String, derived: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rounds: usize,
    pub final_accuracy: f64,
    pub compression_rate: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub pruning_phase_bytes: u64,
    pub pruning_phase_dense_bytes: u64,
    pub saving_percent: f64,
    pub total_time_s: f64,
    pub mean_round_s: f64,
    /// Mean dense-baseline round time over this run's mean round time.
    pub speedup_vs_dense: Option<f64>,
}

impl Summary {
    pub fn from_rows(rows: &[RoundMetrics], compression_rate: f64) -> Result<Self, ReportError> {
        let last = rows.last().ok_or(ReportError::Empty)?;
        let pruning: Vec<&RoundMetrics> = rows.iter().filter(|r| r.pruning_phase()).collect();
        let sparse: u64 = pruning.iter().map(|r| r.bytes_up + r.bytes_down).sum();
        let dense: u64 = pruning.iter().map(|r| r.dense_bytes_up + r.dense_bytes_down).sum();
        let total_time_s: f64 = rows.iter().map(|r| r.times.total).sum();
        Ok(Self {
            rounds: rows.len(),
            final_accuracy: last.accuracy,
            compression_rate,
            bytes_up: rows.iter().map(|r| r.bytes_up).sum(),
            bytes_down: rows.iter().map(|r| r.bytes_down).sum(),
            pruning_phase_bytes: sparse,
            pruning_phase_dense_bytes: dense,
            saving_percent: saving_percent((sparse, dense)),
            total_time_s,
            mean_round_s: total_time_s / rows.len() as f64,
            speedup_vs_dense: None,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "rounds = {}", self.rounds);
        let _ = writeln!(s, "final_accuracy = {}", self.final_accuracy);
        let _ = writeln!(s, "compression_rate = {}", self.compression_rate);
        let _ = writeln!(s, "bytes_up = {}", self.bytes_up);
        let _ = writeln!(s, "bytes_down = {}", self.bytes_down);
        let _ = writeln!(s, "pruning_phase_bytes = {}", self.pruning_phase_bytes);
        let _ = writeln!(s, "pruning_phase_dense_bytes = {}", self.pruning_phase_dense_bytes);
        let _ = writeln!(s, "saving_percent = {}", self.saving_percent);
        let _ = writeln!(s, "total_time_s = {}", self.total_time_s);
        let _ = writeln!(s, "mean_round_s = {}", self.mean_round_s);
        match self.speedup_vs_dense {
            Some(x) => writeln!(s, "speedup_vs_dense = {x}"),
            None => writeln!(s, "speedup_vs_dense = n/a"),
        }
        .ok();
        s
    }

    pub fn from_text(text: &str) -> Result<Self, ReportError> {
        let mut map = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| ReportError::Parse {
                file: SUMMARY_FILE,
                reason: format!("line without `=`: {line}"),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        fn get<T: FromStr>(
            map: &std::collections::HashMap<String, String>,
            key: &str,
        ) -> Result<T, ReportError> {
            map.get(key).and_then(|v| v.parse().ok()).ok_or_else(|| ReportError::Parse {
                file: SUMMARY_FILE,
                reason: format!("missing or malformed `{key}`"),
            })
        }
        Ok(Self {
            rounds: get(&map, "rounds")?,
            final_accuracy: get(&map, "final_accuracy")?,
            compression_rate: get(&map, "compression_rate")?,
            bytes_up: get(&map, "bytes_up")?,
            bytes_down: get(&map, "bytes_down")?,
            pruning_phase_bytes: get(&map, "pruning_phase_bytes")?,
            pruning_phase_dense_bytes: get(&map, "pruning_phase_dense_bytes")?,
            saving_percent: get(&map, "saving_percent")?,
            total_time_s: get(&map, "total_time_s")?,
            mean_round_s: get(&map, "mean_round_s")?,
            speedup_vs_dense: map.get("speedup_vs_dense").and_then(|v| v.parse().ok()),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub rows: Vec<RoundMetrics>,
    pub summary: Summary,
}

impl ExperimentReport {
    pub fn new(
        config: ExperimentConfig,
        rows: Vec<RoundMetrics>,
        compression_rate: f64,
    ) -> Result<Self, ReportError> {
        let summary = Summary::from_rows(&rows, compression_rate)?;
        Ok(Self { config, rows, summary })
    }

    pub fn set_dense_baseline(&mut self, dense: &ExperimentReport) {
        self.summary.speedup_vs_dense = Some(dense.summary.mean_round_s / self.summary.mean_round_s);
    }

    /// Rebuild the summary from the rows and compare field by field.
    pub fn verify(&self) -> Result<(), ReportError> {
        let derived = Summary::from_rows(&self.rows, self.summary.compression_rate)?;
        let s = &self.summary;
        let check = |field: &'static str, reported: String, derived: String| {
            if reported == derived {
                Ok(())
            } else {
                Err(ReportError::Inconsistent { field, reported, derived })
            }
        };
        check("rounds", s.rounds.to_string(), derived.rounds.to_string())?;
        check("final_accuracy", s.final_accuracy.to_string(), derived.final_accuracy.to_string())?;
        check("bytes_up", s.bytes_up.to_string(), derived.bytes_up.to_string())?;
        check("bytes_down", s.bytes_down.to_string(), derived.bytes_down.to_string())?;
        check(
            "pruning_phase_bytes",
            s.pruning_phase_bytes.to_string(),
            derived.pruning_phase_bytes.to_string(),
        )?;
        check(
            "pruning_phase_dense_bytes",
            s.pruning_phase_dense_bytes.to_string(),
            derived.pruning_phase_dense_bytes.to_string(),
        )?;
        check("saving_percent", s.saving_percent.to_string(), derived.saving_percent.to_string())?;
        check("total_time_s", s.total_time_s.to_string(), derived.total_time_s.to_string())?;
        check("mean_round_s", s.mean_round_s.to_string(), derived.mean_round_s.to_string())?;
        let density = self.rows.last().map_or(1.0, |r| r.global_density);
        if (s.compression_rate * density - 1.0).abs() > 1e-9 {
            return Err(ReportError::Inconsistent {
                field: "compression_rate",
                reported: s.compression_rate.to_string(),
                derived: (1.0 / density).to_string(),
            });
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<(), ReportError> {
        write_report(&self.rows, &self.config, &self.summary, dir)
    }

    pub fn read(dir: &Path) -> Result<Self, ReportError> {
        let config_text = read(&dir.join(CONFIG_FILE))?;
        let config = ExperimentConfig::from_ini_str(&config_text)
            .map_err(|e| ReportError::Parse { file: CONFIG_FILE, reason: e.to_string() })?;
        let rows = read_rounds(&dir.join(ROUNDS_FILE))?;
        let summary = Summary::from_text(&read(&dir.join(SUMMARY_FILE))?)?;
        Ok(Self { config, rows, summary })
    }
}

fn read(path: &Path) -> Result<String, ReportError> {
    fs::read_to_string(path).map_err(|source| ReportError::Io { path: path.to_path_buf(), source })
}

fn write(path: &Path, text: &str) -> Result<(), ReportError> {
    fs::write(path, text).map_err(|source| ReportError::Io { path: path.to_path_buf(), source })
}

fn row_fields(r: &RoundMetrics) -> [String; 23] {
    let t = &r.times;
    [
        r.round.to_string(),
        r.phase.to_string(),
        r.stage.to_string(),
        r.accuracy.to_string(),
        r.eval_examples.to_string(),
        r.keep_fraction.to_string(),
        r.global_density.to_string(),
        r.clients.to_string(),
        r.rejected.to_string(),
        r.train_loss.to_string(),
        r.bytes_up.to_string(),
        r.bytes_down.to_string(),
        r.dense_bytes_up.to_string(),
        r.dense_bytes_down.to_string(),
        t.attestation.to_string(),
        t.provisioning.to_string(),
        t.transmission.to_string(),
        t.ecall.to_string(),
        t.ocall.to_string(),
        t.local_training.to_string(),
        t.aggregation.to_string(),
        t.total.to_string(),
        t.link_model.to_string(),
    ]
}

pub fn rounds_csv(rows: &[RoundMetrics]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COLUMNS)?;
    for r in rows {
        w.write_record(row_fields(r))?;
    }
    let bytes =
        w.into_inner().map_err(|e| ReportError::Parse { file: ROUNDS_FILE, reason: e.to_string() })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_rounds_csv(text: &str) -> Result<Vec<RoundMetrics>, ReportError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != COLUMNS {
        return Err(ReportError::Parse {
            file: ROUNDS_FILE,
            reason: format!("unexpected header {header:?}"),
        });
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let field = |i: usize| -> Result<&str, ReportError> {
            record.get(i).ok_or_else(|| ReportError::Parse {
                file: ROUNDS_FILE,
                reason: format!("row too short for `{}`", COLUMNS[i]),
            })
        };
        fn num<T: FromStr>(s: &str, col: &str) -> Result<T, ReportError> {
            s.parse().map_err(|_| ReportError::Parse {
                file: ROUNDS_FILE,
                reason: format!("bad `{col}` value `{s}`"),
            })
        }
        let f = |i: usize| -> Result<f64, ReportError> { num(field(i)?, COLUMNS[i]) };
        let u = |i: usize| -> Result<u64, ReportError> { num(field(i)?, COLUMNS[i]) };
        rows.push(RoundMetrics {
            round: u(0)? as usize,
            phase: field(1)?.parse().map_err(|reason| ReportError::Parse { file: ROUNDS_FILE, reason })?,
            stage: u(2)? as usize,
            accuracy: f(3)?,
            eval_examples: u(4)? as usize,
            keep_fraction: f(5)?,
            global_density: f(6)?,
            clients: u(7)? as usize,
            rejected: u(8)? as usize,
            train_loss: f(9)?,
            bytes_up: u(10)?,
            bytes_down: u(11)?,
            dense_bytes_up: u(12)?,
            dense_bytes_down: u(13)?,
            times: RoundTimes {
                attestation: f(14)?,
                provisioning: f(15)?,
                transmission: f(16)?,
                ecall: f(17)?,
                ocall: f(18)?,
                local_training: f(19)?,
                aggregation: f(20)?,
                total: f(21)?,
                link_model: f(22)?,
            },
        });
    }
    Ok(rows)
}

fn read_rounds(path: &Path) -> Result<Vec<RoundMetrics>, ReportError> {
    parse_rounds_csv(&read(path)?)
}

/// Write `rounds.csv`, `summary.txt` and a config snapshot into `dir`.
pub fn write_report(
    rows: &[RoundMetrics],
    cfg: &ExperimentConfig,
    summary: &Summary,
    dir: &Path,
) -> Result<(), ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty);
    }
    fs::create_dir_all(dir).map_err(|source| ReportError::Io { path: dir.to_path_buf(), source })?;
    write(&dir.join(ROUNDS_FILE), &rounds_csv(rows)?)?;
    write(&dir.join(SUMMARY_FILE), &summary.to_text())?;
    write(&dir.join(CONFIG_FILE), &cfg.to_ini_string())?;
    Ok(())
}

pub fn write_transcript(text: &str, dir: &Path) -> Result<(), ReportError> {
    write(&dir.join(TRANSCRIPT_FILE), text)
}
