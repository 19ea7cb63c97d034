//! Run manifests and replay of archived runs.

mod replay;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::document::ProblemDocument;
use crate::problem::Configuration;
use crate::sampling::SamplerSpec;
use crate::search::{AcquisitionSpec, Phase, StopReason};
use crate::surrogate::EnsembleParams;

pub use replay::{replay, replay_with, Mismatch, ReplayOptions, ReplayReport};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest";
pub const DIGEST_FILE: &str = "manifest.sha256";
pub const TRIALS_CSV: &str = "trials.csv";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
    #[error("manifest: {0}")]
    Format(#[from] serde_json::Error),
    #[error("manifest schema version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("no manifest in {0}")]
    Missing(String),
    #[error("trial directory {0} is missing")]
    MissingTrial(String),
    #[error("replay: {0}")]
    Replay(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ArchiveError + '_ {
    move |e| ArchiveError::Io(path.display().to_string(), e)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialOutcome {
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tool {
    pub name: String,
    pub version: String,
}

impl Default for Tool {
    fn default() -> Self {
        Self {
            name: "contune".into(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

/// How the algorithm proposes points, spelled out for readers of the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmRecord {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub surrogate: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acquisition: Option<AcquisitionSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub run: u64,
    pub sampler: u64,
    /// How per-run seeds of each trial were obtained.
    pub trial_rule: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub initial: usize,
    pub guided: usize,
    pub failed: usize,
    pub total: usize,
}

/// One told trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub id: u64,
    pub configuration: Configuration,
    pub phase: Phase,
    pub status: TrialOutcome,
    #[serde(with = "num::option")]
    pub objective: Option<f64>,
    /// Value the optimizer used, a penalty for failures.
    #[serde(with = "num::plain")]
    pub loss: f64,
    #[serde(with = "num::map")]
    pub metrics: BTreeMap<String, f64>,
    pub seeds: Vec<u64>,
    /// Tells completed before this trial was asked.
    pub asked_after: usize,
    /// Position of this trial in tell order.
    pub completion_order: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub id: u64,
    pub configuration: Configuration,
    pub objective: f64,
}

/// The baseline evaluated with the same executor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub configuration: Configuration,
    pub seeds: Vec<u64>,
    #[serde(with = "num::map")]
    pub metrics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<String>,
}

/// Everything needed to understand and reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool: Tool,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<StopReason>,
    /// The problem document with every search default filled in.
    pub document: ProblemDocument,
    pub sampler: SamplerSpec,
    pub algorithm: AlgorithmRecord,
    pub seeds: Seeds,
    pub counts: Counts,
    /// Trials in id order.
    pub ledger: Vec<LedgerEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best: Option<BestRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceRecord>,
}

impl RunManifest {
    /// Canonical text: fixed field order, sorted maps, shortest round-trip
    /// numbers, two-space indentation and a trailing newline.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, ArchiveError> {
        #[derive(Deserialize)]
        struct Header {
            schema_version: u32,
        }
        let header: Header = serde_json::from_str(text)?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(ArchiveError::Version {
                found: header.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        Ok(serde_json::from_str(text)?)
    }

    /// Checks dense ids and that `best` is the ledger optimum.
    pub fn check(&self) -> Result<(), String> {
        for (i, e) in self.ledger.iter().enumerate() {
            if e.id != i as u64 {
                return Err(format!("ledger row {i} has id {}", e.id));
            }
        }
        let direction = self.document.objective.direction;
        let optimum = self
            .ledger
            .iter()
            .filter(|e| e.status == TrialOutcome::Done)
            .filter_map(|e| e.objective)
            .fold(None::<f64>, |acc, v| match acc {
                Some(b) if !direction.better(v, b) => Some(b),
                _ => Some(v),
            });
        let best = self.best.as_ref().map(|b| b.objective);
        if best == optimum {
            Ok(())
        } else {
            Err(format!("best {best:?} differs from ledger optimum {optimum:?}"))
        }
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_canonical_json().as_bytes())
    }

    /// Ledger as CSV with one column per variable and per metric.
    pub fn trials_csv(&self) -> String {
        let names: Vec<&str> = self
            .document
            .variables
            .variables()
            .iter()
            .map(|v| v.name.as_str())
            .collect();
        let mut metrics: Vec<&str> = self
            .ledger
            .iter()
            .flat_map(|e| e.metrics.keys().map(String::as_str))
            .collect();
        metrics.sort_unstable();
        metrics.dedup();
        let mut out = String::from("id,phase,status,completion_order,objective,loss");
        for n in names.iter().chain(&metrics) {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for e in &self.ledger {
            let phase = match e.phase {
                Phase::Initial => "initial",
                Phase::Guided => "guided",
            };
            let status = match e.status {
                TrialOutcome::Done => "done",
                TrialOutcome::Failed => "failed",
            };
            let objective = e.objective.map(|v| format!("{v:?}")).unwrap_or_default();
            let _ = write!(
                out,
                "{},{phase},{status},{},{objective},{:?}",
                e.id, e.completion_order, e.loss
            );
            for v in e.configuration.values() {
                let _ = write!(out, ",{v:?}");
            }
            for m in &metrics {
                let v = e.metrics.get(*m).map(|v| format!("{v:?}")).unwrap_or_default();
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Writes `manifest`, its digest file and `trials.csv` into `run_dir`.
pub fn write_manifest(manifest: &RunManifest, run_dir: &Path) -> Result<String, ArchiveError> {
    let text = manifest.to_canonical_json();
    let digest = sha256_hex(text.as_bytes());
    let path = run_dir.join(MANIFEST_FILE);
    std::fs::write(&path, &text).map_err(io_err(&path))?;
    let path = run_dir.join(DIGEST_FILE);
    std::fs::write(&path, format!("{digest}  {MANIFEST_FILE}\n")).map_err(io_err(&path))?;
    let path = run_dir.join(TRIALS_CSV);
    std::fs::write(&path, manifest.trials_csv()).map_err(io_err(&path))?;
    Ok(digest)
}

pub fn load_manifest(run_dir: &Path) -> Result<RunManifest, ArchiveError> {
    let path = run_dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(ArchiveError::Missing(run_dir.display().to_string()));
    }
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    RunManifest::from_json(&text)
}

/// JSON has no NaN or infinity; such values are written as strings.
pub(crate) mod num {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Num {
        F(f64),
        S(String),
    }

    fn to_num(v: f64) -> Num {
        if v.is_finite() {
            Num::F(v)
        } else {
            Num::S(format!("{v:?}"))
        }
    }

    fn from_num<E: serde::de::Error>(n: Num) -> Result<f64, E> {
        match n {
            Num::F(v) => Ok(v),
            Num::S(s) => s.parse().map_err(|_| E::custom(format!("`{s}` is not a number"))),
        }
    }

    pub mod plain {
        use super::*;

        pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
            to_num(*v).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
            from_num(Num::deserialize(d)?)
        }
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            v.map(to_num).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            Option::<Num>::deserialize(d)?.map(from_num).transpose()
        }
    }

    pub mod map {
        use std::collections::BTreeMap;

        use super::*;

        pub fn serialize<S: Serializer>(m: &BTreeMap<String, f64>, s: S) -> Result<S::Ok, S::Error> {
            let out: BTreeMap<&String, Num> = m.iter().map(|(k, v)| (k, to_num(*v))).collect();
            out.serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, f64>, D::Error> {
            BTreeMap::<String, Num>::deserialize(d)?
                .into_iter()
                .map(|(k, v)| from_num(v).map(|v| (k, v)))
                .collect()
        }
    }
}
