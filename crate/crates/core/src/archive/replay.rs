use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;

use crate::runner::{evaluate_all, evaluator_for, read_metrics, trial_dir, Evaluator, Job, METRICS_FILE};
use crate::search::{Ask, Optimizer};

use super::{load_manifest, ArchiveError, RunManifest, TrialOutcome};

#[derive(Debug, Clone, Default)]
pub struct ReplayOptions {
    /// Worker threads for re-evaluation; defaults to the archived parallelism.
    pub parallelism: Option<usize>,
}

/// A metric whose replayed value differs from an archived one.
#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    /// `None` for the reference evaluation.
    pub trial: Option<u64>,
    pub metric: String,
    /// Where the archived value was read from.
    pub source: String,
    pub archived: Option<f64>,
    pub replayed: Option<f64>,
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_else(|| "missing".into());
        match self.trial {
            Some(id) => write!(f, "trial {id}")?,
            None => write!(f, "reference")?,
        }
        write!(
            f,
            " metric {} ({}): archived {} replayed {}",
            self.metric,
            self.source,
            show(self.archived),
            show(self.replayed)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub trials: usize,
    /// True when the executor promises bit-identical metrics.
    pub deterministic: bool,
    /// Ids whose re-asked configuration differs from the archive.
    pub point_mismatches: Vec<u64>,
    pub mismatches: Vec<Mismatch>,
}

impl ReplayReport {
    /// Metric differences fail only deterministic replays; for external
    /// commands they are drift.
    pub fn passed(&self) -> bool {
        self.point_mismatches.is_empty() && (!self.deterministic || self.mismatches.is_empty())
    }

    pub fn drift(&self) -> usize {
        self.mismatches.len()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "trials replayed: {}", self.trials);
        let _ = writeln!(
            out,
            "executor: {}",
            if self.deterministic {
                "deterministic"
            } else {
                "non-deterministic"
            }
        );
        if self.point_mismatches.is_empty() {
            let _ = writeln!(out, "point sequence: matches");
        } else {
            let _ = writeln!(out, "point sequence: differs at trials {:?}", self.point_mismatches);
        }
        let _ = writeln!(out, "metric drift: {}", self.drift());
        for m in &self.mismatches {
            let _ = writeln!(out, "  {m}");
        }
        let _ = writeln!(out, "result: {}", if self.passed() { "pass" } else { "fail" });
        out
    }
}

/// Re-runs an archived run without touching `run_dir`.
///
/// The optimizer is driven through the recorded ask and tell interleaving
/// with the archived results, so the proposed points must come out equal.
/// Every trial is then evaluated again with its recorded seeds in a scratch
/// directory and compared with the manifest and the trial's metrics file.
pub fn replay(run_dir: &Path, opts: &ReplayOptions) -> Result<ReplayReport, ArchiveError> {
    let manifest = load_manifest(run_dir)?;
    manifest.check().map_err(ArchiveError::Replay)?;
    for e in &manifest.ledger {
        let dir = trial_dir(run_dir, e.id);
        if !dir.is_dir() {
            return Err(ArchiveError::MissingTrial(dir.display().to_string()));
        }
    }
    let evaluator =
        evaluator_for(&manifest.document.variables, &manifest.document.executor).map_err(ArchiveError::Replay)?;
    replay_with(&manifest, run_dir, evaluator.as_ref(), opts)
}

/// `replay` with a caller-supplied evaluator.
pub fn replay_with(
    manifest: &RunManifest,
    run_dir: &Path,
    evaluator: &dyn Evaluator,
    opts: &ReplayOptions,
) -> Result<ReplayReport, ArchiveError> {
    let point_mismatches = retrace(manifest)?;
    let scratch = tempfile::tempdir().map_err(|e| ArchiveError::Io("scratch directory".into(), e))?;
    let doc = &manifest.document;
    let mut jobs: Vec<Job> = manifest
        .ledger
        .iter()
        .map(|e| Job {
            id: e.id,
            config: e.configuration.clone(),
            named: doc.variables.named(&e.configuration),
            seeds: e.seeds.clone(),
            dir: trial_dir(scratch.path(), e.id),
        })
        .collect();
    if let Some(r) = &manifest.reference {
        jobs.push(Job {
            id: 0,
            config: r.configuration.clone(),
            named: doc.variables.named(&r.configuration),
            seeds: r.seeds.clone(),
            dir: scratch.path().join("reference"),
        });
    }
    let parallelism = opts.parallelism.unwrap_or(doc.executor.parallelism);
    let results = evaluate_all(evaluator, &jobs, parallelism);

    let mut mismatches = Vec::new();
    for (e, result) in manifest.ledger.iter().zip(&results) {
        let replayed = result.metrics.as_ref().ok();
        compare(Some(e.id), "manifest", &e.metrics, replayed, &mut mismatches);
        let path = trial_dir(run_dir, e.id).join(METRICS_FILE);
        match read_metrics(&path) {
            Ok(file) => compare(
                Some(e.id),
                &format!("trials/{}/{METRICS_FILE}", e.id),
                &file,
                replayed,
                &mut mismatches,
            ),
            Err(err) => mismatches.push(Mismatch {
                trial: Some(e.id),
                metric: format!("<unreadable: {err}>"),
                source: format!("trials/{}/{METRICS_FILE}", e.id),
                archived: None,
                replayed: None,
            }),
        }
        let replay_failed = result
            .metrics
            .as_ref()
            .map_or(true, |m| !m.contains_key(&doc.objective.metric));
        if e.status == TrialOutcome::Done && replay_failed {
            mismatches.push(status_mismatch(e.id, "done", "failed"));
        }
    }
    if let (Some(r), Some(result)) = (&manifest.reference, results.get(manifest.ledger.len())) {
        compare(
            None,
            "manifest",
            &r.metrics,
            result.metrics.as_ref().ok(),
            &mut mismatches,
        );
    }
    Ok(ReplayReport {
        trials: manifest.ledger.len(),
        deterministic: evaluator.deterministic(),
        point_mismatches,
        mismatches,
    })
}

fn status_mismatch(id: u64, archived: &str, replayed: &str) -> Mismatch {
    Mismatch {
        trial: Some(id),
        metric: format!("<status {archived} -> {replayed}>"),
        source: "manifest".into(),
        archived: None,
        replayed: None,
    }
}

fn same(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan())
}

fn compare(
    trial: Option<u64>,
    source: &str,
    archived: &BTreeMap<String, f64>,
    replayed: Option<&BTreeMap<String, f64>>,
    out: &mut Vec<Mismatch>,
) {
    let empty = BTreeMap::new();
    let replayed = replayed.unwrap_or(&empty);
    let names: std::collections::BTreeSet<&String> = archived.keys().chain(replayed.keys()).collect();
    for name in names {
        let (a, r) = (archived.get(name).copied(), replayed.get(name).copied());
        let equal = match (a, r) {
            (Some(a), Some(r)) => same(a, r),
            (None, None) => true,
            _ => false,
        };
        if !equal {
            out.push(Mismatch {
                trial,
                metric: name.clone(),
                source: source.into(),
                archived: a,
                replayed: r,
            });
        }
    }
}

/// Drives a fresh optimizer through the recorded interleaving and returns
/// the ids whose proposal differs from the archive.
fn retrace(manifest: &RunManifest) -> Result<Vec<u64>, ArchiveError> {
    let doc = &manifest.document;
    let mut opt = Optimizer::new(doc.problem(), &doc.search).map_err(|e| ArchiveError::Replay(e.to_string()))?;
    let ledger = &manifest.ledger;
    let mut by_completion: Vec<usize> = (0..ledger.len()).collect();
    by_completion.sort_by_key(|&i| ledger[i].completion_order);
    let mut mismatches = Vec::new();
    let mut next_ask = 0;
    for told in 0..=ledger.len() {
        while next_ask < ledger.len() && ledger[next_ask].asked_after <= told {
            let entry = &ledger[next_ask];
            match opt.ask().map_err(|e| ArchiveError::Replay(e.to_string()))? {
                Ask::Point(p) if p.id == entry.id && p.config == entry.configuration => {}
                Ask::Point(_) => mismatches.push(entry.id),
                other => {
                    return Err(ArchiveError::Replay(format!(
                        "optimizer answered {other:?} where trial {} was asked",
                        entry.id
                    )))
                }
            }
            next_ask += 1;
        }
        let Some(&i) = by_completion.get(told) else { break };
        let entry = &ledger[i];
        let report = match (entry.status, entry.objective) {
            (TrialOutcome::Done, Some(v)) => opt.tell(entry.id, v),
            _ => opt.tell_failure(entry.id, entry.diagnostics.as_deref().unwrap_or("")),
        }
        .map_err(|e| ArchiveError::Replay(e.to_string()))?;
        if !same(report.loss, entry.loss) && !mismatches.contains(&entry.id) {
            mismatches.push(entry.id);
        }
    }
    mismatches.sort_unstable();
    Ok(mismatches)
}
