use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use contune::archive::{load_manifest, TrialOutcome, MANIFEST_FILE};
use contune::document::ProblemDocument;
use contune::problem::Configuration;
use contune::runner::{evaluate_all, evaluator_for, reference_seeds, trial_seeds, ExecutorKind, ExecutorSpec, Job};
use contune::sensitivity::{analyze, expand, EffectTable, OatPlan};
use serde::{Deserialize, Serialize};

use crate::{exit, output_dir, percent, relative_change, resolve_document, SensitivityArgs};

pub const SENSITIVITY_FILE: &str = "sensitivity.json";
pub const EFFECTS_CSV: &str = "effects.csv";
pub const REPORT_TXT: &str = "report.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct PointRecord {
    /// `None` for the base.
    pub variable: Option<String>,
    pub offset: f64,
    pub configuration: Configuration,
    pub seeds: Vec<u64>,
    #[serde(with = "lossless")]
    pub metrics: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    /// Metrics copied from an earlier evaluation instead of recomputed.
    #[serde(default)]
    pub reused: bool,
}

/// Everything a sensitivity study leaves in `sensitivity.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct SensitivityRecord {
    pub document: ProblemDocument,
    /// Simulated clients; absent for command executors.
    pub clients: Option<u32>,
    pub base_source: String,
    pub repeats: usize,
    pub points: Vec<PointRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<PointRecord>,
}

impl SensitivityRecord {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(SENSITIVITY_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("{} is malformed", path.display()))
    }

    pub fn table(&self) -> Result<EffectTable> {
        let results: Vec<_> = self
            .points
            .iter()
            .filter_map(|p| {
                let point = contune::sensitivity::OatPoint {
                    variable: p.variable.clone(),
                    offset: p.offset,
                    config: p.configuration.clone(),
                };
                p.metrics.clone().map(|m| (point, m))
            })
            .collect();
        let o = &self.document.objective;
        Ok(analyze(&results, &o.metric, o.direction)?)
    }

    pub fn base(&self) -> Option<&PointRecord> {
        self.points.iter().find(|p| p.variable.is_none())
    }

    pub fn objective_of(&self, p: &PointRecord) -> Option<f64> {
        p.metrics.as_ref()?.get(&self.document.objective.metric).copied()
    }

    /// The base moved by its single best offset, or the base itself when no
    /// offset beats it.
    pub fn refined(&self) -> Option<&PointRecord> {
        let direction = self.document.objective.direction;
        let base = self.base()?;
        let mut best = (base, self.objective_of(base)?);
        for p in &self.points {
            if let Some(v) = self.objective_of(p) {
                if direction.better(v, best.1) {
                    best = (p, v);
                }
            }
        }
        Some(best.0)
    }

    pub fn failed(&self) -> usize {
        self.points
            .iter()
            .chain(&self.reference)
            .filter(|p| p.metrics.is_none())
            .count()
    }
}

/// A base configuration together with metrics that may stand in for its
/// evaluation.
struct Base {
    config: Configuration,
    source: String,
    archived: Option<Archived>,
}

struct Archived {
    metrics: BTreeMap<String, f64>,
    seeds: Vec<u64>,
    executor: ExecutorSpec,
}

fn base_from_dir(dir: &Path, doc: &ProblemDocument) -> Result<Base> {
    if dir.join(MANIFEST_FILE).exists() {
        let m = load_manifest(dir).with_context(|| format!("cannot load {}", dir.display()))?;
        if m.document.variables != doc.variables {
            bail!("{} was run over different variables", dir.display());
        }
        let best = m
            .best
            .as_ref()
            .ok_or_else(|| anyhow!("{} has no successful trial", dir.display()))?;
        let entry = &m.ledger[best.id as usize];
        return Ok(Base {
            config: best.configuration.clone(),
            source: format!("best trial {} of {}", best.id, dir.display()),
            archived: (entry.status == TrialOutcome::Done).then(|| Archived {
                metrics: entry.metrics.clone(),
                seeds: entry.seeds.clone(),
                executor: m.document.executor.clone(),
            }),
        });
    }
    if dir.join(SENSITIVITY_FILE).exists() {
        let r = SensitivityRecord::load(dir)?;
        if r.document.variables != doc.variables {
            bail!("{} studied different variables", dir.display());
        }
        let p = r
            .refined()
            .ok_or_else(|| anyhow!("{} has no evaluated base", dir.display()))?;
        let change = match &p.variable {
            Some(v) => format!("{v} {:+}", p.offset),
            None => "no change".to_string(),
        };
        return Ok(Base {
            config: p.configuration.clone(),
            source: format!("refined optimum ({change}) of {}", dir.display()),
            archived: p.metrics.clone().map(|metrics| Archived {
                metrics,
                seeds: p.seeds.clone(),
                executor: r.document.executor.clone(),
            }),
        });
    }
    bail!("{} holds neither a run manifest nor a sensitivity study", dir.display())
}

fn resolve_base(args: &SensitivityArgs, doc: &ProblemDocument) -> Result<Base> {
    if let Some(dir) = &args.from {
        return base_from_dir(dir, doc);
    }
    let space = &doc.variables;
    if let Some(named) = doc.sensitivity.as_ref().and_then(|s| s.base.as_ref()) {
        let config = space.from_named(named).map_err(|e| anyhow!("sensitivity.base: {e}"))?;
        return Ok(Base {
            config,
            source: "sensitivity.base".into(),
            archived: None,
        });
    }
    match doc.baseline_config().map_err(|d| anyhow!("{d}"))? {
        Some(config) => Ok(Base {
            config,
            source: "baseline".into(),
            archived: None,
        }),
        None => bail!("no base configuration: pass --from, or set sensitivity.base or baseline"),
    }
}

/// Same evaluations up to the number of slots.
fn same_executor(a: &ExecutorSpec, b: &ExecutorSpec) -> bool {
    let strip = |e: &ExecutorSpec| ExecutorSpec {
        parallelism: 1,
        ..e.clone()
    };
    strip(a) == strip(b)
}

pub(crate) fn run(args: SensitivityArgs) -> Result<i32> {
    let mut doc = resolve_document(&args.target, &args.overrides)?;
    let section = doc
        .sensitivity
        .clone()
        .ok_or_else(|| anyhow!("the document has no sensitivity section"))?;
    let repeats = section.repeats.unwrap_or(doc.executor.repeats);
    doc.executor.repeats = repeats;
    let space = doc.variables.clone();
    let base = resolve_base(&args, &doc)?;
    let plan = OatPlan {
        base: base.config.clone(),
        deltas: section.deltas.clone(),
        repeats,
    };
    let points = expand(&plan, &space)?;
    let evaluator = evaluator_for(&space, &doc.executor).map_err(|e| anyhow!(e))?;

    let out = output_dir(args.out.as_deref(), "sensitivity")?;
    std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;

    let reuse = base
        .archived
        .as_ref()
        .filter(|a| !args.rerun_base && same_executor(&a.executor, &doc.executor));
    let seed = doc.search.seed;
    let mut jobs = Vec::new();
    let mut slots = Vec::new();
    for (i, p) in points.iter().enumerate() {
        if p.variable.is_none() && reuse.is_some() {
            continue;
        }
        slots.push(Some(i));
        jobs.push(Job {
            id: i as u64,
            config: p.config.clone(),
            named: space.named(&p.config),
            seeds: trial_seeds(seed, i as u64, repeats),
            dir: out.join("points").join(i.to_string()),
        });
    }
    let baseline = doc.baseline_config().map_err(|d| anyhow!("{d}"))?;
    if let Some(b) = &baseline {
        slots.push(None);
        jobs.push(Job {
            id: points.len() as u64,
            config: b.clone(),
            named: space.named(b),
            seeds: reference_seeds(seed, repeats),
            dir: out.join("reference"),
        });
    }
    let results = evaluate_all(evaluator.as_ref(), &jobs, doc.executor.parallelism);

    let mut records: Vec<Option<PointRecord>> = vec![None; points.len()];
    let mut reference = None;
    for ((slot, job), eval) in slots.into_iter().zip(&jobs).zip(results) {
        let (variable, offset) = match slot {
            Some(i) => (points[i].variable.clone(), points[i].offset),
            None => (None, 0.0),
        };
        let record = PointRecord {
            variable,
            offset,
            configuration: job.config.clone(),
            seeds: job.seeds.clone(),
            failure: eval.metrics.as_ref().err().cloned(),
            metrics: eval.metrics.ok(),
            reused: false,
        };
        match slot {
            Some(i) => records[i] = Some(record),
            None => reference = Some(record),
        }
    }
    if let Some(a) = reuse {
        records[0] = Some(PointRecord {
            variable: None,
            offset: 0.0,
            configuration: base.config.clone(),
            seeds: a.seeds.clone(),
            metrics: Some(a.metrics.clone()),
            failure: None,
            reused: true,
        });
    }
    let record = SensitivityRecord {
        clients: (doc.executor.kind == ExecutorKind::Simulator).then_some(doc.executor.simulator.clients),
        document: doc,
        base_source: base.source,
        repeats,
        points: records.into_iter().map(|r| r.expect("every point recorded")).collect(),
        reference,
    };
    let json = serde_json::to_string_pretty(&record).expect("record serializes") + "\n";
    write(&out.join(SENSITIVITY_FILE), &json)?;

    let table = record.table();
    if let Ok(t) = &table {
        write(&out.join(EFFECTS_CSV), &t.to_csv())?;
    }
    let text = render(&record, table.as_ref().ok());
    write(&out.join(REPORT_TXT), &text)?;
    print!("{text}");
    println!("written to {}", out.display());
    if table.is_err() {
        bail!("the base configuration failed to evaluate");
    }
    Ok(if record.failed() > 0 { exit::FAILURES } else { exit::OK })
}

fn write(path: &PathBuf, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// The text report of a study.
pub(crate) fn render(r: &SensitivityRecord, table: Option<&EffectTable>) -> String {
    let space = &r.document.variables;
    let metric = &r.document.objective.metric;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "base: {} from {}",
        space.format(&r.points[0].configuration),
        r.base_source
    );
    if let Some(c) = r.clients {
        let _ = writeln!(out, "clients: {c}");
    }
    let reused = if r.points[0].reused { ", base reused" } else { "" };
    let _ = writeln!(out, "points: {}, repeats: {}{reused}", r.points.len(), r.repeats);
    if let Some(t) = table {
        out += &t.to_text(space);
    }
    for p in r.points.iter().chain(&r.reference) {
        if let Some(f) = &p.failure {
            let _ = writeln!(out, "failed: {}: {f}", space.format(&p.configuration));
        }
    }
    if let Some(refined) = r.refined() {
        let change = match &refined.variable {
            Some(v) => format!("{v} {:+}", refined.offset),
            None => "base".to_string(),
        };
        let v = r.objective_of(refined).unwrap_or(f64::NAN);
        let _ = writeln!(
            out,
            "refined optimum: {} ({change}) {metric} = {v}",
            space.format(&refined.configuration)
        );
        if let Some(b) = r.reference.as_ref().and_then(|p| r.objective_of(p)) {
            let _ = writeln!(
                out,
                "baseline: {} {metric} = {b}",
                space.format(&r.reference.as_ref().unwrap().configuration)
            );
            let _ = writeln!(out, "refined vs baseline: {}", percent(relative_change(v, b)));
        }
    }
    out
}

/// Non-finite metrics as strings so that the JSON stays valid.
mod lossless {
    use std::collections::BTreeMap;

    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Num {
        F(f64),
        S(String),
    }

    pub fn serialize<S: Serializer>(m: &Option<BTreeMap<String, f64>>, s: S) -> Result<S::Ok, S::Error> {
        m.as_ref()
            .map(|m| {
                m.iter()
                    .map(|(k, &v)| {
                        (
                            k,
                            if v.is_finite() {
                                Num::F(v)
                            } else {
                                Num::S(v.to_string())
                            },
                        )
                    })
                    .collect::<BTreeMap<_, _>>()
            })
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<BTreeMap<String, f64>>, D::Error> {
        let Some(raw) = Option::<BTreeMap<String, Num>>::deserialize(d)? else {
            return Ok(None);
        };
        raw.into_iter()
            .map(|(k, v)| match v {
                Num::F(x) => Ok((k, x)),
                Num::S(s) => s
                    .parse()
                    .map(|x| (k, x))
                    .map_err(|_| D::Error::custom(format!("bad number {s:?}"))),
            })
            .collect::<Result<_, _>>()
            .map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(variable: Option<&str>, offset: f64, x: f64, y: Option<f64>) -> PointRecord {
        PointRecord {
            variable: variable.map(str::to_string),
            offset,
            configuration: Configuration::new(vec![x]),
            seeds: vec![1],
            metrics: y.map(|y| BTreeMap::from([("y".to_string(), y)])),
            failure: None,
            reused: false,
        }
    }

    fn record(points: Vec<PointRecord>) -> SensitivityRecord {
        let doc = contune::document::parse_document(
            r#"{
  "variables": [{"name": "x", "kind": "integer", "lower": 0, "upper": 9}],
  "objective": {"metric": "y", "direction": "minimize"},
  "executor": {"kind": "external_command", "command": {"template": "true"}}
}"#,
        )
        .unwrap();
        SensitivityRecord {
            document: doc,
            clients: None,
            base_source: "test".into(),
            repeats: 1,
            points,
            reference: None,
        }
    }

    #[test]
    fn refined_takes_the_best_single_change() {
        let r = record(vec![
            point(None, 0.0, 5.0, Some(3.0)),
            point(Some("x"), -1.0, 4.0, Some(2.5)),
            point(Some("x"), 1.0, 6.0, Some(3.5)),
        ]);
        assert_eq!(r.refined().unwrap().configuration.values(), [4.0]);
        let flat = record(vec![
            point(None, 0.0, 5.0, Some(3.0)),
            point(Some("x"), 1.0, 6.0, Some(3.0)),
        ]);
        assert!(flat.refined().unwrap().variable.is_none());
    }

    #[test]
    fn failed_points_are_counted_and_skipped() {
        let r = record(vec![point(None, 0.0, 5.0, Some(3.0)), point(Some("x"), 1.0, 6.0, None)]);
        assert_eq!(r.failed(), 1);
        assert_eq!(r.table().unwrap().rows.len(), 1);
    }

    #[test]
    fn non_finite_metrics_round_trip() {
        let mut p = point(None, 0.0, 5.0, Some(f64::INFINITY));
        p.metrics.as_mut().unwrap().insert("z".into(), f64::NAN);
        let r = record(vec![p]);
        let text = serde_json::to_string(&r).unwrap();
        let back: SensitivityRecord = serde_json::from_str(&text).unwrap();
        let m = back.points[0].metrics.as_ref().unwrap();
        assert_eq!(m["y"], f64::INFINITY);
        assert!(m["z"].is_nan());
    }

    #[test]
    fn slot_count_does_not_block_reuse() {
        let a = ExecutorSpec::default();
        let b = ExecutorSpec {
            parallelism: 4,
            ..a.clone()
        };
        assert!(same_executor(&a, &b));
        let c = ExecutorSpec {
            repeats: 3,
            ..a.clone()
        };
        assert!(!same_executor(&a, &c));
    }
}
