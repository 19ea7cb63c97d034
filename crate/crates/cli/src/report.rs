use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use contune::archive::{load_manifest, RunManifest, RunStatus, TrialOutcome, MANIFEST_FILE};
use contune::problem::{Configuration, SearchSpace, VarKind};
use contune::runner::{trial_dir, ExecutorKind};
use contune::search::AcquisitionKind;

use crate::sensitivity::{render, SensitivityRecord, SENSITIVITY_FILE};
use crate::{exit, output_dir, percent, relative_change, ReportArgs};

pub const SUMMARY_CSV: &str = "summary.csv";
pub const TIMESERIES_CSV: &str = "timeseries.csv";

enum Source {
    Run(Box<RunManifest>),
    Study(Box<SensitivityRecord>),
}

struct Loaded {
    dir: PathBuf,
    source: Source,
}

/// The optimum of a directory next to the baseline, for cross-run tables.
struct Row {
    dir: String,
    kind: &'static str,
    clients: Option<u32>,
    aborted: bool,
    optimum: Option<Configuration>,
    optimum_value: Option<f64>,
    baseline_value: Option<f64>,
    /// Directories holding the sample files of the optimum and baseline.
    series: Vec<(&'static str, PathBuf)>,
}

fn load(dir: &Path) -> Result<Loaded> {
    let source = if dir.join(MANIFEST_FILE).exists() {
        Source::Run(Box::new(
            load_manifest(dir).with_context(|| format!("cannot load {}", dir.display()))?,
        ))
    } else if dir.join(SENSITIVITY_FILE).exists() {
        Source::Study(Box::new(SensitivityRecord::load(dir)?))
    } else {
        bail!("{} holds no run manifest or sensitivity study", dir.display());
    };
    Ok(Loaded {
        dir: dir.to_path_buf(),
        source,
    })
}

pub(crate) fn run(args: ReportArgs) -> Result<i32> {
    let loaded = args.dirs.iter().map(|d| load(d)).collect::<Result<Vec<_>>>()?;
    let out = args.out.as_deref().map(|o| output_dir(Some(o), "report")).transpose()?;
    let rows: Vec<Row> = loaded.iter().map(row).collect();
    for (i, l) in loaded.iter().enumerate() {
        if i > 0 {
            println!();
        }
        print!("{}", describe(l));
    }
    if loaded.len() > 1 {
        println!();
        print!("{}", workload_table(&rows));
    }
    if let Some(out) = out {
        std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
        let write = |name: &str, text: String| {
            let p = out.join(name);
            std::fs::write(&p, text).with_context(|| format!("cannot write {}", p.display()))
        };
        write(SUMMARY_CSV, summary_csv(&rows))?;
        write(TIMESERIES_CSV, timeseries_csv(&rows)?)?;
        println!("csv written to {}", out.display());
    }
    Ok(exit::OK)
}

fn row(l: &Loaded) -> Row {
    let dir = l.dir.display().to_string();
    match &l.source {
        Source::Run(m) => {
            let metric = &m.document.objective.metric;
            let mut series = Vec::new();
            if let Some(b) = &m.best {
                series.push(("optimum", trial_dir(&l.dir, b.id)));
            }
            if m.reference.is_some() {
                series.push(("baseline", l.dir.join("reference")));
            }
            Row {
                dir,
                kind: "optimize",
                clients: (m.document.executor.kind == ExecutorKind::Simulator)
                    .then_some(m.document.executor.simulator.clients),
                aborted: m.status == RunStatus::Aborted,
                optimum: m.best.as_ref().map(|b| b.configuration.clone()),
                optimum_value: m.best.as_ref().map(|b| b.objective),
                baseline_value: m.reference.as_ref().and_then(|r| r.metrics.get(metric).copied()),
                series,
            }
        }
        Source::Study(r) => {
            let refined = r.refined();
            let mut series = Vec::new();
            if let Some(p) = refined.filter(|p| !p.reused) {
                let i = r
                    .points
                    .iter()
                    .position(|q| std::ptr::eq(q, p))
                    .expect("point of the study");
                series.push(("optimum", l.dir.join("points").join(i.to_string())));
            }
            if r.reference.is_some() {
                series.push(("baseline", l.dir.join("reference")));
            }
            Row {
                dir,
                kind: "sensitivity",
                clients: r.clients,
                aborted: false,
                optimum: refined.map(|p| p.configuration.clone()),
                optimum_value: refined.and_then(|p| r.objective_of(p)),
                baseline_value: r.reference.as_ref().and_then(|p| r.objective_of(p)),
                series,
            }
        }
    }
}

fn describe(l: &Loaded) -> String {
    match &l.source {
        Source::Run(m) => describe_run(&l.dir, m),
        Source::Study(r) => {
            let mut out = format!("sensitivity study: {}\n", l.dir.display());
            out += &render(r, r.table().ok().as_ref());
            out
        }
    }
}

fn bounds(space: &SearchSpace) -> String {
    space
        .variables()
        .iter()
        .map(|v| {
            let kind = match v.kind {
                VarKind::Integer => "integer",
                VarKind::Real => "real",
            };
            format!("{} {kind} [{}, {}]", v.name, v.lower, v.upper)
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn describe_run(dir: &Path, m: &RunManifest) -> String {
    let doc = &m.document;
    let space = &doc.variables;
    let metric = &doc.objective.metric;
    let mut out = String::new();
    let _ = writeln!(out, "run: {}", dir.display());
    match m.status {
        RunStatus::Completed => {
            let stop = m.stop_reason.map(|s| format!(" ({})", s.name())).unwrap_or_default();
            let _ = writeln!(out, "status: completed{stop}");
        }
        RunStatus::Aborted => {
            let _ = writeln!(out, "status: ABORTED, the run was interrupted before its budget");
        }
    }
    let direction = format!("{:?}", doc.objective.direction).to_lowercase();
    let _ = writeln!(out, "problem: {direction} {metric} over {}", bounds(space));
    for c in &doc.constraints {
        let _ = writeln!(out, "constraint: {}", serde_json::to_string(c).unwrap_or_default());
    }
    if doc.executor.kind == ExecutorKind::Simulator {
        let s = &doc.executor.simulator;
        let _ = writeln!(
            out,
            "executor: simulator, {} clients, {} s, jitter {}, {} repeats",
            s.clients, s.duration, s.jitter, doc.executor.repeats
        );
    } else {
        let _ = writeln!(out, "executor: external command, {} repeats", doc.executor.repeats);
    }
    let a = &m.algorithm;
    let mut algo = a.name.clone();
    if let (Some(s), Some(e)) = (&a.surrogate, &a.ensemble) {
        let _ = write!(algo, ", surrogate {s} with {} trees", e.n_trees);
    }
    if let Some(acq) = &a.acquisition {
        match acq.kind {
            AcquisitionKind::LowerConfidenceBound => {
                let _ = write!(algo, ", lower confidence bound (kappa {})", acq.kappa);
            }
            AcquisitionKind::ExpectedImprovement => {
                let _ = write!(algo, ", expected improvement (xi {})", acq.xi);
            }
        }
    }
    let _ = writeln!(
        out,
        "algorithm: {algo}; seed {}, budget {}, {} initial samples",
        m.seeds.run, doc.search.budget, m.sampler.n_initial
    );
    let _ = writeln!(
        out,
        "trials: {} ({} initial, {} guided, {} failed)",
        m.counts.total, m.counts.initial, m.counts.guided, m.counts.failed
    );

    let _ = write!(out, "{:>5} {:>5} {:<8} {:<7}", "id", "order", "phase", "status");
    for v in space.variables() {
        let _ = write!(out, " {:>10}", v.name);
    }
    let _ = writeln!(out, " {:>14}", metric);
    for e in &m.ledger {
        let phase = format!("{:?}", e.phase).to_lowercase();
        let status = match e.status {
            TrialOutcome::Done => "done",
            TrialOutcome::Failed => "failed",
        };
        let _ = write!(out, "{:>5} {:>5} {phase:<8} {status:<7}", e.id, e.completion_order);
        for x in e.configuration.values() {
            let _ = write!(out, " {x:>10}");
        }
        match e.objective {
            Some(y) => {
                let _ = writeln!(out, " {y:>14.6}");
            }
            None => {
                let _ = writeln!(out, " {:>14}", "-");
            }
        }
    }

    match &m.best {
        None => out += "best: none\n",
        Some(b) => {
            let _ = writeln!(
                out,
                "best: trial {} {} {metric} = {}",
                b.id,
                space.format(&b.configuration),
                b.objective
            );
            if let Some(r) = &m.reference {
                let _ = writeln!(out, "{:<20} {:>14} {:>14}", "", "baseline", "optimum");
                for (i, v) in space.variables().iter().enumerate() {
                    let _ = writeln!(
                        out,
                        "{:<20} {:>14} {:>14}",
                        v.name,
                        r.configuration.get(i),
                        b.configuration.get(i)
                    );
                }
                let base = r.metrics.get(metric).copied();
                let shown = base.map_or_else(|| "failed".to_string(), |v| format!("{v:.4}"));
                let _ = writeln!(out, "{:<20} {:>14} {:>14.4}", metric, shown, b.objective);
                let change = base.and_then(|v| relative_change(b.objective, v));
                let _ = writeln!(out, "{:<20} {:>29}", "change", percent(change));
            }
        }
    }
    out
}

fn workload_table(rows: &[Row]) -> String {
    let mut sorted: Vec<&Row> = rows.iter().collect();
    sorted.sort_by_key(|r| r.clients);
    let mut out = String::from("workload comparison\n");
    let _ = writeln!(
        out,
        "{:>8} {:>12} {:>12} {:>9}  {:<12} optimum",
        "clients", "baseline", "optimum", "change", "source"
    );
    let num = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    for r in sorted {
        let clients = r.clients.map_or_else(|| "-".to_string(), |c| c.to_string());
        let change = match (r.optimum_value, r.baseline_value) {
            (Some(o), Some(b)) => percent(relative_change(o, b)),
            _ => "n/a".to_string(),
        };
        let optimum = r.optimum.as_ref().map(|c| c.to_string()).unwrap_or_default();
        let flag = if r.aborted { " [aborted]" } else { "" };
        let _ = writeln!(
            out,
            "{clients:>8} {:>12} {:>12} {change:>9}  {:<12} {optimum}{flag}",
            num(r.baseline_value),
            num(r.optimum_value),
            r.kind
        );
    }
    out
}

fn summary_csv(rows: &[Row]) -> String {
    let mut out =
        String::from("source,kind,clients,status,optimum,optimum_objective,baseline_objective,relative_change\n");
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        let change = match (r.optimum_value, r.baseline_value) {
            (Some(o), Some(b)) => relative_change(o, b),
            _ => None,
        };
        let optimum = r
            .optimum
            .as_ref()
            .map(|c| c.values().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" "))
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{optimum},{},{},{}",
            r.dir,
            r.kind,
            r.clients.map(|c| c.to_string()).unwrap_or_default(),
            if r.aborted { "aborted" } else { "completed" },
            opt(r.optimum_value),
            opt(r.baseline_value),
            opt(change),
        );
    }
    out
}

/// Per-sample series of every optimum and baseline, long format.
fn timeseries_csv(rows: &[Row]) -> Result<String> {
    let mut out = String::from("source,role,repeat,timestamp,metric,value\n");
    for r in rows {
        for (role, dir) in &r.series {
            for repeat in 0.. {
                let path = dir.join(format!("samples-{repeat}.csv"));
                if !path.exists() {
                    break;
                }
                let text = std::fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
                for line in text.lines().skip(1) {
                    let _ = writeln!(out, "{},{role},{repeat},{line}", r.dir);
                }
            }
        }
    }
    Ok(out)
}
