use anyhow::{Context, Result};
use contune::archive::{RunManifest, RunStatus, MANIFEST_FILE};
use contune::runner::{run_cycle, RunOptions};

use crate::{abort_flag, exit, output_dir, percent, relative_change, resolve_document, OptimizeArgs};

pub(crate) fn run(args: OptimizeArgs) -> Result<i32> {
    let doc = resolve_document(&args.target, &args.overrides)?;
    let run_dir = output_dir(args.out.as_deref(), "optimize")?;
    let opts = RunOptions {
        thin_checkpoints: args.thin_checkpoints,
        abort: Some(abort_flag()),
        reference: doc.baseline.is_some(),
    };
    let outcome = run_cycle(&doc, &run_dir, &opts).with_context(|| format!("run in {}", run_dir.display()))?;
    print!("{}", summary(&outcome.manifest));
    println!(
        "manifest: {} (sha256 {})",
        run_dir.join(MANIFEST_FILE).display(),
        outcome.digest
    );
    Ok(code(&outcome.manifest))
}

pub(crate) fn code(m: &RunManifest) -> i32 {
    if m.status == RunStatus::Aborted {
        exit::ABORTED
    } else if m.counts.failed > 0 {
        exit::FAILURES
    } else {
        exit::OK
    }
}

fn summary(m: &RunManifest) -> String {
    let space = &m.document.variables;
    let metric = &m.document.objective.metric;
    let mut out = String::new();
    let status = match m.status {
        RunStatus::Completed => "completed",
        RunStatus::Aborted => "aborted",
    };
    let stop = m.stop_reason.map(|s| format!(" ({})", s.name())).unwrap_or_default();
    out += &format!("status: {status}{stop}\n");
    out += &format!(
        "trials: {} ({} initial, {} guided, {} failed)\n",
        m.counts.total, m.counts.initial, m.counts.guided, m.counts.failed
    );
    match &m.best {
        Some(b) => {
            out += &format!("best: trial {} {}\n", b.id, space.format(&b.configuration));
            out += &format!("best {metric}: {}\n", b.objective);
        }
        None => out += "best: none (no successful trial)\n",
    }
    if let Some(r) = &m.reference {
        let value = r.metrics.get(metric).copied();
        out += &format!("baseline: {}\n", space.format(&r.configuration));
        match value {
            Some(v) => out += &format!("baseline {metric}: {v}\n"),
            None => out += &format!("baseline {metric}: failed\n"),
        }
        if let (Some(b), Some(v)) = (&m.best, value) {
            out += &format!("change vs baseline: {}\n", percent(relative_change(b.objective, v)));
        }
    }
    out
}
