//! The `contune` command line: optimize, sensitivity, report and replay.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::{Arc, OnceLock};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use contune::document::{load_document, ProblemDocument};
use contune::runner::ExecutorKind;

mod optimize;
mod report;
mod sensitivity;

pub use report::{SUMMARY_CSV, TIMESERIES_CSV};
pub use sensitivity::{EFFECTS_CSV, REPORT_TXT, SENSITIVITY_FILE};

pub const RUN_DIR_ENV: &str = "CONTUNE_RUN_DIR";

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const FAILURES: i32 = 2;
    pub const ABORTED: i32 = 3;
}

#[derive(Debug, Parser)]
#[command(
    name = "contune",
    version,
    about = "Tune thread-pool configurations with a surrogate-guided search"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an optimization cycle and archive it.
    Optimize(OptimizeArgs),
    /// Vary one variable at a time around a base configuration.
    Sensitivity(SensitivityArgs),
    /// Summarize archived runs and sensitivity studies.
    Report(ReportArgs),
    /// Re-evaluate an archived run and compare it with the archive.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Target {
    /// A problem document, or `scenario <name>` for a built-in one.
    #[arg(value_name = "DOCUMENT | scenario NAME", required = true, num_args = 1..=2)]
    pub target: Vec<String>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Evaluations per configuration.
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    pub repeat: Option<u64>,
    /// Simulated seconds per evaluation, warmup included.
    #[arg(long, value_name = "SECONDS")]
    pub duration: Option<f64>,
    /// Concurrent evaluation slots.
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    pub parallelism: Option<u64>,
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Simultaneous simulated clients.
    #[arg(long, value_name = "N")]
    pub clients: Option<u32>,
    /// Evaluation budget of the search.
    #[arg(long, value_name = "N")]
    pub budget: Option<usize>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub target: Target,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Run directory; must be new or empty.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Keep only the most recent model checkpoint.
    #[arg(long)]
    pub thin_checkpoints: bool,
}

#[derive(Debug, Args)]
pub struct SensitivityArgs {
    #[command(flatten)]
    pub target: Target,
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Take the base from an optimize run or a previous sensitivity study.
    #[arg(long, value_name = "DIR")]
    pub from: Option<PathBuf>,
    /// Evaluate the base again even when archived metrics could be reused.
    #[arg(long)]
    pub rerun_base: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories or sensitivity directories.
    #[arg(value_name = "DIR", required = true)]
    pub dirs: Vec<PathBuf>,
    /// Also write summary.csv and timeseries.csv into this new directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub run_dir: PathBuf,
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    pub parallelism: Option<u64>,
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code. Diagnostics go to stderr.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit::USAGE
        }
    }
}

pub fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Optimize(a) => optimize::run(a),
        Command::Sensitivity(a) => sensitivity::run(a),
        Command::Report(a) => report::run(a),
        Command::Replay(a) => replay(a),
    }
}

fn replay(args: ReplayArgs) -> Result<i32> {
    let opts = contune::archive::ReplayOptions {
        parallelism: args.parallelism.map(|p| p as usize),
    };
    let report = contune::archive::replay(&args.run_dir, &opts)
        .with_context(|| format!("cannot replay {}", args.run_dir.display()))?;
    print!("{}", report.to_text());
    Ok(if report.passed() { exit::OK } else { exit::FAILURES })
}

/// Loads the target document and applies command-line overrides.
pub fn resolve_document(target: &Target, overrides: &Overrides) -> Result<ProblemDocument> {
    let mut doc = match target.target.as_slice() {
        [kw, name] if kw == "scenario" => {
            contune::scenario::lookup(name)
                .ok_or_else(|| {
                    anyhow!(
                        "unknown scenario `{name}`; available: {}",
                        contune::scenario::NAMES.join(", ")
                    )
                })?
                .document
        }
        [path] => load_document(Path::new(path)).map_err(|d| anyhow!("{path}: {d}"))?,
        other => bail!("expected a document path or `scenario <name>`, got {other:?}"),
    };
    apply_overrides(&mut doc, overrides)?;
    doc.validate().map_err(|d| anyhow!("{d}"))?;
    Ok(doc)
}

fn apply_overrides(doc: &mut ProblemDocument, o: &Overrides) -> Result<()> {
    let simulator = doc.executor.kind == ExecutorKind::Simulator;
    if !simulator && (o.duration.is_some() || o.clients.is_some()) {
        bail!("--duration and --clients only apply to the simulator executor");
    }
    if let Some(r) = o.repeat {
        doc.executor.repeats = r as usize;
        if let Some(s) = doc.sensitivity.as_mut() {
            s.repeats = Some(r as usize);
        }
    }
    if let Some(d) = o.duration {
        doc.executor.simulator.duration = d;
    }
    if let Some(p) = o.parallelism {
        doc.executor.parallelism = p as usize;
    }
    if let Some(s) = o.seed {
        doc.search.seed = s;
    }
    if let Some(c) = o.clients {
        doc.executor.simulator.clients = c;
    }
    if let Some(b) = o.budget {
        doc.search.budget = b;
    }
    Ok(())
}

/// `--out` if given, else a fresh timestamped directory under
/// `$CONTUNE_RUN_DIR` (default `runs`). Nothing is created here.
pub fn output_dir(out: Option<&Path>, command: &str) -> Result<PathBuf> {
    if let Some(out) = out {
        if out.exists() {
            let mut entries = std::fs::read_dir(out).with_context(|| format!("cannot read {}", out.display()))?;
            if entries.next().is_some() {
                bail!("{} already exists and is not empty", out.display());
            }
        }
        return Ok(out.to_path_buf());
    }
    let root = std::env::var_os(RUN_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    let mut dir = root.join(format!("{command}-{stamp}"));
    let mut n = 1;
    while dir.exists() {
        dir = root.join(format!("{command}-{stamp}-{n}"));
        n += 1;
    }
    Ok(dir)
}

/// Process-wide flag raised by Ctrl-C.
pub fn abort_flag() -> Arc<AtomicBool> {
    static FLAG: OnceLock<Arc<AtomicBool>> = OnceLock::new();
    FLAG.get_or_init(|| {
        let flag = Arc::new(AtomicBool::new(false));
        let handler_flag = Arc::clone(&flag);
        let _ = ctrlc::set_handler(move || {
            eprintln!("interrupt: finishing running trials");
            handler_flag.store(true, std::sync::atomic::Ordering::SeqCst);
        });
        flag
    })
    .clone()
}

/// `+12.5%` style change of `value` against `reference`.
pub fn relative_change(value: f64, reference: f64) -> Option<f64> {
    (reference != 0.0 && value.is_finite() && reference.is_finite()).then(|| (value - reference) / reference.abs())
}

pub(crate) fn percent(change: Option<f64>) -> String {
    change.map_or_else(|| "n/a".to_string(), |c| format!("{:+.1}%", 100.0 * c))
}
