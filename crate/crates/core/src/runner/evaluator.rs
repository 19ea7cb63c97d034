use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read as _;
use std::os::unix::process::CommandExt as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use contune_sim::{simulate, MetricsReport, PoolConfig, SimParams};

use crate::problem::{Configuration, SearchSpace};

use super::spec::{CommandSpec, ExecutorKind, ExecutorSpec};

/// Variables a simulator configuration must provide, in pool order.
pub const POOL_VARIABLES: [&str; 4] = ["http", "download", "extract", "simsearch"];

/// One evaluation request handed to a worker.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub id: u64,
    pub config: Configuration,
    pub named: BTreeMap<String, f64>,
    /// One seed per repeat.
    pub seeds: Vec<u64>,
    /// Directory the evaluator may write artifacts to.
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Result<BTreeMap<String, f64>, String>,
    /// Free-form output kept in the trial log.
    pub log: String,
}

impl Evaluation {
    pub fn ok(metrics: BTreeMap<String, f64>) -> Self {
        Self {
            metrics: Ok(metrics),
            log: String::new(),
        }
    }

    pub fn failed(reason: impl Into<String>) -> Self {
        Self {
            metrics: Err(reason.into()),
            log: String::new(),
        }
    }
}

/// Something that turns a configuration into metrics. Called concurrently
/// from worker threads.
pub trait Evaluator: Send + Sync {
    fn evaluate(&self, job: &Job) -> Evaluation;

    /// True when equal jobs always produce bit-identical metrics.
    fn deterministic(&self) -> bool {
        false
    }
}

/// Runs the thread-pool simulator once per seed and aggregates the runs.
pub struct SimulatorEvaluator {
    params: SimParams,
    indices: [usize; 4],
}

impl SimulatorEvaluator {
    pub fn new(space: &SearchSpace, params: SimParams) -> Result<Self, String> {
        params.validate().map_err(|e| e.to_string())?;
        let mut indices = [0; 4];
        for (slot, name) in indices.iter_mut().zip(POOL_VARIABLES) {
            *slot = space
                .index_of(name)
                .ok_or_else(|| format!("search space has no `{name}` variable"))?;
        }
        Ok(Self { params, indices })
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn pools(&self, config: &Configuration) -> PoolConfig {
        let v = |i: usize| config.get(self.indices[i]) as u32;
        PoolConfig::new(v(0), v(1), v(2), v(3))
    }

    pub fn run(&self, config: &Configuration, seeds: &[u64]) -> Result<Vec<MetricsReport>, String> {
        let pools = self.pools(config);
        seeds
            .iter()
            .map(|&seed| {
                let params = SimParams {
                    seed,
                    ..self.params.clone()
                };
                simulate(&pools, &params).map_err(|e| e.to_string())
            })
            .collect()
    }
}

impl Evaluator for SimulatorEvaluator {
    fn evaluate(&self, job: &Job) -> Evaluation {
        let reports = match self.run(&job.config, &job.seeds) {
            Ok(r) => r,
            Err(e) => return Evaluation::failed(e),
        };
        for (r, report) in reports.iter().enumerate() {
            let path = job.dir.join(format!("samples-{r}.csv"));
            if let Err(e) = std::fs::write(&path, report.samples_csv()) {
                return Evaluation::failed(format!("{}: {e}", path.display()));
            }
        }
        let mut log = String::new();
        for (r, report) in reports.iter().enumerate() {
            let _ = writeln!(
                log,
                "repeat {r}: seed {} response_time_mean {} completed {}",
                job.seeds[r], report.response_time_mean, report.completed
            );
        }
        Evaluation {
            metrics: Ok(aggregate(&reports)),
            log,
        }
    }

    fn deterministic(&self) -> bool {
        true
    }
}

/// Mean of the per-run metrics, except `response_time_std` (standard
/// deviation over every pooled sample) and `samples` (total sample count).
pub fn aggregate(reports: &[MetricsReport]) -> BTreeMap<String, f64> {
    let mut out: BTreeMap<String, f64> = BTreeMap::new();
    for report in reports {
        for (k, v) in report.to_metrics() {
            *out.entry(k).or_insert(0.0) += v;
        }
    }
    let n = reports.len() as f64;
    for v in out.values_mut() {
        *v /= n;
    }
    let pooled: Vec<f64> = reports
        .iter()
        .flat_map(|r| r.samples.iter().map(|s| s.response_time))
        .collect();
    out.insert("response_time_std".into(), sample_std(&pooled));
    out.insert("samples".into(), pooled.len() as f64);
    out
}

fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Runs a shell command per repeat and reads its metrics file.
pub struct CommandEvaluator {
    spec: CommandSpec,
}

impl CommandEvaluator {
    pub fn new(spec: CommandSpec) -> Self {
        Self { spec }
    }

    /// Substitutes `{name}` placeholders; unknown placeholders are kept.
    pub fn render(&self, job: &Job, repeat: usize) -> String {
        let mut out = self.spec.template.clone();
        for (name, value) in &job.named {
            out = out.replace(&format!("{{{name}}}"), &format_value(*value));
        }
        out.replace("{trial_dir}", &job.dir.display().to_string())
            .replace("{trial}", &job.id.to_string())
            .replace("{repeat}", &repeat.to_string())
            .replace("{seed}", &job.seeds[repeat].to_string())
    }

    fn run_once(&self, job: &Job, repeat: usize, log: &mut String) -> Result<BTreeMap<String, f64>, String> {
        let metrics_path = job.dir.join(&self.spec.metrics_file);
        let _ = std::fs::remove_file(&metrics_path);
        let command = self.render(job, repeat);
        let _ = writeln!(log, "$ {command}");
        let stdout = std::fs::File::create(job.dir.join(format!("stdout-{repeat}")))
            .map_err(|e| format!("cannot capture stdout: {e}"))?;
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&command)
            .current_dir(&job.dir)
            .env("CONTUNE_TRIAL_DIR", &job.dir)
            .env("CONTUNE_SEED", job.seeds[repeat].to_string())
            .stdin(Stdio::null())
            .stdout(stdout)
            .stderr(Stdio::piped())
            .process_group(0)
            .spawn()
            .map_err(|e| format!("cannot spawn `{command}`: {e}"))?;
        let mut stderr = child.stderr.take().expect("piped stderr");
        let reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = stderr.read_to_string(&mut s);
            s
        });
        let deadline = Instant::now() + Duration::from_secs_f64(self.spec.timeout);
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break Some(status),
                Ok(None) if Instant::now() >= deadline => {
                    kill_group(child.id());
                    let _ = child.kill();
                    let _ = child.wait();
                    break None;
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(5)),
                Err(e) => return Err(format!("waiting for `{command}`: {e}")),
            }
        };
        let err_text = reader.join().unwrap_or_default();
        let _ = std::fs::write(job.dir.join(format!("stderr-{repeat}")), &err_text);
        if !err_text.is_empty() {
            let _ = writeln!(log, "{}", err_text.trim_end());
        }
        match status {
            None => return Err(format!("timed out after {} s", self.spec.timeout)),
            Some(s) if !s.success() => return Err(format!("exited with {s}")),
            Some(_) => {}
        }
        let text = std::fs::read_to_string(&metrics_path)
            .map_err(|e| format!("cannot read {}: {e}", metrics_path.display()))?;
        parse_metrics(&text)
    }
}

impl Evaluator for CommandEvaluator {
    fn evaluate(&self, job: &Job) -> Evaluation {
        let mut log = String::new();
        let mut runs = Vec::with_capacity(job.seeds.len());
        for repeat in 0..job.seeds.len() {
            match self.run_once(job, repeat, &mut log) {
                Ok(m) => runs.push(m),
                Err(e) => return Evaluation { metrics: Err(e), log },
            }
        }
        let mut out: BTreeMap<String, f64> = BTreeMap::new();
        for m in &runs {
            for (k, v) in m {
                *out.entry(k.clone()).or_insert(0.0) += v;
            }
        }
        for v in out.values_mut() {
            *v /= runs.len() as f64;
        }
        Evaluation { metrics: Ok(out), log }
    }
}

/// Kills the command and everything it started.
fn kill_group(pid: u32) {
    let _ = Command::new("kill")
        .args(["-KILL", "--", &format!("-{pid}")])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status();
}

/// Wraps a closure; handy for stubs and analytic benchmarks.
pub struct FnEvaluator<F> {
    f: F,
    deterministic: bool,
}

impl<F> FnEvaluator<F>
where
    F: Fn(&Job) -> Result<BTreeMap<String, f64>, String> + Send + Sync,
{
    pub fn new(f: F, deterministic: bool) -> Self {
        Self { f, deterministic }
    }
}

impl<F> Evaluator for FnEvaluator<F>
where
    F: Fn(&Job) -> Result<BTreeMap<String, f64>, String> + Send + Sync,
{
    fn evaluate(&self, job: &Job) -> Evaluation {
        Evaluation {
            metrics: (self.f)(job),
            log: String::new(),
        }
    }

    fn deterministic(&self) -> bool {
        self.deterministic
    }
}

/// Builds the evaluator an executor section describes.
pub fn evaluator_for(space: &SearchSpace, spec: &ExecutorSpec) -> Result<Box<dyn Evaluator>, String> {
    spec.validate()?;
    Ok(match spec.kind {
        ExecutorKind::Simulator => Box::new(SimulatorEvaluator::new(space, spec.simulator.clone())?),
        ExecutorKind::ExternalCommand => {
            Box::new(CommandEvaluator::new(spec.command.clone().expect("validated command")))
        }
    })
}

/// Integers without a fractional part, everything else in shortest form.
pub fn format_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// `name=value` per line, sorted by name, shortest round-trip decimals.
pub fn format_metrics(metrics: &BTreeMap<String, f64>) -> String {
    let mut out = String::new();
    for (k, v) in metrics {
        let _ = writeln!(out, "{k}={v:?}");
    }
    out
}

/// Parses `name=value` lines. Blank lines and `#` comments are skipped; a
/// decimal comma is an error.
pub fn parse_metrics(text: &str) -> Result<BTreeMap<String, f64>, String> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, value) = line
            .split_once('=')
            .ok_or_else(|| format!("metrics line {}: expected name=value", n + 1))?;
        let (name, value) = (name.trim(), value.trim());
        if name.is_empty() {
            return Err(format!("metrics line {}: empty name", n + 1));
        }
        let v: f64 = value
            .parse()
            .map_err(|_| format!("metrics line {}: `{value}` is not a number", n + 1))?;
        if out.insert(name.to_string(), v).is_some() {
            return Err(format!("metrics line {}: `{name}` repeated", n + 1));
        }
    }
    Ok(out)
}

pub(crate) fn read_metrics(path: &Path) -> Result<BTreeMap<String, f64>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse_metrics(&text)
}
