use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};

use crate::archive::{
    write_manifest, AlgorithmRecord, BestRecord, Counts, LedgerEntry, ReferenceRecord, RunManifest, RunStatus, Seeds,
    Tool, TrialOutcome, SCHEMA_VERSION,
};
use crate::document::ProblemDocument;
use crate::problem::SearchSpace;
use crate::search::{Algorithm, Ask, Optimizer, Phase, StopReason};

use super::artifacts::{finalize, prepare, trial_dir, Finalization, CHECKPOINT_FILE};
use super::evaluator::{evaluator_for, Evaluation, Evaluator, Job};
use super::{reference_seeds, trial_seeds, RunError, Trial, TrialStatus};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Keep only the latest surrogate checkpoint.
    pub thin_checkpoints: bool,
    /// Checked before every ask; once set, running trials are drained and the
    /// run ends with status aborted.
    pub abort: Option<Arc<AtomicBool>>,
    /// Also evaluate the document's baseline, under `reference/`.
    pub reference: bool,
}

/// When a worker was busy with a trial, relative to the start of the run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotEvent {
    pub trial: u64,
    pub start: Duration,
    pub end: Duration,
}

/// Largest number of overlapping events. Touching intervals do not overlap.
pub fn max_concurrency(events: &[SlotEvent]) -> usize {
    let mut edges: Vec<(Duration, i32)> = events.iter().flat_map(|e| [(e.start, 1), (e.end, -1)]).collect();
    edges.sort();
    edges
        .iter()
        .scan(0i32, |n, &(_, d)| {
            *n += d;
            Some(*n)
        })
        .max()
        .unwrap_or(0) as usize
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub digest: String,
    pub events: Vec<SlotEvent>,
    pub wall_clock: Duration,
    pub run_dir: PathBuf,
}

struct Done {
    id: u64,
    evaluation: Evaluation,
    start: Duration,
    end: Duration,
}

/// Runs the optimization cycle described by `doc` with its own executor.
pub fn run_cycle(doc: &ProblemDocument, run_dir: &Path, opts: &RunOptions) -> Result<RunOutcome, RunError> {
    doc.validate().map_err(|d| RunError::Config(d.to_string()))?;
    let evaluator = evaluator_for(&doc.variables, &doc.executor).map_err(RunError::Config)?;
    run_cycle_with(doc, evaluator.as_ref(), run_dir, opts)
}

/// Evaluates `jobs` on `parallelism` threads; results come back in job order.
pub fn evaluate_all(evaluator: &dyn Evaluator, jobs: &[Job], parallelism: usize) -> Vec<Evaluation> {
    let (tx, rx) = unbounded::<usize>();
    for i in 0..jobs.len() {
        tx.send(i).expect("receiver alive");
    }
    drop(tx);
    let (done_tx, done_rx) = unbounded::<(usize, Evaluation)>();
    std::thread::scope(|s| {
        for _ in 0..parallelism.max(1).min(jobs.len().max(1)) {
            let rx = rx.clone();
            let done_tx = done_tx.clone();
            s.spawn(move || {
                for i in rx {
                    let job = &jobs[i];
                    if let Err(e) = std::fs::create_dir_all(&job.dir) {
                        let _ = done_tx.send((i, Evaluation::failed(format!("{}: {e}", job.dir.display()))));
                        continue;
                    }
                    let _ = done_tx.send((i, evaluator.evaluate(job)));
                }
            });
        }
    });
    drop(done_tx);
    let mut out: Vec<Option<Evaluation>> = vec![None; jobs.len()];
    for (i, e) in done_rx {
        out[i] = Some(e);
    }
    out.into_iter().map(|e| e.expect("every job evaluated")).collect()
}

fn worker(evaluator: &dyn Evaluator, jobs: Receiver<Job>, done: Sender<Done>, t0: Instant) {
    for job in jobs {
        let start = t0.elapsed();
        let evaluation = evaluator.evaluate(&job);
        let end = t0.elapsed();
        if done
            .send(Done {
                id: job.id,
                evaluation,
                start,
                end,
            })
            .is_err()
        {
            return;
        }
    }
}

/// Coordinator state: everything except the worker pool.
struct Coordinator<'a> {
    doc: &'a ProblemDocument,
    space: SearchSpace,
    opt: Optimizer,
    run_dir: &'a Path,
    opts: &'a RunOptions,
    repeats: usize,
    running: BTreeMap<u64, (Trial, usize)>,
    ledger: Vec<LedgerEntry>,
    events: Vec<SlotEvent>,
    stop: Option<StopReason>,
    aborted: bool,
    fatal: Option<RunError>,
    last_checkpoint: Option<PathBuf>,
}

impl Coordinator<'_> {
    fn abort_requested(&self) -> bool {
        self.opts.abort.as_ref().is_some_and(|f| f.load(Ordering::SeqCst))
    }

    fn accepting(&self) -> bool {
        self.stop.is_none() && !self.aborted && self.fatal.is_none()
    }

    /// Asks until every slot is busy, the optimizer waits or it is exhausted.
    fn fill(&mut self, slots: usize, jobs: &Sender<Job>) -> Result<(), RunError> {
        while self.running.len() < slots && self.accepting() {
            if self.abort_requested() {
                self.aborted = true;
                break;
            }
            let proposal = match self.opt.ask()? {
                Ask::Point(p) => p,
                Ask::Wait => break,
                Ask::Exhausted(reason) => {
                    self.stop = Some(reason);
                    break;
                }
            };
            let seeds = trial_seeds(self.opt.settings().seed, proposal.id, self.repeats);
            let dir = trial_dir(self.run_dir, proposal.id);
            let mut trial = Trial::new(proposal.id, proposal.config, proposal.phase, seeds, dir);
            prepare(&trial, &self.space)?;
            trial.start()?;
            let job = Job {
                id: trial.id,
                config: trial.config.clone(),
                named: self.space.named(&trial.config),
                seeds: trial.seeds.clone(),
                dir: trial.dir.clone(),
            };
            let asked_after = self.ledger.len();
            self.running.insert(trial.id, (trial, asked_after));
            jobs.send(job)
                .map_err(|_| RunError::State("worker pool is gone".into()))?;
        }
        if self.running.is_empty() && self.accepting() {
            return Err(RunError::State("optimizer waits with nothing in flight".into()));
        }
        Ok(())
    }

    /// Tells a finished trial and writes its artifacts.
    fn complete(&mut self, done: Done) -> Result<(), RunError> {
        self.events.push(SlotEvent {
            trial: done.id,
            start: done.start,
            end: done.end,
        });
        let (mut trial, asked_after) = self
            .running
            .remove(&done.id)
            .ok_or_else(|| RunError::State(format!("unknown trial {} completed", done.id)))?;
        let objective = self.doc.objective.metric.clone();
        trial.complete(done.evaluation.metrics, &objective)?;
        let report = match trial.status {
            TrialStatus::Done => self.opt.tell_metrics(trial.id, &trial.metrics)?,
            _ => {
                let reason = trial.diagnostics.clone().unwrap_or_default();
                self.opt.tell_failure(trial.id, &reason)?
            }
        };
        let observation = self.opt.observations().last().expect("just told").clone();
        if report.failed && trial.status == TrialStatus::Done {
            trial.reject(observation.failure.clone().unwrap_or_default());
        }
        self.ledger.push(LedgerEntry {
            id: trial.id,
            configuration: trial.config.clone(),
            phase: trial.phase,
            status: if report.failed {
                TrialOutcome::Failed
            } else {
                TrialOutcome::Done
            },
            objective: observation.objective,
            loss: report.loss,
            metrics: trial.metrics.clone(),
            seeds: trial.seeds.clone(),
            asked_after,
            completion_order: self.ledger.len(),
            diagnostics: trial.diagnostics.clone(),
        });
        let checkpoint = self.opt.checkpoint()?;
        let ledger = ledger_csv(&self.space, &self.ledger);
        finalize(
            &trial,
            &Finalization {
                loss: report.loss,
                checkpoint: checkpoint.as_deref(),
                ledger: &ledger,
                evaluator_log: &done.evaluation.log,
            },
        )?;
        if checkpoint.is_some() {
            let path = trial.dir.join(CHECKPOINT_FILE);
            if self.opts.thin_checkpoints {
                if let Some(prev) = self.last_checkpoint.take() {
                    std::fs::remove_file(&prev).map_err(|e| RunError::Io(prev.display().to_string(), e))?;
                }
            }
            self.last_checkpoint = Some(path);
        }
        if self.abort_requested() {
            self.aborted = true;
        }
        Ok(())
    }

    fn keep_first_error(&mut self, r: Result<(), RunError>) {
        if let Err(e) = r {
            self.fatal.get_or_insert(e);
        }
    }
}

/// Runs the optimization cycle with a caller-supplied evaluator.
///
/// `run_dir` must be absent or empty. Coordinator errors still leave a
/// manifest with status aborted next to the finished trials.
pub fn run_cycle_with(
    doc: &ProblemDocument,
    evaluator: &dyn Evaluator,
    run_dir: &Path,
    opts: &RunOptions,
) -> Result<RunOutcome, RunError> {
    let settings = doc.search.resolve(&doc.variables)?;
    doc.executor.validate().map_err(RunError::Config)?;
    let opt = Optimizer::new(doc.problem(), &settings)?;
    if run_dir.exists() {
        let mut entries = std::fs::read_dir(run_dir).map_err(|e| RunError::Io(run_dir.display().to_string(), e))?;
        if entries.next().is_some() {
            return Err(RunError::RunDirInUse(run_dir.display().to_string()));
        }
    }
    std::fs::create_dir_all(run_dir.join("trials")).map_err(|e| RunError::Io(run_dir.display().to_string(), e))?;

    let slots = doc.executor.parallelism;
    let t0 = Instant::now();
    let mut c = Coordinator {
        doc,
        space: doc.variables.clone(),
        opt,
        run_dir,
        opts,
        repeats: doc.executor.repeats,
        running: BTreeMap::new(),
        ledger: Vec::new(),
        events: Vec::new(),
        stop: None,
        aborted: false,
        fatal: None,
        last_checkpoint: None,
    };
    let (job_tx, job_rx) = unbounded::<Job>();
    let (done_tx, done_rx) = unbounded::<Done>();
    std::thread::scope(|s| {
        for _ in 0..slots {
            let (jobs, done) = (job_rx.clone(), done_tx.clone());
            s.spawn(move || worker(evaluator, jobs, done, t0));
        }
        drop(done_tx);
        loop {
            let r = c.fill(slots, &job_tx);
            c.keep_first_error(r);
            if c.running.is_empty() {
                break;
            }
            let Ok(done) = done_rx.recv() else {
                c.keep_first_error(Err(RunError::State("workers stopped".into())));
                break;
            };
            let r = c.complete(done);
            c.keep_first_error(r);
        }
        drop(job_tx);
    });
    let wall_clock = t0.elapsed();

    let reference = if opts.reference && c.fatal.is_none() {
        match evaluate_reference(doc, evaluator, run_dir, settings.seed) {
            Ok(r) => r,
            Err(e) => {
                c.fatal = Some(e);
                None
            }
        }
    } else {
        None
    };

    let status = if c.aborted || c.fatal.is_some() {
        RunStatus::Aborted
    } else {
        RunStatus::Completed
    };
    let mut resolved = doc.clone();
    resolved.search = settings.clone();
    let manifest = build_manifest(resolved, &c.opt, c.ledger, status, c.stop, reference);
    let digest = write_manifest(&manifest, run_dir)?;
    if let Some(e) = c.fatal {
        return Err(e);
    }
    Ok(RunOutcome {
        manifest,
        digest,
        events: c.events,
        wall_clock,
        run_dir: run_dir.to_path_buf(),
    })
}

fn evaluate_reference(
    doc: &ProblemDocument,
    evaluator: &dyn Evaluator,
    run_dir: &Path,
    seed: u64,
) -> Result<Option<ReferenceRecord>, RunError> {
    let Some(config) = doc.baseline_config().map_err(|d| RunError::Config(d.to_string()))? else {
        return Ok(None);
    };
    let dir = run_dir.join("reference");
    let seeds = reference_seeds(seed, doc.executor.repeats);
    let mut trial = Trial::new(0, config, Phase::Initial, seeds, dir);
    prepare(&trial, &doc.variables)?;
    let job = Job {
        id: 0,
        config: trial.config.clone(),
        named: doc.variables.named(&trial.config),
        seeds: trial.seeds.clone(),
        dir: trial.dir.clone(),
    };
    trial.start()?;
    let evaluation = evaluator.evaluate(&job);
    trial.complete(evaluation.metrics, &doc.objective.metric)?;
    finalize(
        &trial,
        &Finalization {
            loss: f64::NAN,
            checkpoint: None,
            ledger: "",
            evaluator_log: &evaluation.log,
        },
    )?;
    Ok(Some(ReferenceRecord {
        configuration: trial.config,
        seeds: trial.seeds,
        metrics: trial.metrics,
        diagnostics: trial.diagnostics,
    }))
}

pub(crate) fn algorithm_record(settings: &crate::search::SearchSettings) -> AlgorithmRecord {
    match settings.algorithm {
        Algorithm::BoExtraTrees => AlgorithmRecord {
            name: settings.algorithm.name().into(),
            surrogate: Some("extra_trees".into()),
            ensemble: Some(settings.ensemble_params()),
            acquisition: Some(settings.acquisition.clone()),
        },
        _ => AlgorithmRecord {
            name: settings.algorithm.name().into(),
            surrogate: None,
            ensemble: None,
            acquisition: None,
        },
    }
}

fn build_manifest(
    document: ProblemDocument,
    opt: &Optimizer,
    mut ledger: Vec<LedgerEntry>,
    status: RunStatus,
    stop: Option<StopReason>,
    reference: Option<ReferenceRecord>,
) -> RunManifest {
    ledger.sort_by_key(|e| e.id);
    let settings = &document.search;
    let arity = document.variables.arity();
    let count = |p: Phase| ledger.iter().filter(|e| e.phase == p).count();
    let counts = Counts {
        initial: count(Phase::Initial),
        guided: count(Phase::Guided),
        failed: ledger.iter().filter(|e| e.status == TrialOutcome::Failed).count(),
        total: ledger.len(),
    };
    let best = opt.best().map(|o| BestRecord {
        id: o.id,
        configuration: o.config.clone(),
        objective: o.objective.expect("best succeeded"),
    });
    RunManifest {
        schema_version: SCHEMA_VERSION,
        tool: Tool::default(),
        status,
        stop_reason: stop,
        sampler: settings.sampler_spec(arity),
        algorithm: algorithm_record(settings),
        seeds: Seeds {
            run: settings.seed,
            sampler: settings.seed,
            trial_rule: "derive(run, 6, trial id, repeat index)".into(),
        },
        counts,
        ledger,
        best,
        reference,
        document,
    }
}

/// Evaluated points in tell order.
pub(crate) fn ledger_csv(space: &SearchSpace, ledger: &[LedgerEntry]) -> String {
    let mut out = String::from("completion_order,id,phase,status,objective,loss");
    for v in space.variables() {
        out.push(',');
        out.push_str(&v.name);
    }
    out.push('\n');
    for e in ledger {
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
            "{},{},{phase},{status},{objective},{:?}",
            e.completion_order, e.id, e.loss
        );
        for v in e.configuration.values() {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(trial: u64, a: u64, b: u64) -> SlotEvent {
        SlotEvent {
            trial,
            start: Duration::from_millis(a),
            end: Duration::from_millis(b),
        }
    }

    #[test]
    fn concurrency_of_touching_intervals() {
        assert_eq!(max_concurrency(&[]), 0);
        assert_eq!(max_concurrency(&[ev(0, 0, 10), ev(1, 10, 20)]), 1);
        assert_eq!(max_concurrency(&[ev(0, 0, 10), ev(1, 5, 20), ev(2, 6, 7)]), 3);
    }
}
