use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use contune::archive::{RunStatus, TrialOutcome};
use contune::document::{parse_document, ProblemDocument};
use contune::problem::Configuration;
use contune::runner::{
    max_concurrency, run_cycle, run_cycle_with, trial_dir, FnEvaluator, Job, RunError, RunOptions, SimulatorEvaluator,
    CHECKPOINT_FILE, CONFIG_FILE, LEDGER_FILE, LOG_FILE, METRICS_FILE,
};
use contune::search::{Ask, Optimizer};
use contune::sim::SimParams;
use contune::surrogate::{fit, Dataset, EnsembleModel};

fn doc(budget: usize, parallelism: usize, extra: &str) -> ProblemDocument {
    let text = format!(
        r#"{{
  "variables": [
    {{"name": "x", "kind": "integer", "lower": 0, "upper": 10}},
    {{"name": "z", "kind": "real", "lower": -2, "upper": 2}}
  ],
  "objective": {{"metric": "y", "direction": "minimize"}},
  "search": {{"seed": 4, "budget": {budget}, "patience": 0{extra}}},
  "executor": {{"kind": "external_command", "parallelism": {parallelism}, "command": {{"template": "unused"}}}}
}}"#
    );
    parse_document(&text).unwrap()
}

fn bowl(job: &Job) -> Result<BTreeMap<String, f64>, String> {
    let (x, z) = (job.named["x"], job.named["z"]);
    let y = (x - 3.0).powi(2) + (z - 0.5).powi(2);
    Ok(BTreeMap::from([("y".to_string(), y), ("x_seen".to_string(), x)]))
}

fn run(doc: &ProblemDocument, opts: &RunOptions) -> (tempfile::TempDir, contune::runner::RunOutcome) {
    let dir = tempfile::tempdir().unwrap();
    let out = run_cycle_with(doc, &FnEvaluator::new(bowl, true), &dir.path().join("run"), opts).unwrap();
    (dir, out)
}

#[test]
fn sequential_run_follows_the_ask_tell_trace() {
    let d = doc(14, 1, "");
    let (_dir, out) = run(&d, &RunOptions::default());
    let mut opt = Optimizer::new(d.problem(), &d.search).unwrap();
    let mut expected = Vec::new();
    while let Ask::Point(p) = opt.ask().unwrap() {
        let named = d.variables.named(&p.config);
        let y = (named["x"] - 3.0).powi(2) + (named["z"] - 0.5).powi(2);
        opt.tell(p.id, y).unwrap();
        expected.push(p.config);
    }
    let got: Vec<Configuration> = out.manifest.ledger.iter().map(|e| e.configuration.clone()).collect();
    assert_eq!(got, expected);
    assert_eq!(out.manifest.status, RunStatus::Completed);
    assert_eq!(out.manifest.counts.total, 14);
}

#[test]
fn every_asked_point_is_told_once() {
    let d = doc(20, 3, "");
    let (_dir, out) = run(&d, &RunOptions::default());
    let m = &out.manifest;
    let mut orders: Vec<usize> = m.ledger.iter().map(|e| e.completion_order).collect();
    orders.sort_unstable();
    assert_eq!(orders, (0..20).collect::<Vec<_>>());
    for (i, e) in m.ledger.iter().enumerate() {
        assert_eq!(e.id, i as u64);
        assert!(e.asked_after <= e.completion_order);
    }
    m.check().unwrap();
    assert!(max_concurrency(&out.events) <= 3);
}

#[test]
fn slots_overlap_without_exceeding_parallelism() {
    let d = doc(16, 4, "");
    let slow = FnEvaluator::new(
        |job: &Job| {
            std::thread::sleep(Duration::from_millis(50));
            bowl(job)
        },
        false,
    );
    let dir = tempfile::tempdir().unwrap();
    let out = run_cycle_with(&d, &slow, dir.path(), &RunOptions::default()).unwrap();
    assert_eq!(max_concurrency(&out.events), 4);
    assert!(out.wall_clock <= Duration::from_millis(300), "{:?}", out.wall_clock);
}

#[test]
fn trial_directories_hold_every_artifact() {
    let d = doc(9, 1, "");
    let (dir, out) = run(&d, &RunOptions::default());
    let run_dir = dir.path().join("run");
    for e in &out.manifest.ledger {
        let t = trial_dir(&run_dir, e.id);
        for f in [CONFIG_FILE, METRICS_FILE, LEDGER_FILE, LOG_FILE] {
            assert!(t.join(f).is_file(), "{}/{f}", t.display());
        }
        let ledger = std::fs::read_to_string(t.join(LEDGER_FILE)).unwrap();
        assert_eq!(ledger.lines().count(), 1 + e.completion_order + 1);
    }
    let last = out.manifest.ledger.iter().max_by_key(|e| e.completion_order).unwrap();
    let ledger = std::fs::read_to_string(trial_dir(&run_dir, last.id).join(LEDGER_FILE)).unwrap();
    let rows: Vec<&str> = ledger.lines().skip(1).collect();
    assert_eq!(rows.len(), 9);
    for (k, row) in rows.iter().enumerate() {
        assert!(row.starts_with(&format!("{k},")));
    }
}

#[test]
fn checkpoint_matches_the_model_at_tell_time() {
    let d = doc(12, 1, "");
    let (dir, out) = run(&d, &RunOptions::default());
    let run_dir = dir.path().join("run");
    let mut ledger = out.manifest.ledger.clone();
    ledger.sort_by_key(|e| e.completion_order);
    let settings = d.search.resolve(&d.variables).unwrap();
    for k in [2usize, 7, 11] {
        let rows = ledger[..=k].iter().map(|e| (e.configuration.values().to_vec(), e.loss));
        let model = fit(&Dataset::from_rows(2, rows).unwrap(), &settings.ensemble_params()).unwrap();
        let saved = EnsembleModel::load(&trial_dir(&run_dir, ledger[k].id).join(CHECKPOINT_FILE)).unwrap();
        for x in 0..=10 {
            for z in [-2.0, -0.7, 0.0, 1.3, 2.0] {
                let p = [x as f64, z];
                assert_eq!(saved.predict(&p).unwrap(), model.predict(&p).unwrap());
            }
        }
    }
}

#[test]
fn thin_checkpoints_keep_only_the_last() {
    let d = doc(10, 1, "");
    let (dir, _) = run(
        &d,
        &RunOptions {
            thin_checkpoints: true,
            ..RunOptions::default()
        },
    );
    let trials = dir.path().join("run/trials");
    let count = std::fs::read_dir(&trials)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().join(CHECKPOINT_FILE).exists())
        .count();
    assert_eq!(count, 1);
}

#[test]
fn failures_are_penalized_and_logged() {
    let d = doc(12, 2, "");
    let flaky = FnEvaluator::new(
        |job: &Job| {
            if job.named["x"] >= 8.0 {
                Err("crashed on purpose".into())
            } else {
                bowl(job)
            }
        },
        true,
    );
    let dir = tempfile::tempdir().unwrap();
    let out = run_cycle_with(&d, &flaky, dir.path(), &RunOptions::default()).unwrap();
    let failed: Vec<_> = out
        .manifest
        .ledger
        .iter()
        .filter(|e| e.status == TrialOutcome::Failed)
        .collect();
    assert!(!failed.is_empty());
    assert_eq!(out.manifest.counts.failed, failed.len());
    for e in failed {
        assert!(e.objective.is_none());
        let worst = out
            .manifest
            .ledger
            .iter()
            .filter(|o| o.completion_order < e.completion_order && o.status == TrialOutcome::Done)
            .map(|o| o.loss)
            .fold(f64::NEG_INFINITY, f64::max);
        if worst.is_finite() {
            assert!(e.loss > worst);
        }
        let log = std::fs::read_to_string(trial_dir(dir.path(), e.id).join(LOG_FILE)).unwrap();
        assert!(log.contains("crashed on purpose"));
        assert!(log.contains(&format!("{:?}", e.loss)));
    }
}

#[test]
fn violated_constraints_fail_the_trial() {
    let text = r#"{
  "variables": [{"name": "x", "kind": "integer", "lower": 0, "upper": 10}],
  "objective": {"metric": "y", "direction": "minimize"},
  "constraints": [{"name": "cap", "kind": "inequality", "expression": {"terms": {"y": 1}, "constant": -20}}],
  "search": {"budget": 11, "patience": 0},
  "executor": {"kind": "external_command", "command": {"template": "unused"}}
}"#;
    let d = parse_document(text).unwrap();
    let e = FnEvaluator::new(
        |job: &Job| Ok(BTreeMap::from([("y".to_string(), job.named["x"] * 3.0)])),
        true,
    );
    let dir = tempfile::tempdir().unwrap();
    let out = run_cycle_with(&d, &e, dir.path(), &RunOptions::default()).unwrap();
    for entry in &out.manifest.ledger {
        let over = entry.configuration.values()[0] * 3.0 > 20.0;
        assert_eq!(entry.status == TrialOutcome::Failed, over, "{entry:?}");
        if over {
            assert!(entry.diagnostics.as_deref().unwrap().contains("cap"));
        }
    }
}

#[test]
fn abort_drains_and_marks_the_manifest() {
    let d = doc(20, 1, "");
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    let e = FnEvaluator::new(
        move |job: &Job| {
            if job.id == 2 {
                f.store(true, Ordering::SeqCst);
            }
            bowl(job)
        },
        true,
    );
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        abort: Some(flag),
        ..RunOptions::default()
    };
    let out = run_cycle_with(&d, &e, dir.path(), &opts).unwrap();
    assert_eq!(out.manifest.status, RunStatus::Aborted);
    assert_eq!(out.manifest.ledger.len(), 3);
    for e in &out.manifest.ledger {
        assert!(trial_dir(dir.path(), e.id).join(METRICS_FILE).is_file());
    }
}

#[test]
fn occupied_run_directory_is_refused() {
    let d = doc(5, 1, "");
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("keep"), "x").unwrap();
    let err = run_cycle_with(&d, &FnEvaluator::new(bowl, true), dir.path(), &RunOptions::default()).unwrap_err();
    assert!(matches!(err, RunError::RunDirInUse(_)));
    let names: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(names, ["keep"]);
}

#[test]
fn external_command_run() {
    let text = r#"{
  "variables": [{"name": "x", "kind": "integer", "lower": 0, "upper": 6}],
  "objective": {"metric": "y", "direction": "maximize"},
  "search": {"budget": 7, "patience": 0, "seed": 2},
  "executor": {"kind": "external_command", "parallelism": 2,
               "command": {"template": "echo y=$(( {x} * (6 - {x}) )) > metrics", "timeout": 10}}
}"#;
    let d = parse_document(text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = run_cycle(&d, dir.path(), &RunOptions::default()).unwrap();
    let best = out.manifest.best.unwrap();
    assert_eq!(best.objective, 9.0);
    assert_eq!(best.configuration, Configuration::new(vec![3.0]));
}

#[test]
fn baseline_trial_over_seven_repeats_pools_966_samples() {
    let text = contune::scenario::plantnet_source();
    let d = parse_document(text).unwrap();
    let sim = SimulatorEvaluator::new(&d.variables, d.executor.simulator.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let config = d.baseline_config().unwrap().unwrap();
    let job = Job {
        id: 0,
        named: d.variables.named(&config),
        config,
        seeds: contune::runner::trial_seeds(0, 0, 7),
        dir: dir.path().to_path_buf(),
    };
    let metrics = contune::runner::Evaluator::evaluate(&sim, &job).metrics.unwrap();
    assert_eq!(metrics["samples"], 966.0);
    assert!(metrics["response_time_mean"] > 0.0);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 7);
}

#[test]
fn reference_is_evaluated_on_request() {
    let mut d = parse_document(contune::scenario::plantnet_source()).unwrap();
    d.search.budget = 3;
    d.executor.repeats = 1;
    d.executor.simulator = SimParams {
        duration: 60.0,
        clients: 20,
        ..d.executor.simulator.clone()
    };
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions {
        reference: true,
        ..RunOptions::default()
    };
    let out = run_cycle(&d, dir.path(), &opts).unwrap();
    let r = out.manifest.reference.unwrap();
    assert_eq!(r.configuration.values(), [40.0, 40.0, 7.0, 40.0]);
    assert!(r.metrics.contains_key("response_time_mean"));
    assert!(dir.path().join("reference").join(METRICS_FILE).is_file());
}
