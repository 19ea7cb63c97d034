use contune_sim::{
    calibrate, simulate, CalibrationOptions, CalibrationTarget, PerTask, PoolConfig, SimError, SimParams,
};
use proptest::prelude::*;

fn times(pre: f64, download: f64, extract: f64, process: f64, simsearch: f64, post: f64) -> PerTask {
    PerTask {
        pre_process: pre,
        download,
        extract,
        process,
        simsearch,
        post_process: post,
    }
}

fn exact(clients: u32, service_times: PerTask) -> SimParams {
    SimParams {
        clients,
        cpu_cores: 1000,
        jitter: 0.0,
        duration: 600.0,
        service_times,
        ..SimParams::default()
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1e-12)
}

#[test]
fn same_seed_same_report() {
    let p = SimParams {
        duration: 200.0,
        seed: 9,
        ..SimParams::default()
    };
    let a = simulate(&PoolConfig::BASELINE, &p).unwrap();
    let b = simulate(&PoolConfig::BASELINE, &p).unwrap();
    assert_eq!(a, b);
    let c = simulate(&PoolConfig::BASELINE, &SimParams { seed: 10, ..p }).unwrap();
    assert_ne!(a.response_time_mean, c.response_time_mean);
}

#[test]
fn single_client_sees_no_contention() {
    let st = times(0.03, 0.05, 0.2, 0.06, 0.9, 0.03);
    let r = simulate(&PoolConfig::new(1, 1, 1, 1), &exact(1, st)).unwrap();
    let cycle = st.sum();
    assert!(
        close(r.response_time_mean, cycle, 1e-9),
        "{} vs {cycle}",
        r.response_time_mean
    );
    let t = r.task_times;
    for wait in [t.wait_http, t.wait_download, t.wait_extract, t.wait_simsearch] {
        assert_eq!(wait, 0.0);
    }
    assert!(close(t.extract, 0.2, 1e-9));
    assert!(close(t.simsearch, 0.9, 1e-9));
    let tol = 2.0 * cycle / 600.0;
    assert!((r.busy.http - 1.0).abs() <= tol);
    assert!((r.busy.download - 0.05 / cycle).abs() <= tol);
    assert!((r.busy.extract - 0.2 / cycle).abs() <= tol);
    assert!((r.busy.simsearch - 0.9 / cycle).abs() <= tol);
}

// Two clients and one extract token: once warm, the token passes back and
// forth and every request waits for the rest of the other's inference, that
// is the extract time minus its own time away from the GPU.
#[test]
fn two_clients_on_one_extract_token_alternate() {
    let (extract, other) = (1.0, 0.01);
    let simsearch = 0.05;
    let st = times(other, other, extract, other, simsearch, other);
    let r = simulate(&PoolConfig::new(2, 2, 1, 2), &exact(2, st)).unwrap();
    let away = 4.0 * other + simsearch;
    assert!(
        close(r.task_times.wait_extract, extract - away, 1e-9),
        "{:?}",
        r.task_times
    );
    assert!(close(r.response_time_mean, 2.0 * extract, 1e-9));
    assert!(close(r.throughput, 1.0 / extract, 2e-3));
    assert!((r.busy.extract - 1.0).abs() < 2e-3);
}

#[test]
fn extract_bottleneck_bounds_throughput() {
    let st = times(0.01, 0.01, 1.0, 0.01, 0.01, 0.01);
    let params = SimParams {
        gpu_efficiency: 0.9,
        ..exact(80, st)
    };
    let r = simulate(&PoolConfig::new(60, 60, 3, 60), &params).unwrap();
    let bound = 3.0 * 0.9f64.powi(2) / 1.0;
    assert!(r.throughput <= bound * (1.0 + 1e-9), "{} > {bound}", r.throughput);
    assert!(r.throughput >= 0.95 * bound, "{} far below {bound}", r.throughput);
}

#[test]
fn gpu_memory_is_affine_in_extract_pool() {
    let p = SimParams {
        duration: 50.0,
        clients: 5,
        ..SimParams::default()
    };
    for e in 1..=9 {
        let r = simulate(&PoolConfig::new(40, 40, e, 40), &p).unwrap();
        assert_eq!(r.gpu_mem, p.gpu_mem_base + e as f64 * p.gpu_mem_per_thread);
    }
}

#[test]
fn littles_law_without_jitter() {
    let p = SimParams {
        jitter: 0.0,
        ..SimParams::default()
    };
    let r = simulate(&PoolConfig::BASELINE, &p).unwrap();
    let n = r.throughput * r.response_time_mean;
    assert!(close(n, 80.0, 0.02), "{n}");
}

// Around (54, 54, 7, 53) the engine admits enough requests to load the CPU.
fn around_optimum(extract: u32) -> PoolConfig {
    PoolConfig::new(54, 54, extract, 53)
}

#[test]
fn more_extract_threads_relieve_the_extract_queue() {
    let p = SimParams {
        jitter: 0.0,
        ..SimParams::default()
    };
    let waits: Vec<f64> = (1..=9)
        .map(|e| simulate(&around_optimum(e), &p).unwrap().task_times.wait_extract)
        .collect();
    for w in waits.windows(2) {
        assert!(w[1] <= w[0], "{waits:?}");
    }
}

#[test]
fn extract_concurrency_slows_simsearch() {
    let p = SimParams {
        jitter: 0.0,
        ..SimParams::default()
    };
    let simsearch = |e| simulate(&around_optimum(e), &p).unwrap().task_times.simsearch;
    let base = simsearch(7);
    assert!(simsearch(8) > base);
    assert!(simsearch(9) > base);
}

#[test]
fn warmup_is_prepended_to_the_measured_window() {
    let r = simulate(&PoolConfig::BASELINE, &SimParams::default()).unwrap();
    assert_eq!(r.samples.len(), 138);
    assert_eq!(r.samples.last().unwrap().time, 1380.0);
    let csv = r.samples_csv();
    assert!(csv.starts_with("timestamp,metric,value\n"));
    assert_eq!(csv.lines().count(), 1 + 138 * 7);
}

#[test]
fn invalid_inputs_are_rejected() {
    assert_eq!(
        simulate(&PoolConfig::new(0, 1, 1, 1), &SimParams::default()),
        Err(SimError::InvalidPool("http"))
    );
    let p = SimParams {
        cpu_cores: 0,
        ..SimParams::default()
    };
    assert!(matches!(
        simulate(&PoolConfig::BASELINE, &p),
        Err(SimError::InvalidParam(_))
    ));
}

#[test]
fn calibration_starting_at_the_answer_stays_there() {
    let start = SimParams {
        duration: 100.0,
        jitter: 0.0,
        ..SimParams::default()
    };
    let target = simulate(&PoolConfig::BASELINE, &start).unwrap().response_time_mean;
    let targets = [CalibrationTarget {
        pools: PoolConfig::BASELINE,
        clients: 80,
        response_time: target,
    }];
    let fit = calibrate(&targets, &start, &CalibrationOptions::default()).unwrap();
    assert_eq!(fit.residuals[0].relative_error, 0.0);
    assert_eq!(fit.params, start);
    assert!(fit.converged);
}

#[test]
fn unreachable_targets_clamp_times() {
    let start = SimParams {
        duration: 50.0,
        clients: 2,
        jitter: 0.0,
        ..SimParams::default()
    };
    let targets = [CalibrationTarget {
        pools: PoolConfig::BASELINE,
        clients: 2,
        response_time: 1e-4,
    }];
    let opts = CalibrationOptions {
        max_sweeps: 400,
        ..CalibrationOptions::default()
    };
    let fit = calibrate(&targets, &start, &opts).unwrap();
    assert!(fit
        .params
        .service_times
        .to_array()
        .iter()
        .all(|&t| t >= opts.min_service_time));
    assert!(fit.residuals[0].relative_error > 1.0);
    assert!(matches!(calibrate(&[], &start, &opts), Err(SimError::NoTargets)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pools_never_overflow(
        http in 1u32..12, download in 1u32..12, extract in 1u32..6, simsearch in 1u32..12,
        clients in 1u32..30, seed in any::<u64>(), cores in 1u32..8, jitter in prop_oneof![Just(0.0), Just(0.1)],
    ) {
        let p = SimParams { clients, seed, jitter, cpu_cores: cores, duration: 60.0, ..SimParams::default() };
        let pools = PoolConfig::new(http, download, extract, simsearch);
        let r = simulate(&pools, &p).unwrap();
        let h = r.peak_holders;
        prop_assert!(h.http <= http as f64 && h.download <= download as f64);
        prop_assert!(h.extract <= extract as f64 && h.simsearch <= simsearch as f64);
        for (_, b) in r.busy.entries() {
            prop_assert!((0.0..=1.0).contains(&b));
        }
        prop_assert!((0.0..=1.0).contains(&r.cpu_utilization));
        for (name, t) in r.task_times.entries() {
            prop_assert!(t >= 0.0, "{} = {}", name, t);
        }
        if jitter == 0.0 && r.completed > 0 {
            prop_assert!(r.response_time_mean >= p.service_times.max());
        }
    }
}
