use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Mean time spent per request in each phase, in seconds.
///
/// `wait_http` is the time a request queues before the engine admits it; the
/// other nine fields follow the engine's processing steps.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TaskTimes {
    pub wait_http: f64,
    pub pre_process: f64,
    pub wait_download: f64,
    pub download: f64,
    pub wait_extract: f64,
    pub extract: f64,
    pub process: f64,
    pub wait_simsearch: f64,
    pub simsearch: f64,
    pub post_process: f64,
}

impl TaskTimes {
    pub fn entries(&self) -> [(&'static str, f64); 10] {
        [
            ("wait_http", self.wait_http),
            ("pre_process", self.pre_process),
            ("wait_download", self.wait_download),
            ("download", self.download),
            ("wait_extract", self.wait_extract),
            ("extract", self.extract),
            ("process", self.process),
            ("wait_simsearch", self.wait_simsearch),
            ("simsearch", self.simsearch),
            ("post_process", self.post_process),
        ]
    }
}

/// One value per thread pool.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoolBusy {
    pub http: f64,
    pub download: f64,
    pub extract: f64,
    pub simsearch: f64,
}

impl PoolBusy {
    pub(crate) fn from_array(a: [f64; 4]) -> Self {
        Self {
            http: a[0],
            download: a[1],
            extract: a[2],
            simsearch: a[3],
        }
    }

    pub fn entries(&self) -> [(&'static str, f64); 4] {
        [
            ("http", self.http),
            ("download", self.download),
            ("extract", self.extract),
            ("simsearch", self.simsearch),
        ]
    }
}

/// Metrics of one sampling interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// End of the interval, seconds since the measured window opened.
    pub time: f64,
    pub response_time: f64,
    pub throughput: f64,
    pub cpu_utilization: f64,
    pub busy: PoolBusy,
}

impl Sample {
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![
            ("response_time", self.response_time),
            ("throughput", self.throughput),
            ("cpu_utilization", self.cpu_utilization),
        ];
        for (pool, v) in self.busy.entries() {
            out.push((busy_key(pool), v));
        }
        out
    }
}

fn busy_key(pool: &str) -> &'static str {
    match pool {
        "http" => "http_busy",
        "download" => "download_busy",
        "extract" => "extract_busy",
        _ => "simsearch_busy",
    }
}

/// Aggregates of one simulation run over its measured window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean response time of requests completed in the window.
    pub response_time_mean: f64,
    /// Standard deviation of the per-interval response-time samples.
    pub response_time_std: f64,
    pub task_times: TaskTimes,
    /// Time-averaged fraction of each pool's tokens held.
    pub busy: PoolBusy,
    pub cpu_utilization: f64,
    pub gpu_mem: f64,
    pub completed: u64,
    /// Completed requests per second.
    pub throughput: f64,
    /// Highest number of simultaneous token holders seen per pool.
    pub peak_holders: PoolBusy,
    pub samples: Vec<Sample>,
}

impl MetricsReport {
    /// Flat `name → value` view used by the runner's `metrics` files.
    pub fn to_metrics(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("response_time_mean".to_string(), self.response_time_mean);
        m.insert("response_time_std".to_string(), self.response_time_std);
        for (name, v) in self.task_times.entries() {
            m.insert(format!("{name}_time"), v);
        }
        for (pool, v) in self.busy.entries() {
            m.insert(busy_key(pool).to_string(), v);
        }
        m.insert("cpu_utilization".to_string(), self.cpu_utilization);
        m.insert("gpu_mem".to_string(), self.gpu_mem);
        m.insert("completed".to_string(), self.completed as f64);
        m.insert("throughput".to_string(), self.throughput);
        m.insert("samples".to_string(), self.samples.len() as f64);
        m
    }

    /// Long-format time series: `timestamp,metric,value`.
    pub fn samples_csv(&self) -> String {
        let mut out = String::from("timestamp,metric,value\n");
        for s in &self.samples {
            for (name, v) in s.entries() {
                let _ = writeln!(out, "{},{},{}", s.time, name, v);
            }
        }
        out
    }
}
