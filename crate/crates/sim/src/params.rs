use serde::{Deserialize, Serialize};

use crate::SimError;

/// Thread-pool sizes of the identification engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    /// Simultaneous requests being processed.
    pub http: u32,
    /// Simultaneous images being downloaded.
    pub download: u32,
    /// Simultaneous inferences on the GPU.
    pub extract: u32,
    /// Simultaneous similarity searches.
    pub simsearch: u32,
}

impl PoolConfig {
    /// Production configuration (40, 40, 7, 40).
    pub const BASELINE: PoolConfig = PoolConfig {
        http: 40,
        download: 40,
        extract: 7,
        simsearch: 40,
    };

    pub fn new(http: u32, download: u32, extract: u32, simsearch: u32) -> Self {
        Self {
            http,
            download,
            extract,
            simsearch,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (name, size) in [
            ("http", self.http),
            ("download", self.download),
            ("extract", self.extract),
            ("simsearch", self.simsearch),
        ] {
            if size == 0 {
                return Err(SimError::InvalidPool(name));
            }
        }
        Ok(())
    }
}

/// The six service stages of a request, in pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Task {
    PreProcess,
    Download,
    Extract,
    Process,
    Simsearch,
    PostProcess,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::PreProcess,
        Task::Download,
        Task::Extract,
        Task::Process,
        Task::Simsearch,
        Task::PostProcess,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::PreProcess => "pre_process",
            Task::Download => "download",
            Task::Extract => "extract",
            Task::Process => "process",
            Task::Simsearch => "simsearch",
            Task::PostProcess => "post_process",
        }
    }
}

/// One number per [`Task`]. Used both for base service times (seconds) and CPU weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerTask {
    pub pre_process: f64,
    pub download: f64,
    pub extract: f64,
    pub process: f64,
    pub simsearch: f64,
    pub post_process: f64,
}

impl PerTask {
    pub fn get(&self, task: Task) -> f64 {
        match task {
            Task::PreProcess => self.pre_process,
            Task::Download => self.download,
            Task::Extract => self.extract,
            Task::Process => self.process,
            Task::Simsearch => self.simsearch,
            Task::PostProcess => self.post_process,
        }
    }

    pub fn set(&mut self, task: Task, value: f64) {
        match task {
            Task::PreProcess => self.pre_process = value,
            Task::Download => self.download = value,
            Task::Extract => self.extract = value,
            Task::Process => self.process = value,
            Task::Simsearch => self.simsearch = value,
            Task::PostProcess => self.post_process = value,
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        Task::ALL.map(|t| self.get(t))
    }

    pub fn max(&self) -> f64 {
        self.to_array().into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.to_array().into_iter().sum()
    }
}

impl Default for PerTask {
    /// Hand-set starting point for calibration; see `scenarios/` for fitted values.
    fn default() -> Self {
        Self {
            pre_process: 0.03,
            download: 0.05,
            extract: 0.168,
            process: 0.06,
            simsearch: 0.98,
            post_process: 0.03,
        }
    }
}

/// Which tasks compete for CPU cores. Extract always runs on the GPU.
pub fn default_cpu_weights() -> PerTask {
    PerTask {
        pre_process: 1.0,
        download: 0.0,
        extract: 0.0,
        process: 1.0,
        simsearch: 1.0,
        post_process: 1.0,
    }
}

/// Simulator calibration and workload parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimParams {
    #[serde(default = "defaults::cpu_cores")]
    pub cpu_cores: u32,
    /// Closed-loop concurrent requesters.
    #[serde(default = "defaults::clients")]
    pub clients: u32,
    /// Measured period in seconds (warmup is simulated before it).
    #[serde(default = "defaults::duration")]
    pub duration: f64,
    #[serde(default = "defaults::sample_interval")]
    pub sample_interval: f64,
    /// Warmup length as a fraction of `duration`, excluded from every aggregate.
    #[serde(default = "defaults::warmup_fraction")]
    pub warmup_fraction: f64,
    #[serde(default)]
    pub service_times: PerTask,
    #[serde(default = "default_cpu_weights")]
    pub cpu_weights: PerTask,
    /// Per-inference rate multiplier per additional concurrent inference.
    #[serde(default = "defaults::gpu_efficiency")]
    pub gpu_efficiency: f64,
    #[serde(default = "defaults::gpu_mem_base")]
    pub gpu_mem_base: f64,
    #[serde(default = "defaults::gpu_mem_per_thread")]
    pub gpu_mem_per_thread: f64,
    /// Coefficient of variation of the lognormal service-time multiplier.
    #[serde(default = "defaults::jitter")]
    pub jitter: f64,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn cpu_cores() -> u32 {
        40
    }
    pub fn clients() -> u32 {
        80
    }
    pub fn duration() -> f64 {
        1380.0
    }
    pub fn sample_interval() -> f64 {
        10.0
    }
    pub fn warmup_fraction() -> f64 {
        0.1
    }
    pub fn gpu_efficiency() -> f64 {
        0.97
    }
    pub fn gpu_mem_base() -> f64 {
        0.9
    }
    pub fn gpu_mem_per_thread() -> f64 {
        1.3
    }
    pub fn jitter() -> f64 {
        0.1
    }
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            cpu_cores: defaults::cpu_cores(),
            clients: defaults::clients(),
            duration: defaults::duration(),
            sample_interval: defaults::sample_interval(),
            warmup_fraction: defaults::warmup_fraction(),
            service_times: PerTask::default(),
            cpu_weights: default_cpu_weights(),
            gpu_efficiency: defaults::gpu_efficiency(),
            gpu_mem_base: defaults::gpu_mem_base(),
            gpu_mem_per_thread: defaults::gpu_mem_per_thread(),
            jitter: defaults::jitter(),
            seed: 0,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |what: &'static str| Err(SimError::InvalidParam(what));
        if self.cpu_cores == 0 {
            return bad("cpu_cores must be >= 1");
        }
        if self.clients == 0 {
            return bad("clients must be >= 1");
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return bad("duration must be > 0");
        }
        if !(self.sample_interval.is_finite() && self.sample_interval > 0.0) {
            return bad("sample_interval must be > 0");
        }
        if !(self.warmup_fraction.is_finite() && self.warmup_fraction >= 0.0) {
            return bad("warmup_fraction must be >= 0");
        }
        if self
            .service_times
            .to_array()
            .iter()
            .any(|t| !(t.is_finite() && *t > 0.0))
        {
            return bad("service times must be > 0");
        }
        if self
            .cpu_weights
            .to_array()
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return bad("cpu weights must be >= 0");
        }
        if self.cpu_weights.extract != 0.0 {
            return bad("extract runs on the GPU; its cpu weight must be 0");
        }
        if !(self.gpu_efficiency > 0.0 && self.gpu_efficiency <= 1.0) {
            return bad("gpu_efficiency must lie in (0, 1]");
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return bad("jitter must be >= 0");
        }
        if !(self.gpu_mem_base.is_finite() && self.gpu_mem_per_thread.is_finite()) {
            return bad("gpu memory parameters must be finite");
        }
        Ok(())
    }

    pub fn warmup(&self) -> f64 {
        self.duration * self.warmup_fraction
    }

    /// GPU memory for a given extract pool size, in gigabytes.
    pub fn gpu_mem(&self, extract: u32) -> f64 {
        self.gpu_mem_base + self.gpu_mem_per_thread * f64::from(extract)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        SimParams::default().validate().unwrap();
        PoolConfig::BASELINE.validate().unwrap();
    }

    #[test]
    fn per_task_accessors_agree() {
        let mut t = PerTask::default();
        for (i, task) in Task::ALL.into_iter().enumerate() {
            t.set(task, i as f64 + 1.0);
            assert_eq!(t.get(task), i as f64 + 1.0);
            assert_eq!(task.index(), i);
        }
        assert_eq!(t.sum(), 21.0);
        assert_eq!(t.max(), 6.0);
    }

    #[test]
    fn zero_service_time_is_invalid() {
        let mut p = SimParams::default();
        p.service_times.set(Task::Extract, 0.0);
        assert!(p.validate().is_err());
    }

    #[test]
    fn omitted_fields_take_defaults() {
        let p: SimParams = serde_json::from_str(r#"{"clients": 120}"#).unwrap();
        assert_eq!(p.clients, 120);
        assert_eq!(p.duration, 1380.0);
        assert!(serde_json::from_str::<SimParams>(r#"{"cores": 2}"#).is_err());
    }
}
