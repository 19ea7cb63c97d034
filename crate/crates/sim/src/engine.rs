//! Event loop of the closed-loop identification engine.
//!
//! Every client owns exactly one outstanding request, so requests are indexed by
//! client. CPU stages share `cpu_cores` under processor sharing and the extract
//! stage shares the GPU; both are tracked with a virtual-work clock so that a
//! completion is a heap pop rather than a sweep over all active tasks.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

use crate::params::{PoolConfig, SimParams, Task};
use crate::report::{MetricsReport, PoolBusy, Sample, TaskTimes};
use crate::SimError;

/// Request phases, in order. Waits are interleaved with the six tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    WaitHttp = 0,
    PreProcess,
    WaitDownload,
    Download,
    WaitExtract,
    Extract,
    Process,
    WaitSimsearch,
    Simsearch,
    PostProcess,
}

const PHASES: usize = 10;

impl Phase {
    fn task(self) -> Option<Task> {
        match self {
            Phase::PreProcess => Some(Task::PreProcess),
            Phase::Download => Some(Task::Download),
            Phase::Extract => Some(Task::Extract),
            Phase::Process => Some(Task::Process),
            Phase::Simsearch => Some(Task::Simsearch),
            Phase::PostProcess => Some(Task::PostProcess),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Key(f64);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

type EventHeap = BinaryHeap<Reverse<(Key, u64, usize)>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PoolKind {
    Http = 0,
    Download,
    Extract,
    Simsearch,
}

#[derive(Debug)]
struct Pool {
    size: u32,
    busy: u32,
    queue: VecDeque<usize>,
    /// Highest concurrent holder count observed.
    peak: u32,
}

impl Pool {
    fn new(size: u32) -> Self {
        Self {
            size,
            busy: 0,
            queue: VecDeque::new(),
            peak: 0,
        }
    }

    fn try_acquire(&mut self) -> bool {
        if self.busy < self.size {
            self.busy += 1;
            self.peak = self.peak.max(self.busy);
            true
        } else {
            false
        }
    }
}

/// A resource whose active jobs all progress at one shared rate.
#[derive(Debug, Default)]
struct SharedResource {
    virtual_work: f64,
    load: f64,
    active: usize,
    heap: EventHeap,
}

impl SharedResource {
    fn next_completion(&self, now: f64, rate: f64) -> f64 {
        match self.heap.peek() {
            Some(Reverse((Key(target), _, _))) => now + ((target - self.virtual_work).max(0.0) / rate),
            None => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone)]
struct Request {
    issued: f64,
    phase_start: f64,
    phase: Phase,
    durations: [f64; PHASES],
    work: [f64; 6],
}

#[derive(Debug, Clone, Copy)]
enum Mark {
    WindowStart,
    Sample,
    End,
}

#[derive(Debug, Default, Clone)]
struct Bucket {
    completions: u64,
    response_sum: f64,
    busy: [f64; 4],
    cpu: f64,
}

struct Engine<'a> {
    params: &'a SimParams,
    now: f64,
    seq: u64,
    pools: [Pool; 4],
    timed: EventHeap,
    cpu: SharedResource,
    gpu: SharedResource,
    requests: Vec<Request>,
    rng: ChaCha8Rng,
    jitter: Option<LogNormal<f64>>,
    window_start: f64,
    window_end: f64,
    // window aggregates
    completed: u64,
    response_sum: f64,
    phase_sums: [f64; PHASES],
    busy_integral: [f64; 4],
    cpu_integral: f64,
    bucket: Bucket,
    samples: Vec<Sample>,
}

impl<'a> Engine<'a> {
    fn new(pools: &PoolConfig, params: &'a SimParams) -> Self {
        let jitter = if params.jitter > 0.0 {
            let sigma2 = (1.0 + params.jitter * params.jitter).ln();
            Some(LogNormal::new(-sigma2 / 2.0, sigma2.sqrt()).expect("valid lognormal"))
        } else {
            None
        };
        let warmup = params.warmup();
        Self {
            params,
            now: 0.0,
            seq: 0,
            pools: [
                Pool::new(pools.http),
                Pool::new(pools.download),
                Pool::new(pools.extract),
                Pool::new(pools.simsearch),
            ],
            timed: BinaryHeap::new(),
            cpu: SharedResource::default(),
            gpu: SharedResource::default(),
            requests: Vec::with_capacity(params.clients as usize),
            rng: ChaCha8Rng::seed_from_u64(params.seed),
            jitter,
            window_start: warmup,
            window_end: warmup + params.duration,
            completed: 0,
            response_sum: 0.0,
            phase_sums: [0.0; PHASES],
            busy_integral: [0.0; 4],
            cpu_integral: 0.0,
            bucket: Bucket::default(),
            samples: Vec::new(),
        }
    }

    fn cpu_rate(&self) -> f64 {
        let cores = f64::from(self.params.cpu_cores);
        if self.cpu.load > cores {
            cores / self.cpu.load
        } else {
            1.0
        }
    }

    fn gpu_rate(&self) -> f64 {
        if self.gpu.active > 1 {
            self.params.gpu_efficiency.powi(self.gpu.active as i32 - 1)
        } else {
            1.0
        }
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    fn draw_work(&mut self) -> [f64; 6] {
        let base = self.params.service_times;
        let mut work = [0.0; 6];
        for task in Task::ALL {
            let factor = match &self.jitter {
                Some(dist) => dist.sample(&mut self.rng),
                None => 1.0,
            };
            work[task.index()] = base.get(task) * factor;
        }
        work
    }

    fn issue(&mut self, client: usize) {
        let work = self.draw_work();
        let request = Request {
            issued: self.now,
            phase_start: self.now,
            phase: Phase::WaitHttp,
            durations: [0.0; PHASES],
            work,
        };
        if client == self.requests.len() {
            self.requests.push(request);
        } else {
            self.requests[client] = request;
        }
        self.acquire(client, PoolKind::Http, Phase::PreProcess);
    }

    /// Ends the current phase of `client` and records its duration.
    fn end_phase(&mut self, client: usize) {
        let now = self.now;
        let req = &mut self.requests[client];
        req.durations[req.phase as usize] = now - req.phase_start;
        req.phase_start = now;
    }

    /// Requests a token; starts `next` immediately on success, queues otherwise.
    fn acquire(&mut self, client: usize, pool: PoolKind, next: Phase) {
        let wait = match pool {
            PoolKind::Http => Phase::WaitHttp,
            PoolKind::Download => Phase::WaitDownload,
            PoolKind::Extract => Phase::WaitExtract,
            PoolKind::Simsearch => Phase::WaitSimsearch,
        };
        self.requests[client].phase = wait;
        if self.pools[pool as usize].try_acquire() {
            self.end_phase(client);
            self.start(client, next);
        } else {
            self.pools[pool as usize].queue.push_back(client);
        }
    }

    /// Returns a token; hands it straight to the longest waiter, if any.
    fn release(&mut self, pool: PoolKind) {
        let p = &mut self.pools[pool as usize];
        debug_assert!(p.busy > 0);
        if let Some(waiter) = p.queue.pop_front() {
            // Token changes hands without ever becoming free.
            let next = match pool {
                PoolKind::Http => Phase::PreProcess,
                PoolKind::Download => Phase::Download,
                PoolKind::Extract => Phase::Extract,
                PoolKind::Simsearch => Phase::Simsearch,
            };
            self.end_phase(waiter);
            self.start(waiter, next);
        } else {
            p.busy -= 1;
        }
    }

    fn start(&mut self, client: usize, phase: Phase) {
        let task = phase.task().expect("start is only called for service phases");
        self.requests[client].phase = phase;
        let work = self.requests[client].work[task.index()];
        let seq = self.next_seq();
        if task == Task::Extract {
            let target = self.gpu.virtual_work + work;
            self.gpu.active += 1;
            self.gpu.heap.push(Reverse((Key(target), seq, client)));
        } else {
            let weight = self.params.cpu_weights.get(task);
            if weight > 0.0 {
                let target = self.cpu.virtual_work + work;
                self.cpu.active += 1;
                self.cpu.load += weight;
                self.cpu.heap.push(Reverse((Key(target), seq, client)));
            } else {
                self.timed.push(Reverse((Key(self.now + work), seq, client)));
            }
        }
    }

    /// A service phase of `client` has finished.
    fn finish(&mut self, client: usize) {
        let phase = self.requests[client].phase;
        self.end_phase(client);
        match phase {
            Phase::PreProcess => self.acquire(client, PoolKind::Download, Phase::Download),
            Phase::Download => {
                self.release(PoolKind::Download);
                self.acquire(client, PoolKind::Extract, Phase::Extract);
            }
            Phase::Extract => {
                self.release(PoolKind::Extract);
                self.start(client, Phase::Process);
            }
            Phase::Process => self.acquire(client, PoolKind::Simsearch, Phase::Simsearch),
            Phase::Simsearch => {
                self.release(PoolKind::Simsearch);
                self.start(client, Phase::PostProcess);
            }
            Phase::PostProcess => {
                self.release(PoolKind::Http);
                self.complete(client);
                self.issue(client);
            }
            _ => unreachable!("wait phases finish through pool hand-off"),
        }
    }

    fn complete(&mut self, client: usize) {
        if self.now < self.window_start || self.now > self.window_end {
            return;
        }
        let req = &self.requests[client];
        let response = self.now - req.issued;
        self.completed += 1;
        self.response_sum += response;
        for (sum, d) in self.phase_sums.iter_mut().zip(req.durations.iter()) {
            *sum += d;
        }
        self.bucket.completions += 1;
        self.bucket.response_sum += response;
    }

    /// Moves the clock forward, integrating utilisation inside the window.
    fn advance(&mut self, to: f64) {
        let dt = to - self.now;
        if dt <= 0.0 {
            return;
        }
        let cpu_rate = self.cpu_rate();
        let gpu_rate = self.gpu_rate();
        if self.cpu.active > 0 {
            self.cpu.virtual_work += cpu_rate * dt;
        }
        if self.gpu.active > 0 {
            self.gpu.virtual_work += gpu_rate * dt;
        }
        if self.now >= self.window_start && to <= self.window_end + 1e-9 {
            let cores = f64::from(self.params.cpu_cores);
            let cpu_used = self.cpu.load.min(cores) / cores;
            self.cpu_integral += cpu_used * dt;
            self.bucket.cpu += cpu_used * dt;
            for (i, pool) in self.pools.iter().enumerate() {
                let busy = f64::from(pool.busy) / f64::from(pool.size);
                self.busy_integral[i] += busy * dt;
                self.bucket.busy[i] += busy * dt;
            }
        }
        self.now = to;
    }

    fn close_bucket(&mut self) {
        let interval = self.params.sample_interval;
        let b = std::mem::take(&mut self.bucket);
        if b.completions == 0 {
            // No response finished in this interval; the sample is undefined.
            return;
        }
        self.samples.push(Sample {
            time: self.now - self.window_start,
            response_time: b.response_sum / b.completions as f64,
            throughput: b.completions as f64 / interval,
            cpu_utilization: b.cpu / interval,
            busy: PoolBusy::from_array(b.busy.map(|x| x / interval)),
        });
    }

    fn run(mut self, pools: &PoolConfig) -> MetricsReport {
        for client in 0..self.params.clients as usize {
            self.issue(client);
        }
        let marks = self.marks();
        let mut marks = marks.into_iter().peekable();
        loop {
            let t_timed = self.timed.peek().map_or(f64::INFINITY, |Reverse((Key(t), _, _))| *t);
            let t_cpu = self.cpu.next_completion(self.now, self.cpu_rate());
            let t_gpu = self.gpu.next_completion(self.now, self.gpu_rate());
            let t_event = t_timed.min(t_cpu).min(t_gpu);
            let (t_mark, mark) = *marks.peek().expect("end mark terminates the loop");
            if t_mark < t_event {
                marks.next();
                self.advance(t_mark);
                match mark {
                    Mark::WindowStart => {}
                    Mark::Sample => self.close_bucket(),
                    Mark::End => break,
                }
                continue;
            }
            self.advance(t_event);
            if t_event == t_timed {
                let Reverse((_, _, client)) = self.timed.pop().expect("peeked");
                self.finish(client);
            } else if t_event == t_cpu {
                let Reverse((Key(target), _, client)) = self.cpu.heap.pop().expect("peeked");
                self.cpu.virtual_work = self.cpu.virtual_work.max(target);
                let task = self.requests[client].phase.task().expect("service phase");
                let weight = self.params.cpu_weights.get(task);
                self.cpu.active -= 1;
                self.cpu.load = if self.cpu.active == 0 {
                    0.0
                } else {
                    (self.cpu.load - weight).max(0.0)
                };
                self.finish(client);
            } else {
                let Reverse((Key(target), _, client)) = self.gpu.heap.pop().expect("peeked");
                self.gpu.virtual_work = self.gpu.virtual_work.max(target);
                self.gpu.active -= 1;
                self.finish(client);
            }
            debug_assert!(self.pools.iter().all(|p| p.busy <= p.size));
        }
        self.into_report(pools)
    }

    /// Window start, one mark per sample boundary, and the end of the window.
    fn marks(&self) -> Vec<(f64, Mark)> {
        let interval = self.params.sample_interval;
        let n_samples = (self.params.duration / interval + 1e-9).floor() as u64;
        let mut marks = vec![(self.window_start, Mark::WindowStart)];
        marks.extend((1..=n_samples).map(|k| {
            let t = (self.window_start + k as f64 * interval).min(self.window_end);
            (t, Mark::Sample)
        }));
        marks.push((self.window_end, Mark::End));
        marks
    }

    fn into_report(self, pools: &PoolConfig) -> MetricsReport {
        let duration = self.params.duration;
        let n = self.completed.max(1) as f64;
        let mean = |i: usize| self.phase_sums[i] / n;
        let response_time_mean = if self.completed > 0 {
            self.response_sum / n
        } else {
            f64::NAN
        };
        let response_time_std = sample_std(self.samples.iter().map(|s| s.response_time));
        let task_times = TaskTimes {
            wait_http: mean(Phase::WaitHttp as usize),
            pre_process: mean(Phase::PreProcess as usize),
            wait_download: mean(Phase::WaitDownload as usize),
            download: mean(Phase::Download as usize),
            wait_extract: mean(Phase::WaitExtract as usize),
            extract: mean(Phase::Extract as usize),
            process: mean(Phase::Process as usize),
            wait_simsearch: mean(Phase::WaitSimsearch as usize),
            simsearch: mean(Phase::Simsearch as usize),
            post_process: mean(Phase::PostProcess as usize),
        };
        let peaks = PoolBusy::from_array(self.pools.each_ref().map(|p| f64::from(p.peak)));
        MetricsReport {
            response_time_mean,
            response_time_std,
            task_times,
            busy: PoolBusy::from_array(self.busy_integral.map(|x| (x / duration).clamp(0.0, 1.0))),
            cpu_utilization: (self.cpu_integral / duration).clamp(0.0, 1.0),
            gpu_mem: self.params.gpu_mem(pools.extract),
            completed: self.completed,
            throughput: self.completed as f64 / duration,
            peak_holders: peaks,
            samples: self.samples,
        }
    }
}

/// Sample standard deviation (n − 1); 0 for fewer than two values.
pub(crate) fn sample_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n < 2 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n as f64 - 1.0)).sqrt()
}

/// Runs one closed-loop simulation of the identification engine.
pub fn simulate(pools: &PoolConfig, params: &SimParams) -> Result<MetricsReport, SimError> {
    pools.validate()?;
    params.validate()?;
    Ok(Engine::new(pools, params).run(pools))
}
