// SPDX-License-Identifier: Apache-2.0

//! Transcription batch workload: trace generation, the real-time-factor
//! duration model, and the event-driven batch experiment driver.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::accel::{occupancy_timeline, AccelError, Fleet, FleetConfig, OccupancySummary, SliceId};
use crate::queueing::{
    AdmissionHost, BaselinePodSet, PendingPod, QueueError, QueueState, QueueTopology, Resources, WorkloadEntry,
    WorkloadId, WorkloadSpec,
};
use crate::sim::{EventHandle, EventPayload, Kernel, Millis, RngStream, SimError};

pub const DEFAULT_CALIBRATION: &str = include_str!("../calibration/default.calib");

const MAX_TRACE_ATTEMPTS: usize = 10_000;

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("trace: {0}")]
    Trace(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("calibration line {line}: {msg}")]
    Calibration { line: usize, msg: String },
    #[error("calibration: {0}")]
    CalibrationInvariant(String),
    #[error("no calibration entry rtf.{class}.{device}")]
    MissingCalibration { class: ModelClass, device: DeviceClass },
    #[error("batch configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Accel(#[from] AccelError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelClass {
    Medium,
    Large,
}

impl ModelClass {
    pub const ALL: [ModelClass; 2] = [ModelClass::Medium, ModelClass::Large];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelClass::Medium => "medium",
            ModelClass::Large => "large",
        }
    }
}

impl fmt::Display for ModelClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DeviceClass {
    Full,
    Mig,
}

impl DeviceClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            DeviceClass::Full => "full",
            DeviceClass::Mig => "mig",
        }
    }
}

impl fmt::Display for DeviceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-class value pair, used for profiles, priorities and queue bindings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerClass<T> {
    pub medium: T,
    pub large: T,
}

impl<T> PerClass<T> {
    pub fn get(&self, class: ModelClass) -> &T {
        match class {
            ModelClass::Medium => &self.medium,
            ModelClass::Large => &self.large,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SubmissionOrder {
    #[default]
    MediumFirst,
    LargeFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub job_id: String,
    pub model_class: ModelClass,
    pub audio_seconds: f64,
    pub submit_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassDistribution {
    pub mean_s: f64,
    pub sd_s: f64,
    pub min_s: f64,
    pub max_s: f64,
}

impl ClassDistribution {
    fn validate(&self, class: ModelClass) -> Result<(), BatchError> {
        let ok = self.mean_s > 0.0
            && self.sd_s > 0.0
            && self.min_s > 0.0
            && self.min_s <= self.mean_s
            && self.mean_s <= self.max_s;
        if ok {
            Ok(())
        } else {
            Err(BatchError::Trace(format!(
                "{class} distribution needs 0 < min <= mean <= max and sd > 0"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum TraceSpec {
    Synthetic {
        seed: u64,
        jobs_per_class: usize,
        medium: ClassDistribution,
        large: ClassDistribution,
    },
    File {
        path: PathBuf,
        jobs_per_class: usize,
    },
}

/// Draw `n` clipped log-normal samples whose mean lies within 10% of the target.
fn synthetic_class(dist: &ClassDistribution, n: usize, rng: &mut RngStream) -> Result<Vec<f64>, BatchError> {
    let s2 = (1.0 + (dist.sd_s / dist.mean_s).powi(2)).ln();
    let mu = dist.mean_s.ln() - s2 / 2.0;
    let ln = LogNormal::new(mu, s2.sqrt()).map_err(|e| BatchError::Trace(e.to_string()))?;
    for _ in 0..MAX_TRACE_ATTEMPTS {
        let xs: Vec<f64> = (0..n)
            .map(|_| ln.sample(rng.rng()).clamp(dist.min_s, dist.max_s))
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        if (mean - dist.mean_s).abs() <= 0.1 * dist.mean_s {
            return Ok(xs);
        }
    }
    Err(BatchError::Trace(format!(
        "could not draw a sample within 10% of mean {} after {MAX_TRACE_ATTEMPTS} attempts",
        dist.mean_s
    )))
}

#[derive(Debug, Deserialize)]
struct TraceRow {
    job_id: String,
    model_class: ModelClass,
    audio_seconds: f64,
}

fn read_trace_file(path: &Path, jobs_per_class: usize) -> Result<PerClass<Vec<(String, f64)>>, BatchError> {
    let csv_err = |source| BatchError::Csv {
        path: path.to_owned(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = PerClass {
        medium: Vec::new(),
        large: Vec::new(),
    };
    for row in reader.deserialize() {
        let row: TraceRow = row.map_err(csv_err)?;
        if !(row.audio_seconds > 0.0 && row.audio_seconds.is_finite()) {
            return Err(BatchError::Trace(format!(
                "{}: job `{}` has non-positive duration {}",
                path.display(),
                row.job_id,
                row.audio_seconds
            )));
        }
        match row.model_class {
            ModelClass::Medium => out.medium.push((row.job_id, row.audio_seconds)),
            ModelClass::Large => out.large.push((row.job_id, row.audio_seconds)),
        }
    }
    for class in ModelClass::ALL {
        let n = out.get(class).len();
        if n != jobs_per_class {
            return Err(BatchError::Trace(format!(
                "{}: expected {jobs_per_class} {class} rows, found {n}",
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Build the job list in submission order.
pub fn generate_trace(spec: &TraceSpec, order: SubmissionOrder) -> Result<Vec<JobSpec>, BatchError> {
    let per_class = match spec {
        TraceSpec::Synthetic {
            seed,
            jobs_per_class,
            medium,
            large,
        } => {
            if *jobs_per_class == 0 {
                return Err(BatchError::Trace("jobs_per_class must be at least 1".into()));
            }
            medium.validate(ModelClass::Medium)?;
            large.validate(ModelClass::Large)?;
            let m = synthetic_class(medium, *jobs_per_class, &mut RngStream::new(*seed, "trace.medium"))?;
            let l = synthetic_class(large, *jobs_per_class, &mut RngStream::new(*seed, "trace.large"))?;
            let name = |c: &str, v: Vec<f64>| {
                v.into_iter()
                    .enumerate()
                    .map(|(i, a)| (format!("{c}-{i}"), a))
                    .collect::<Vec<_>>()
            };
            PerClass {
                medium: name("medium", m),
                large: name("large", l),
            }
        }
        TraceSpec::File { path, jobs_per_class } => read_trace_file(path, *jobs_per_class)?,
    };
    let (first, second) = match order {
        SubmissionOrder::MediumFirst => (ModelClass::Medium, ModelClass::Large),
        SubmissionOrder::LargeFirst => (ModelClass::Large, ModelClass::Medium),
    };
    let mut jobs = Vec::new();
    for i in 0..per_class.medium.len() {
        for class in [first, second] {
            let (id, audio) = &per_class.get(class)[i];
            jobs.push(JobSpec {
                job_id: id.clone(),
                model_class: class,
                audio_seconds: *audio,
                submit_index: jobs.len(),
            });
        }
    }
    Ok(jobs)
}

/// Real-time factors per (model class, device class) plus a per-job constant.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationParams {
    rtf: BTreeMap<(ModelClass, DeviceClass), f64>,
    pub startup_overhead_s: f64,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        Self::parse(DEFAULT_CALIBRATION).expect("shipped calibration parses")
    }
}

impl CalibrationParams {
    pub fn new(startup_overhead_s: f64) -> Self {
        Self {
            rtf: BTreeMap::new(),
            startup_overhead_s,
        }
    }

    pub fn with_rtf(mut self, class: ModelClass, device: DeviceClass, rtf: f64) -> Self {
        self.rtf.insert((class, device), rtf);
        self
    }

    /// Parse `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, BatchError> {
        let mut out = Self::new(0.0);
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| BatchError::Calibration { line: n + 1, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got `{line}`")))?;
            let key = key.trim();
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| err(format!("`{}` is not a number", value.trim())))?;
            if !(value.is_finite() && value >= 0.0) {
                return Err(err(format!("`{key}` must be a non-negative number")));
            }
            if key == "startup_overhead_s" {
                out.startup_overhead_s = value;
                continue;
            }
            let parts: Vec<&str> = key.split('.').collect();
            let (class, device) = match parts.as_slice() {
                ["rtf", c, d] => {
                    let class = match *c {
                        "medium" => ModelClass::Medium,
                        "large" => ModelClass::Large,
                        _ => return Err(err(format!("unknown model class in `{key}`"))),
                    };
                    let device = match *d {
                        "full" => DeviceClass::Full,
                        "mig" => DeviceClass::Mig,
                        _ => return Err(err(format!("unknown device class in `{key}`"))),
                    };
                    (class, device)
                }
                _ => return Err(err(format!("unknown key `{key}`"))),
            };
            if value == 0.0 {
                return Err(err(format!("`{key}` must be positive")));
            }
            out.rtf.insert((class, device), value);
        }
        out.validate()?;
        Ok(out)
    }

    pub fn from_file(path: &Path) -> Result<Self, BatchError> {
        let text = std::fs::read_to_string(path).map_err(|source| BatchError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Larger models are slower, and a MIG slice is slower than a whole device.
    pub fn validate(&self) -> Result<(), BatchError> {
        for d in [DeviceClass::Full, DeviceClass::Mig] {
            if let (Some(m), Some(l)) = (
                self.rtf.get(&(ModelClass::Medium, d)),
                self.rtf.get(&(ModelClass::Large, d)),
            ) {
                if l <= m {
                    return Err(BatchError::CalibrationInvariant(format!(
                        "rtf.large.{d} must exceed rtf.medium.{d}"
                    )));
                }
            }
        }
        for c in ModelClass::ALL {
            if let (Some(f), Some(m)) = (
                self.rtf.get(&(c, DeviceClass::Full)),
                self.rtf.get(&(c, DeviceClass::Mig)),
            ) {
                if m <= f {
                    return Err(BatchError::CalibrationInvariant(format!(
                        "rtf.{c}.mig must exceed rtf.{c}.full"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn rtf(&self, class: ModelClass, device: DeviceClass) -> Result<f64, BatchError> {
        self.rtf
            .get(&(class, device))
            .copied()
            .ok_or(BatchError::MissingCalibration { class, device })
    }

    /// Canonical text form; parsing it yields the same parameters.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for ((c, d), v) in &self.rtf {
            s.push_str(&format!("rtf.{c}.{d}={v}\n"));
        }
        s.push_str(&format!("startup_overhead_s={}\n", self.startup_overhead_s));
        s
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

pub fn exec_duration(job: &JobSpec, device: DeviceClass, calib: &CalibrationParams) -> Result<Millis, BatchError> {
    let rtf = calib.rtf(job.model_class, device)?;
    let secs = (job.audio_seconds * rtf + calib.startup_overhead_s).round();
    Ok(secs as Millis * 1000)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdmissionKind {
    /// Pods exist from submission; the default scheduler picks at random.
    Baseline,
    Kueue,
}

fn default_local_queues() -> PerClass<String> {
    PerClass {
        medium: "lq-medium".into(),
        large: "lq-large".into(),
    }
}

fn default_priorities() -> PerClass<i32> {
    PerClass { medium: 0, large: 0 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchConfig {
    pub admission: AdmissionKind,
    #[serde(default)]
    pub submission_order: SubmissionOrder,
    #[serde(default)]
    pub submit_gap_ms: u64,
    pub profiles: PerClass<String>,
    #[serde(default = "default_priorities")]
    pub priorities: PerClass<i32>,
    #[serde(default = "default_local_queues")]
    pub local_queues: PerClass<String>,
    pub trace: TraceSpec,
}

impl BatchConfig {
    pub fn validate(&self, fleet: &FleetConfig, queues: Option<&QueueTopology>) -> Result<(), BatchError> {
        fleet.validate().map_err(BatchError::Config)?;
        for class in ModelClass::ALL {
            fleet
                .check_profile(self.profiles.get(class))
                .map_err(|e| BatchError::Config(format!("{class} jobs: {e}")))?;
        }
        match (self.admission, queues) {
            (AdmissionKind::Kueue, None) => {
                return Err(BatchError::Config("kueue admission requires a [queues] section".into()))
            }
            (AdmissionKind::Kueue, Some(q)) => {
                let state = q.build()?;
                // dry-run one submission per class so binding errors surface early
                let mut probe = state;
                for class in ModelClass::ALL {
                    let profile = fleet
                        .check_profile(self.profiles.get(class))
                        .map_err(BatchError::Config)?;
                    probe.submit(
                        WorkloadSpec {
                            job_id: format!("probe-{class}"),
                            priority: 0,
                            request: workload_request(profile.is_full(), profile.compute_units, profile.memory_units),
                        },
                        self.local_queues.get(class),
                        0,
                    )?;
                }
            }
            (AdmissionKind::Baseline, _) => {}
        }
        Ok(())
    }
}

/// Quota request for one job: a whole GPU, or the slice's unit counts.
pub fn workload_request(full: bool, compute_units: u32, memory_units: u32) -> Resources {
    if full {
        BTreeMap::from([("gpu".to_string(), 1)])
    } else {
        BTreeMap::from([
            ("compute-unit".to_string(), u64::from(compute_units)),
            ("memory-unit".to_string(), u64::from(memory_units)),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BatchEvent {
    JobCreated(usize),
    AdmitScan,
    JobFinished(usize),
}

/// Event payloads carry the job id for the dispatch log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tagged {
    pub event: BatchEvent,
    pub job_id: Option<String>,
}

impl EventPayload for Tagged {
    fn kind(&self) -> &'static str {
        match self.event {
            BatchEvent::JobCreated(_) => "job-created",
            BatchEvent::AdmitScan => "admit-scan",
            BatchEvent::JobFinished(_) => "job-finished",
        }
    }

    fn detail(&self) -> String {
        self.job_id.clone().unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobRecord {
    pub job_id: String,
    pub model_class: ModelClass,
    pub audio_seconds: f64,
    pub profile: String,
    pub created_at: Millis,
    pub admitted_at: Millis,
    pub pod_created_at: Millis,
    pub finished_at: Millis,
    pub restart_count: u32,
    /// Device time consumed by every attempt, including evicted ones.
    pub busy_ms: Millis,
}

impl JobRecord {
    pub fn queue_ms(&self) -> Millis {
        self.admitted_at - self.created_at
    }

    pub fn exec_ms(&self) -> Millis {
        self.finished_at - self.pod_created_at
    }

    pub fn completion_ms(&self) -> Millis {
        self.finished_at - self.created_at
    }
}

#[derive(Debug, Clone)]
pub struct BatchRun {
    pub seed: u64,
    pub jobs: Vec<JobRecord>,
    pub makespan_ms: Millis,
    pub peak_concurrency: u32,
    pub peak_stranded_compute: u32,
    pub occupancy: Option<OccupancySummary>,
    /// `(job_id, t)` for every admission (Kueue) or pod start (baseline), in order.
    pub start_order: Vec<(String, Millis)>,
    pub evictions: u32,
    pub dispatch_digest: String,
    pub dispatch_log: Vec<String>,
}

#[derive(Debug, Default)]
struct JobRun {
    created_at: Option<Millis>,
    admitted_at: Option<Millis>,
    pod_created_at: Option<Millis>,
    finished_at: Option<Millis>,
    restart_count: u32,
    slice: Option<SliceId>,
    finish: Option<EventHandle>,
    started_at: Option<Millis>,
    busy_ms: Millis,
}

struct Driver<'a> {
    trace: &'a [JobSpec],
    profiles: Vec<String>,
    devices: Vec<DeviceClass>,
    calib: &'a CalibrationParams,
    gap_ms: Millis,
    priorities: &'a PerClass<i32>,
    local_queues: &'a PerClass<String>,
    fleet: Fleet,
    queue: Option<QueueState>,
    pods: BaselinePodSet,
    rng: RngStream,
    jobs: Vec<JobRun>,
    scan_pending: bool,
    start_order: Vec<(String, Millis)>,
    evictions: u32,
}

fn tagged(event: BatchEvent, trace: &[JobSpec]) -> Tagged {
    let job_id = match event {
        BatchEvent::JobCreated(i) | BatchEvent::JobFinished(i) => Some(trace[i].job_id.clone()),
        BatchEvent::AdmitScan => None,
    };
    Tagged { event, job_id }
}

/// Placement and eviction callbacks used during a Kueue scan.
struct KueueHost<'d, 'a> {
    kernel: &'d mut Kernel<Tagged>,
    driver: &'d mut Driver<'a>,
    error: Option<BatchError>,
}

impl AdmissionHost for KueueHost<'_, '_> {
    fn try_place(&mut self, w: &WorkloadEntry) -> bool {
        let i = w.id.0;
        let now = self.kernel.now();
        match self.driver.fleet.allocate(&self.driver.profiles[i], &w.job_id, now) {
            Ok(slice) => {
                self.driver.jobs[i].slice = Some(slice);
                true
            }
            Err(AccelError::NoCapacity(_)) => false,
            Err(e) => {
                self.error.get_or_insert(e.into());
                false
            }
        }
    }

    fn release(&mut self, w: &WorkloadEntry) {
        let now = self.kernel.now();
        let job = &mut self.driver.jobs[w.id.0];
        if let Some(h) = job.finish.take() {
            self.kernel.cancel(h);
        }
        if let Some(start) = job.started_at.take() {
            job.busy_ms += now - start;
        }
        job.restart_count += 1;
        job.pod_created_at = None;
        job.admitted_at = None;
        if let Some(slice) = job.slice.take() {
            if let Err(e) = self.driver.fleet.free(slice, now) {
                self.error.get_or_insert(e.into());
            }
        }
        self.driver.evictions += 1;
    }
}

impl<'a> Driver<'a> {
    fn start_job(&mut self, kernel: &mut Kernel<Tagged>, i: usize) -> Result<(), BatchError> {
        let now = kernel.now();
        let d = exec_duration(&self.trace[i], self.devices[i], self.calib)?;
        let h = kernel.schedule(now + d, tagged(BatchEvent::JobFinished(i), self.trace))?;
        let job = &mut self.jobs[i];
        job.finish = Some(h);
        job.started_at = Some(now);
        self.start_order.push((self.trace[i].job_id.clone(), now));
        Ok(())
    }

    fn request_scan(&mut self, kernel: &mut Kernel<Tagged>) {
        if !self.scan_pending {
            self.scan_pending = true;
            kernel.schedule_in(0, tagged(BatchEvent::AdmitScan, self.trace));
        }
    }

    fn handle(&mut self, kernel: &mut Kernel<Tagged>, ev: Tagged) -> Result<(), BatchError> {
        let now = kernel.now();
        match ev.event {
            BatchEvent::JobCreated(i) => {
                let spec = &self.trace[i];
                self.jobs[i].created_at = Some(now);
                match self.queue.as_mut() {
                    Some(q) => {
                        let profile = self.fleet.profile(&self.profiles[i])?;
                        let request = workload_request(profile.is_full(), profile.compute_units, profile.memory_units);
                        let (id, _) = q.submit(
                            WorkloadSpec {
                                job_id: spec.job_id.clone(),
                                priority: *self.priorities.get(spec.model_class),
                                request,
                            },
                            self.local_queues.get(spec.model_class),
                            now,
                        )?;
                        debug_assert_eq!(id, WorkloadId(i));
                    }
                    None => self.pods.push(PendingPod {
                        job_index: i,
                        created_at: now,
                        submit_seq: i as u64,
                    }),
                }
                self.request_scan(kernel);
                if i + 1 < self.trace.len() {
                    kernel.schedule(now + self.gap_ms, tagged(BatchEvent::JobCreated(i + 1), self.trace))?;
                }
            }
            BatchEvent::AdmitScan => {
                self.scan_pending = false;
                if self.queue.is_some() {
                    self.kueue_scan(kernel)?;
                } else {
                    self.baseline_scan(kernel)?;
                }
            }
            BatchEvent::JobFinished(i) => {
                let job = &mut self.jobs[i];
                job.finish = None;
                job.finished_at = Some(now);
                if let Some(start) = job.started_at.take() {
                    job.busy_ms += now - start;
                }
                let slice = job.slice.take().ok_or_else(|| SimError::Invariant {
                    now,
                    what: format!("{} finished without a slice", self.trace[i].job_id),
                })?;
                self.fleet.free(slice, now)?;
                if let Some(q) = self.queue.as_mut() {
                    q.finish(WorkloadId(i), now)?;
                }
                self.request_scan(kernel);
            }
        }
        self.check(now)
    }

    fn kueue_scan(&mut self, kernel: &mut Kernel<Tagged>) -> Result<(), BatchError> {
        let now = kernel.now();
        let mut queue = self.queue.take().expect("kueue mode");
        let mut host = KueueHost {
            kernel,
            driver: self,
            error: None,
        };
        let outcome = queue.admit_scan(now, &mut host);
        if let Some(e) = host.error {
            return Err(e);
        }
        self.queue = Some(queue);
        for id in outcome.admitted {
            let i = id.0;
            self.queue.as_mut().expect("kueue mode").mark_running(id)?;
            self.jobs[i].admitted_at = Some(now);
            self.jobs[i].pod_created_at = Some(now);
            self.start_job(kernel, i)?;
        }
        Ok(())
    }

    fn baseline_scan(&mut self, kernel: &mut Kernel<Tagged>) -> Result<(), BatchError> {
        let now = kernel.now();
        loop {
            let fleet = &self.fleet;
            let profiles = &self.profiles;
            let Some(pod) = self
                .pods
                .pick_feasible(&mut self.rng, |p| fleet.can_place_anywhere(&profiles[p.job_index]))
            else {
                break;
            };
            let i = pod.job_index;
            let slice = self.fleet.allocate(&self.profiles[i], &self.trace[i].job_id, now)?;
            let job = &mut self.jobs[i];
            job.slice = Some(slice);
            job.admitted_at = Some(pod.created_at);
            job.pod_created_at = Some(pod.created_at);
            self.start_job(kernel, i)?;
        }
        Ok(())
    }

    fn check(&self, now: Millis) -> Result<(), BatchError> {
        self.fleet
            .check_invariants()
            .map_err(|what| SimError::Invariant { now, what })?;
        if let Some(q) = &self.queue {
            q.check_invariants().map_err(|what| SimError::Invariant { now, what })?;
        }
        Ok(())
    }
}

/// Run one seed of a batch experiment over a pre-generated trace.
pub fn run_batch(
    cfg: &BatchConfig,
    fleet_cfg: &FleetConfig,
    queues: Option<&QueueTopology>,
    calib: &CalibrationParams,
    trace: &[JobSpec],
    seed: u64,
    emit_dispatch_log: bool,
) -> Result<BatchRun, BatchError> {
    cfg.validate(fleet_cfg, queues)?;
    if trace.is_empty() {
        return Err(BatchError::Trace("empty trace".into()));
    }
    let fleet = fleet_cfg.build();
    let mut profiles = Vec::with_capacity(trace.len());
    let mut devices = Vec::with_capacity(trace.len());
    for job in trace {
        let name = cfg.profiles.get(job.model_class);
        let p = fleet.profile(name)?;
        devices.push(if p.is_full() {
            DeviceClass::Full
        } else {
            DeviceClass::Mig
        });
        profiles.push(name.clone());
        // surface missing calibration entries before the run starts
        exec_duration(job, *devices.last().expect("just pushed"), calib)?;
    }
    let queue = match cfg.admission {
        AdmissionKind::Kueue => Some(queues.expect("validated").build()?),
        AdmissionKind::Baseline => None,
    };
    let mut driver = Driver {
        trace,
        profiles,
        devices,
        calib,
        gap_ms: cfg.submit_gap_ms,
        priorities: &cfg.priorities,
        local_queues: &cfg.local_queues,
        fleet,
        queue,
        pods: BaselinePodSet::new(),
        rng: RngStream::new(seed, "baseline-sched"),
        jobs: (0..trace.len()).map(|_| JobRun::default()).collect(),
        scan_pending: false,
        start_order: Vec::new(),
        evictions: 0,
    };
    let mut kernel = Kernel::new().with_dispatch_log(emit_dispatch_log);
    kernel.schedule(0, tagged(BatchEvent::JobCreated(0), trace))?;
    let mut failure: Option<BatchError> = None;
    let run = kernel.run(|k, ev| {
        driver.handle(k, ev).map_err(|e| {
            let now = k.now();
            let what = e.to_string();
            failure = Some(e);
            SimError::Invariant { now, what }
        })
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let end = run?;
    if !driver.fleet.is_empty() {
        return Err(SimError::Invariant {
            now: end,
            what: "slices still allocated after the run".into(),
        }
        .into());
    }
    let mut jobs = Vec::with_capacity(trace.len());
    for (spec, run) in trace.iter().zip(&driver.jobs) {
        let missing = |what: &str| SimError::Invariant {
            now: end,
            what: format!("{} has no {what} timestamp", spec.job_id),
        };
        jobs.push(JobRecord {
            job_id: spec.job_id.clone(),
            model_class: spec.model_class,
            audio_seconds: spec.audio_seconds,
            profile: cfg.profiles.get(spec.model_class).clone(),
            created_at: run.created_at.ok_or_else(|| missing("created"))?,
            admitted_at: run.admitted_at.ok_or_else(|| missing("admitted"))?,
            pod_created_at: run.pod_created_at.ok_or_else(|| missing("pod-created"))?,
            finished_at: run.finished_at.ok_or_else(|| missing("finished"))?,
            restart_count: run.restart_count,
            busy_ms: run.busy_ms,
        });
    }
    let first = jobs.iter().map(|j| j.created_at).min().unwrap_or(0);
    let last = jobs.iter().map(|j| j.finished_at).max().unwrap_or(0);
    Ok(BatchRun {
        seed,
        makespan_ms: last - first,
        peak_concurrency: driver.fleet.peak_slices(),
        peak_stranded_compute: driver.fleet.peak_stranded_compute(),
        occupancy: occupancy_timeline(driver.fleet.samples(), end),
        start_order: driver.start_order,
        evictions: driver.evictions,
        dispatch_digest: kernel.dispatch_digest(),
        dispatch_log: kernel.take_dispatch_log(),
        jobs,
    })
}
