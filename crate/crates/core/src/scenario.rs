// SPDX-License-Identifier: Apache-2.0

//! Scenario files, the preset registry, bundled assertions and the runner.
//!
//! Scenarios are TOML documents. Unknown keys are rejected. The resolved form
//! of a scenario (every default filled in, calibration inlined) is written next
//! to the reports and parses back to the same scenario.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::accel::FleetConfig;
use crate::batch::{
    generate_trace, run_batch, AdmissionKind, BatchConfig, BatchError, CalibrationParams, ClassDistribution,
    DeviceClass, JobSpec, ModelClass, PerClass, SubmissionOrder, TraceSpec,
};
use crate::inference::{
    build_corpus, run_serving, Backend, CorpusSpec, LatencyParams, ServingConfig, ServingError, Strategy,
};
use crate::metrics::{
    aggregate, mean, summarize_batch, summarize_serving, write_reports, LatencyMetric, MetricsError, Report,
};
use crate::queueing::{ClusterQueue, LocalQueue, QueueTopology, QueueingStrategy, QuotaEntry, ResourceFlavor};

/// Synthetic trace seed shared by every batch preset; fixed by calibration.
pub const TRACE_SEED: u64 = 2;
pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("unknown preset `{0}` (see list-presets)")]
    UnknownPreset(String),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Serving(#[from] ServingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl ScenarioError {
    /// Configuration problems map to exit status 2; everything else is a run failure.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            ScenarioError::Io { .. }
                | ScenarioError::Parse(_)
                | ScenarioError::Invalid(_)
                | ScenarioError::UnknownPreset(_)
                | ScenarioError::Batch(BatchError::Config(_))
                | ScenarioError::Batch(BatchError::Calibration { .. })
                | ScenarioError::Batch(BatchError::CalibrationInvariant(_))
                | ScenarioError::Batch(BatchError::MissingCalibration { .. })
                | ScenarioError::Batch(BatchError::Queue(_))
                | ScenarioError::Serving(ServingError::Config(_))
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Batch,
    Serving,
    Overhead,
}

/// Inline calibration; any entry left out falls back to the shipped defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CalibrationTable {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rtf_medium_full: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rtf_medium_mig: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rtf_large_full: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rtf_large_mig: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub startup_overhead_s: Option<f64>,
}

impl CalibrationTable {
    fn entries(&self) -> [(ModelClass, DeviceClass, Option<f64>); 4] {
        [
            (ModelClass::Medium, DeviceClass::Full, self.rtf_medium_full),
            (ModelClass::Medium, DeviceClass::Mig, self.rtf_medium_mig),
            (ModelClass::Large, DeviceClass::Full, self.rtf_large_full),
            (ModelClass::Large, DeviceClass::Mig, self.rtf_large_mig),
        ]
    }

    pub fn from_params(p: &CalibrationParams) -> Self {
        let get = |c, d| p.rtf(c, d).ok();
        Self {
            rtf_medium_full: get(ModelClass::Medium, DeviceClass::Full),
            rtf_medium_mig: get(ModelClass::Medium, DeviceClass::Mig),
            rtf_large_full: get(ModelClass::Large, DeviceClass::Full),
            rtf_large_mig: get(ModelClass::Large, DeviceClass::Mig),
            startup_overhead_s: Some(p.startup_overhead_s),
        }
    }

    /// Overlay this table on `base`.
    pub fn apply(&self, base: &CalibrationParams) -> Result<CalibrationParams, BatchError> {
        let mut out = CalibrationParams::new(self.startup_overhead_s.unwrap_or(base.startup_overhead_s));
        for (c, d, v) in self.entries() {
            if let Some(v) = v.or_else(|| base.rtf(c, d).ok()) {
                if !(v.is_finite() && v > 0.0) {
                    return Err(BatchError::CalibrationInvariant(format!(
                        "rtf.{c}.{d} must be positive"
                    )));
                }
                out = out.with_rtf(c, d, v);
            }
        }
        out.validate()?;
        Ok(out)
    }
}

/// Checks attached to a scenario; `run` fails if any does not hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Assertion {
    /// Median makespan over seeds within `rel_tol` of `target_min`.
    MakespanMedian {
        target_min: f64,
        rel_tol: f64,
    },
    /// Median makespan strictly below that of another preset.
    MakespanBelow {
        preset: String,
    },
    /// Every job has zero queue time.
    QueueTimeZero,
    /// Pooled exec median within `rel_tol` of `target_min`.
    ExecMedian {
        target_min: f64,
        rel_tol: f64,
    },
    /// After the first `initial` starts, the start order begins with `expected`.
    StartOrderAfter {
        initial: usize,
        expected: Vec<String>,
    },
    /// Start order identical across seeds.
    SeedInvariantOrder,
    /// Synthetic class means within `rel_tol` of the configured means, samples within bounds.
    TraceStatistics {
        rel_tol: f64,
    },
    PeakConcurrency {
        min: u32,
        max: u32,
    },
    /// Mean completion relative to another preset, within `[min, max]`.
    CompletionRatio {
        preset: String,
        min: f64,
        max: f64,
    },
    /// Mean and P95 completion reductions relative to another preset.
    CompletionReduction {
        preset: String,
        mean_min: f64,
        p95_min: f64,
    },
    /// TTFT of `with` minus TTFT of `without` within `[min_ms, max_ms]` at every level,
    /// non-decreasing in concurrency.
    OverheadDelta {
        with: Strategy,
        without: Strategy,
        min_ms: f64,
        max_ms: f64,
    },
    /// Pooled mean TTFT of `slow` over `fast` at least `min`.
    MeanTtftRatio {
        slow: Strategy,
        fast: Strategy,
        min: f64,
    },
    MeanTtftRange {
        strategy: Strategy,
        min_ms: f64,
        max_ms: f64,
    },
    /// P99 TTFT ratio at the highest level.
    P99TtftRatio {
        slow: Strategy,
        fast: Strategy,
        min: f64,
    },
    /// 1 - P99(fast)/P99(slow) at the highest level.
    P99TtftImprovement {
        slow: Strategy,
        fast: Strategy,
        min: f64,
    },
    MeanE2eGap {
        slow: Strategy,
        fast: Strategy,
        min_ms: f64,
    },
    /// P99 E2E gap at the highest level.
    P99E2eGap {
        slow: Strategy,
        fast: Strategy,
        min_ms: f64,
    },
    HitRate {
        strategy: Strategy,
        min: f64,
        max: f64,
    },
    /// Per level: mean TTFT and its variance no larger for `fast`.
    TtftDominance {
        slow: Strategy,
        fast: Strategy,
    },
}

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub kind: ExperimentKind,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fleet: Option<FleetConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queues: Option<QueueTopology>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<BatchConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub serving: Option<ServingConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub assertions: Vec<Assertion>,
}

pub fn parse_scenario_str(text: &str) -> Result<Scenario, ScenarioError> {
    let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    s.validate()?;
    Ok(s)
}

pub fn parse_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_scenario_str(&text).map_err(|e| match e {
        ScenarioError::Parse(m) => ScenarioError::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |m: &str| Err(ScenarioError::Invalid(m.to_owned()));
        if self.seeds.is_empty() {
            return invalid("seeds must not be empty");
        }
        if let Some(fleet) = &self.fleet {
            fleet.validate().map_err(ScenarioError::Invalid)?;
        }
        if let Some(c) = &self.calibration {
            c.apply(&CalibrationParams::default())?;
        }
        match self.kind {
            ExperimentKind::Batch => {
                let (Some(batch), Some(fleet)) = (&self.batch, &self.fleet) else {
                    return invalid("batch scenarios need [batch] and [fleet]");
                };
                if self.serving.is_some() {
                    return invalid("batch scenarios take no [serving] section");
                }
                batch.validate(fleet, self.queues.as_ref())?;
            }
            ExperimentKind::Serving | ExperimentKind::Overhead => {
                let Some(serving) = &self.serving else {
                    return invalid("serving scenarios need a [serving] section");
                };
                if self.batch.is_some() || self.fleet.is_some() || self.queues.is_some() {
                    return invalid("serving scenarios take no [batch], [fleet] or [queues] section");
                }
                serving.validate()?;
            }
        }
        for a in &self.assertions {
            let preset = match a {
                Assertion::MakespanBelow { preset }
                | Assertion::CompletionRatio { preset, .. }
                | Assertion::CompletionReduction { preset, .. } => Some(preset),
                _ => None,
            };
            if let Some(p) = preset {
                if preset_scenario(p).is_none() {
                    return Err(ScenarioError::UnknownPreset(p.clone()));
                }
            }
            let batch_only = matches!(
                a,
                Assertion::MakespanMedian { .. }
                    | Assertion::MakespanBelow { .. }
                    | Assertion::QueueTimeZero
                    | Assertion::ExecMedian { .. }
                    | Assertion::StartOrderAfter { .. }
                    | Assertion::SeedInvariantOrder
                    | Assertion::TraceStatistics { .. }
                    | Assertion::PeakConcurrency { .. }
                    | Assertion::CompletionRatio { .. }
                    | Assertion::CompletionReduction { .. }
            );
            if batch_only != (self.kind == ExperimentKind::Batch) {
                return Err(ScenarioError::Invalid(format!(
                    "assertion {a:?} does not apply to a {:?} scenario",
                    self.kind
                )));
            }
        }
        Ok(())
    }

    /// Calibration with the scenario's inline table laid over `base`.
    pub fn resolve_calibration(&self, base: &CalibrationParams) -> Result<CalibrationParams, ScenarioError> {
        Ok(match &self.calibration {
            Some(t) => t.apply(base)?,
            None => base.clone(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seeds: Option<Vec<u64>>,
    /// Replaces the shipped defaults as the base under the scenario's own table.
    pub calibration: Option<CalibrationParams>,
    pub emit_dispatch_log: bool,
    /// Replaces the seed of a synthetic batch trace.
    pub trace_seed: Option<u64>,
    /// Run the cache invariant checks after every serving event.
    pub check_invariants: bool,
}

/// Generate the trace a batch scenario will run.
pub fn scenario_trace(s: &Scenario) -> Result<Vec<JobSpec>, ScenarioError> {
    let batch = s
        .batch
        .as_ref()
        .ok_or_else(|| ScenarioError::Invalid("not a batch scenario".into()))?;
    Ok(generate_trace(&batch.trace, batch.submission_order)?)
}

/// Run a scenario for every seed without evaluating assertions.
fn with_overrides(s: &Scenario, opts: &RunOptions) -> Scenario {
    let mut s = s.clone();
    if let (
        Some(seed),
        Some(BatchConfig {
            trace: TraceSpec::Synthetic { seed: t, .. },
            ..
        }),
    ) = (opts.trace_seed, s.batch.as_mut())
    {
        *t = seed;
    }
    s
}

pub fn run_scenario(s: &Scenario, opts: &RunOptions) -> Result<Report, ScenarioError> {
    let s = &with_overrides(s, opts);
    s.validate()?;
    let base = opts.calibration.clone().unwrap_or_default();
    let calib = s.resolve_calibration(&base)?;
    let seeds = opts.seeds.clone().unwrap_or_else(|| s.seeds.clone());
    if seeds.is_empty() {
        return Err(ScenarioError::Invalid("seeds must not be empty".into()));
    }
    let mut resolved = s.clone();
    resolved.seeds = seeds.clone();
    resolved.calibration = Some(CalibrationTable::from_params(&calib));
    let resolved_text = resolved.to_toml();
    let mut report = Report {
        scenario: s.name.clone(),
        config_digest: hex::encode(Sha256::digest(resolved_text.as_bytes())),
        calibration_digest: calib.digest(),
        resolved_scenario: resolved_text,
        seeds: seeds.clone(),
        ..Report::default()
    };
    match s.kind {
        ExperimentKind::Batch => {
            let batch = s.batch.as_ref().expect("validated");
            let fleet = s.fleet.as_ref().expect("validated");
            let trace = scenario_trace(s)?;
            for &seed in &seeds {
                report.batch_runs.push(run_batch(
                    batch,
                    fleet,
                    s.queues.as_ref(),
                    &calib,
                    &trace,
                    seed,
                    opts.emit_dispatch_log,
                )?);
            }
            report.batch_summary = Some(summarize_batch(&s.name, &report.batch_runs)?);
        }
        ExperimentKind::Serving | ExperimentKind::Overhead => {
            let serving = s.serving.as_ref().expect("validated");
            let corpus = build_corpus(&serving.corpus)?;
            for &strategy in &serving.strategies {
                for &seed in &seeds {
                    report.serving_runs.push(run_serving(
                        serving,
                        strategy,
                        &corpus,
                        seed,
                        opts.emit_dispatch_log,
                        opts.check_invariants,
                    )?);
                }
            }
            report.serving_summary = summarize_serving(&report.serving_runs)?;
        }
    }
    Ok(report)
}

/// Run a scenario and evaluate its assertions. Referenced presets run with the
/// same seeds and calibration.
pub fn run_with_assertions(s: &Scenario, opts: &RunOptions) -> Result<Report, ScenarioError> {
    let mut report = run_scenario(s, opts)?;
    let s = &with_overrides(s, opts);
    let mut refs: BTreeMap<String, Report> = BTreeMap::new();
    for a in &s.assertions {
        if let Assertion::MakespanBelow { preset }
        | Assertion::CompletionRatio { preset, .. }
        | Assertion::CompletionReduction { preset, .. } = a
        {
            if !refs.contains_key(preset) {
                let p = preset_scenario(preset).ok_or_else(|| ScenarioError::UnknownPreset(preset.clone()))?;
                let ref_opts = RunOptions {
                    emit_dispatch_log: false,
                    ..opts.clone()
                };
                refs.insert(preset.clone(), run_scenario(&p, &ref_opts)?);
            }
        }
    }
    let trace = match s.kind {
        ExperimentKind::Batch => Some(scenario_trace(s)?),
        _ => None,
    };
    let outcomes: Vec<(String, bool, String)> = s
        .assertions
        .iter()
        .map(|a| evaluate(a, s, &report, &refs, trace.as_deref()))
        .collect();
    report.assertions = outcomes;
    Ok(report)
}

fn within(value: f64, target: f64, rel_tol: f64) -> bool {
    (value - target).abs() <= rel_tol * target
}

fn mins(ms: f64) -> f64 {
    ms / 60_000.0
}

fn evaluate(
    a: &Assertion,
    s: &Scenario,
    report: &Report,
    refs: &BTreeMap<String, Report>,
    trace: Option<&[JobSpec]>,
) -> (String, bool, String) {
    let name = assertion_name(a);
    let (ok, detail) = match check(a, s, report, refs, trace) {
        Ok(x) => x,
        Err(e) => (false, e),
    };
    (name, ok, detail)
}

fn assertion_name(a: &Assertion) -> String {
    let v = toml::Value::try_from(a).ok();
    v.and_then(|v| v.get("check").and_then(|c| c.as_str()).map(str::to_owned))
        .unwrap_or_else(|| "assertion".into())
}

type Check = Result<(bool, String), String>;

fn check(
    a: &Assertion,
    s: &Scenario,
    report: &Report,
    refs: &BTreeMap<String, Report>,
    trace: Option<&[JobSpec]>,
) -> Check {
    let batch = || report.batch_summary.as_ref().ok_or("no batch results".to_string());
    let reference = |p: &str| {
        refs.get(p)
            .and_then(|r| r.batch_summary.as_ref())
            .ok_or(format!("reference preset `{p}` has no batch results"))
    };
    let rows = &report.serving_summary;
    let levels: Vec<u32> = {
        let mut l: Vec<u32> = rows.iter().map(|r| r.concurrency).collect();
        l.sort_unstable();
        l.dedup();
        l
    };
    let top = levels.last().copied();
    let get = |st: Strategy, k: u32, m: LatencyMetric| {
        aggregate(rows, st, k, m).ok_or(format!("no {} results for {st} at concurrency {k}", m.as_str()))
    };
    let pooled_mean = |st: Strategy, m: LatencyMetric| -> Result<f64, String> {
        let xs: Vec<f64> = report
            .serving_runs
            .iter()
            .filter(|r| r.strategy == st)
            .flat_map(|r| r.records.iter())
            .map(|r| match m {
                LatencyMetric::Ttft => r.ttft_ms() as f64,
                LatencyMetric::E2e => r.e2e_ms() as f64,
            })
            .collect();
        if xs.is_empty() {
            return Err(format!("no results for {st}"));
        }
        Ok(mean(&xs))
    };
    match a {
        Assertion::MakespanMedian { target_min, rel_tol } => {
            let b = batch()?;
            let v = mins(b.makespan_median_ms as f64);
            Ok((
                within(v, *target_min, *rel_tol),
                format!(
                    "median makespan {v:.1} min, target {target_min} ±{:.0}%",
                    rel_tol * 100.0
                ),
            ))
        }
        Assertion::MakespanBelow { preset } => {
            let mine = batch()?.makespan_median_ms;
            let other = reference(preset)?.makespan_median_ms;
            Ok((
                mine < other,
                format!(
                    "median makespan {:.1} min vs {preset} {:.1} min",
                    mins(mine as f64),
                    mins(other as f64)
                ),
            ))
        }
        Assertion::QueueTimeZero => {
            let n = report
                .batch_runs
                .iter()
                .flat_map(|r| r.jobs.iter())
                .filter(|j| j.queue_ms() != 0)
                .count();
            Ok((n == 0, format!("{n} jobs with non-zero queue time")))
        }
        Assertion::ExecMedian { target_min, rel_tol } => {
            let v = mins(batch()?.exec_median_ms as f64);
            Ok((
                within(v, *target_min, *rel_tol),
                format!("exec median {v:.1} min, target {target_min} ±{:.0}%", rel_tol * 100.0),
            ))
        }
        Assertion::StartOrderAfter { initial, expected } => {
            let mut all_ok = true;
            let mut seen = String::new();
            for r in &report.batch_runs {
                let got: Vec<&str> = r
                    .start_order
                    .iter()
                    .skip(*initial)
                    .take(expected.len())
                    .map(|(j, _)| j.as_str())
                    .collect();
                all_ok &= got == expected.iter().map(String::as_str).collect::<Vec<_>>();
                if seen.is_empty() {
                    seen = got.join(", ");
                }
            }
            Ok((all_ok, format!("after {initial} starts: {seen}")))
        }
        Assertion::SeedInvariantOrder => {
            let first: Vec<&(String, u64)> = match report.batch_runs.first() {
                Some(r) => r.start_order.iter().collect(),
                None => return Err("no runs".into()),
            };
            let same = report
                .batch_runs
                .iter()
                .all(|r| r.start_order.iter().collect::<Vec<_>>() == first);
            Ok((
                same,
                format!("{} seeds, identical start order: {same}", report.batch_runs.len()),
            ))
        }
        Assertion::TraceStatistics { rel_tol } => {
            let trace = trace.ok_or("no trace")?;
            let Some(BatchConfig {
                trace: TraceSpec::Synthetic { medium, large, .. },
                ..
            }) = &s.batch
            else {
                return Err("trace statistics need a synthetic trace".into());
            };
            let mut ok = true;
            let mut parts = Vec::new();
            for (class, dist) in [(ModelClass::Medium, medium), (ModelClass::Large, large)] {
                let xs: Vec<f64> = trace
                    .iter()
                    .filter(|j| j.model_class == class)
                    .map(|j| j.audio_seconds)
                    .collect();
                let m = mean(&xs);
                let in_bounds = xs.iter().all(|&x| x >= dist.min_s && x <= dist.max_s);
                ok &= within(m, dist.mean_s, *rel_tol) && in_bounds;
                parts.push(format!("{class} mean {m:.1} s (target {})", dist.mean_s));
            }
            Ok((ok, parts.join(", ")))
        }
        Assertion::PeakConcurrency { min, max } => {
            let peaks: Vec<u32> = report.batch_runs.iter().map(|r| r.peak_concurrency).collect();
            let ok = !peaks.is_empty() && peaks.iter().all(|p| p >= min && p <= max);
            Ok((
                ok,
                format!("peak concurrent jobs per seed {peaks:?}, band [{min}, {max}]"),
            ))
        }
        Assertion::CompletionRatio { preset, min, max } => {
            let mine = batch()?.completion_mean_ms;
            let other = reference(preset)?.completion_mean_ms;
            let ratio = mine / other;
            Ok((
                ratio >= *min && ratio <= *max,
                format!(
                    "mean completion {:.1} min vs {preset} {:.1} min, ratio {ratio:.3} in [{min}, {max}]",
                    mins(mine),
                    mins(other)
                ),
            ))
        }
        Assertion::CompletionReduction {
            preset,
            mean_min,
            p95_min,
        } => {
            let mine = batch()?;
            let other = reference(preset)?;
            let rm = 1.0 - mine.completion_mean_ms / other.completion_mean_ms;
            let rp = 1.0 - mine.completion_p95_ms as f64 / other.completion_p95_ms as f64;
            Ok((
                rm >= *mean_min && rp >= *p95_min,
                format!(
                    "mean {:.1} -> {:.1} min ({:.0}%), p95 {:.1} -> {:.1} min ({:.0}%)",
                    mins(other.completion_mean_ms),
                    mins(mine.completion_mean_ms),
                    rm * 100.0,
                    mins(other.completion_p95_ms as f64),
                    mins(mine.completion_p95_ms as f64),
                    rp * 100.0
                ),
            ))
        }
        Assertion::OverheadDelta {
            with,
            without,
            min_ms,
            max_ms,
        } => {
            let mut deltas = Vec::new();
            for &k in &levels {
                let d = get(*with, k, LatencyMetric::Ttft)?.mean - get(*without, k, LatencyMetric::Ttft)?.mean;
                deltas.push(d);
            }
            let in_band = deltas.iter().all(|d| d >= min_ms && d <= max_ms);
            let monotone = deltas.windows(2).all(|w| w[1] >= w[0]);
            let shown: Vec<String> = deltas.iter().map(|d| format!("{d:.1}")).collect();
            Ok((
                !deltas.is_empty() && in_band && monotone,
                format!(
                    "TTFT delta per level [{}] ms, band [{min_ms}, {max_ms}], monotone {monotone}",
                    shown.join(", ")
                ),
            ))
        }
        Assertion::MeanTtftRatio { slow, fast, min } => {
            let r = pooled_mean(*slow, LatencyMetric::Ttft)? / pooled_mean(*fast, LatencyMetric::Ttft)?;
            Ok((r >= *min, format!("mean TTFT ratio {r:.2} (min {min})")))
        }
        Assertion::MeanTtftRange {
            strategy,
            min_ms,
            max_ms,
        } => {
            let m = pooled_mean(*strategy, LatencyMetric::Ttft)?;
            Ok((
                m >= *min_ms && m <= *max_ms,
                format!("{strategy} mean TTFT {m:.1} ms in [{min_ms}, {max_ms}]"),
            ))
        }
        Assertion::P99TtftRatio { slow, fast, min } => {
            let k = top.ok_or("no levels")?;
            let r = get(*slow, k, LatencyMetric::Ttft)?.p99 as f64 / get(*fast, k, LatencyMetric::Ttft)?.p99 as f64;
            Ok((
                r >= *min,
                format!("P99 TTFT ratio at concurrency {k}: {r:.1} (min {min})"),
            ))
        }
        Assertion::P99TtftImprovement { slow, fast, min } => {
            let k = top.ok_or("no levels")?;
            let s_ = get(*slow, k, LatencyMetric::Ttft)?.p99 as f64;
            let f_ = get(*fast, k, LatencyMetric::Ttft)?.p99 as f64;
            let imp = 1.0 - f_ / s_;
            Ok((
                imp >= *min,
                format!(
                    "P99 TTFT at concurrency {k}: {s_:.0} -> {f_:.0} ms ({:.0}% better)",
                    imp * 100.0
                ),
            ))
        }
        Assertion::MeanE2eGap { slow, fast, min_ms } => {
            let g = pooled_mean(*slow, LatencyMetric::E2e)? - pooled_mean(*fast, LatencyMetric::E2e)?;
            let per_level_positive = levels.iter().all(|&k| {
                matches!(
                    (get(*slow, k, LatencyMetric::E2e), get(*fast, k, LatencyMetric::E2e)),
                    (Ok(a), Ok(b)) if a.mean > b.mean
                )
            });
            Ok((
                g >= *min_ms && per_level_positive,
                format!("mean E2E gap {g:.0} ms (min {min_ms}), positive at every level: {per_level_positive}"),
            ))
        }
        Assertion::P99E2eGap { slow, fast, min_ms } => {
            let k = top.ok_or("no levels")?;
            let g = get(*slow, k, LatencyMetric::E2e)?.p99 as f64 - get(*fast, k, LatencyMetric::E2e)?.p99 as f64;
            Ok((
                g >= *min_ms,
                format!("P99 E2E gap at concurrency {k}: {g:.0} ms (min {min_ms})"),
            ))
        }
        Assertion::HitRate { strategy, min, max } => {
            let (mut cached, mut total) = (0u64, 0u64);
            for r in report.serving_runs.iter().filter(|r| r.strategy == *strategy) {
                for x in &r.records {
                    cached += x.cached_tokens;
                    total += x.cached_tokens + x.prefill_tokens;
                }
            }
            if total == 0 {
                return Err(format!("no results for {strategy}"));
            }
            let h = cached as f64 / total as f64;
            Ok((
                h >= *min && h <= *max,
                format!("{strategy} hit rate {h:.3} in [{min}, {max}]"),
            ))
        }
        Assertion::TtftDominance { slow, fast } => {
            let mut bad = Vec::new();
            for &seed in &report.seeds {
                let one = |st: Strategy| {
                    report
                        .serving_runs
                        .iter()
                        .find(|r| r.strategy == st && r.seed == seed)
                        .ok_or(format!("no run for {st} seed {seed}"))
                };
                let (rs, rf) = (one(*slow)?, one(*fast)?);
                for &k in &levels {
                    let xs = |r: &crate::inference::ServingRun| -> Vec<f64> {
                        r.records
                            .iter()
                            .filter(|x| x.concurrency == k)
                            .map(|x| x.ttft_ms() as f64)
                            .collect()
                    };
                    let (a, b) = (xs(rs), xs(rf));
                    if mean(&b) > mean(&a) || crate::metrics::sample_variance(&b) > crate::metrics::sample_variance(&a)
                    {
                        bad.push(format!("seed {seed} level {k}"));
                    }
                }
            }
            Ok((
                bad.is_empty(),
                if bad.is_empty() {
                    "holds for every seed and level".into()
                } else {
                    format!("violated at {}", bad.join(", "))
                },
            ))
        }
    }
}

/// Names of every preset, in registry order.
pub const PRESETS: [&str; 11] = [
    "pure-jobs",
    "kueue-fifo",
    "kueue-priority",
    "kueue-preempt",
    "kueue-2cq-borrow",
    "das-off-8",
    "das-on-8",
    "das-off-32",
    "das-on-32",
    "gaie-overhead",
    "gaie-routing",
];

pub fn preset_description(name: &str) -> Option<&'static str> {
    Some(match name {
        "pure-jobs" => "32 jobs on 8 GPUs, no admission control, random pod start order",
        "kueue-fifo" => "one ClusterQueue, 8 GPUs, BestEffortFIFO",
        "kueue-priority" => "kueue-fifo with large jobs at higher priority",
        "kueue-preempt" => "kueue-priority with preemption enabled",
        "kueue-2cq-borrow" => "two 4-GPU ClusterQueues in one cohort with borrowing",
        "das-off-8" => "8 jobs, one whole GPU each",
        "das-on-8" => "8 jobs on MIG slices (1g.5gb medium, 3g.20gb large)",
        "das-off-32" => "32 jobs, one whole GPU each",
        "das-on-32" => "32 jobs on MIG slices",
        "gaie-overhead" => "gateway and endpoint-picker latency over a constant backend",
        "gaie-routing" => "random vs prefix-cache-aware routing over 8 replicas",
        _ => return None,
    })
}

fn paper_trace(jobs_per_class: usize) -> TraceSpec {
    TraceSpec::Synthetic {
        seed: TRACE_SEED,
        jobs_per_class,
        medium: ClassDistribution {
            mean_s: 3177.13,
            sd_s: 742.37,
            min_s: 1682.72,
            max_s: 4380.08,
        },
        large: ClassDistribution {
            mean_s: 3077.63,
            sd_s: 1584.01,
            min_s: 1258.34,
            max_s: 7405.44,
        },
    }
}

fn per_class<T>(medium: T, large: T) -> PerClass<T> {
    PerClass { medium, large }
}

fn batch_preset(admission: AdmissionKind, jobs_per_class: usize, sliced: bool) -> BatchConfig {
    BatchConfig {
        admission,
        submission_order: SubmissionOrder::MediumFirst,
        submit_gap_ms: 0,
        profiles: if sliced {
            per_class("1g.5gb".into(), "3g.20gb".into())
        } else {
            per_class("full".into(), "full".into())
        },
        priorities: per_class(0, 0),
        local_queues: per_class("lq-medium".into(), "lq-large".into()),
        trace: paper_trace(jobs_per_class),
    }
}

fn gpu_flavor() -> ResourceFlavor {
    ResourceFlavor {
        name: "a100".into(),
        capacities: BTreeMap::from([("gpu".to_string(), 8)]),
    }
}

fn cluster_queue(name: &str, nominal: u64, cohort: Option<&str>, borrowing: bool, preemption: bool) -> ClusterQueue {
    ClusterQueue {
        name: name.into(),
        cohort: cohort.map(str::to_owned),
        queueing_strategy: QueueingStrategy::BestEffortFIFO,
        quota: vec![QuotaEntry {
            flavor: "a100".into(),
            resource: "gpu".into(),
            nominal,
        }],
        borrowing_enabled: borrowing,
        preemption_enabled: preemption,
    }
}

fn local_queue(name: &str, cq: &str) -> LocalQueue {
    LocalQueue {
        name: name.into(),
        namespace: "whisper".into(),
        cluster_queue: cq.into(),
    }
}

fn single_cq(preemption: bool) -> QueueTopology {
    QueueTopology {
        flavors: vec![gpu_flavor()],
        cluster_queues: vec![cluster_queue("cq-whisper", 8, None, false, preemption)],
        local_queues: vec![
            local_queue("lq-medium", "cq-whisper"),
            local_queue("lq-large", "cq-whisper"),
        ],
    }
}

fn batch_scenario(
    name: &str,
    batch: BatchConfig,
    fleet: FleetConfig,
    queues: Option<QueueTopology>,
    assertions: Vec<Assertion>,
) -> Scenario {
    Scenario {
        name: name.into(),
        kind: ExperimentKind::Batch,
        seeds: default_seeds(),
        calibration: None,
        fleet: Some(fleet),
        queues,
        batch: Some(batch),
        serving: None,
        assertions,
    }
}

fn makespan(target_min: f64) -> Assertion {
    Assertion::MakespanMedian {
        target_min,
        rel_tol: 0.10,
    }
}

/// Latency parameters shared by the serving presets.
pub fn default_latency() -> LatencyParams {
    LatencyParams {
        prefill_ms_per_token: 0.06,
        ttft_floor_ms: 60.0,
        decode_ms_per_token: 20.0,
        epp_overhead_ms: 2.0,
        clusterip_overhead_ms: vec![[1.0, 0.5], [256.0, 0.5]],
        gateway_overhead_ms: vec![[1.0, 1.5], [256.0, 9.0]],
    }
}

fn paper_corpus() -> CorpusSpec {
    CorpusSpec::Synthetic {
        prompts: 32,
        mean_tokens: 8500,
        spread_tokens: 500,
        seed: 1,
    }
}

fn serving_scenario(name: &str, kind: ExperimentKind, serving: ServingConfig, assertions: Vec<Assertion>) -> Scenario {
    Scenario {
        name: name.into(),
        kind,
        seeds: default_seeds(),
        calibration: None,
        fleet: None,
        queues: None,
        batch: None,
        serving: Some(serving),
        assertions,
    }
}

fn serving_preset(strategies: Vec<Strategy>, backend: Backend, replicas: u32) -> ServingConfig {
    ServingConfig {
        strategies,
        replicas,
        capacity_tokens: crate::inference::DEFAULT_CAPACITY_TOKENS,
        block_size: crate::inference::DEFAULT_BLOCK_SIZE,
        concurrency: vec![1, 2, 4, 8, 16, 32, 64, 128, 256],
        repeats: 8,
        max_output_tokens: 512,
        fixed_output_tokens: None,
        warm_sweep: true,
        backend,
        corpus: paper_corpus(),
        latency: default_latency(),
    }
}

/// Build a preset scenario by name.
pub fn preset_scenario(name: &str) -> Option<Scenario> {
    let a100 = |sliced| FleetConfig::a100(8, sliced);
    let order_after_initial = Assertion::StartOrderAfter {
        initial: 8,
        expected: ["medium-4", "large-4", "medium-5", "large-5"]
            .map(String::from)
            .to_vec(),
    };
    Some(match name {
        "pure-jobs" => batch_scenario(
            name,
            batch_preset(AdmissionKind::Baseline, 16, false),
            a100(false),
            None,
            vec![
                makespan(60.5),
                Assertion::QueueTimeZero,
                Assertion::ExecMedian {
                    target_min: 28.4,
                    rel_tol: 0.15,
                },
                Assertion::TraceStatistics { rel_tol: 0.10 },
            ],
        ),
        "kueue-fifo" => batch_scenario(
            name,
            batch_preset(AdmissionKind::Kueue, 16, false),
            a100(false),
            Some(single_cq(false)),
            vec![
                makespan(62.5),
                Assertion::ExecMedian {
                    target_min: 9.4,
                    rel_tol: 0.15,
                },
                order_after_initial,
                Assertion::SeedInvariantOrder,
                Assertion::TraceStatistics { rel_tol: 0.10 },
            ],
        ),
        "kueue-priority" | "kueue-preempt" => {
            let preempt = name == "kueue-preempt";
            let mut b = batch_preset(AdmissionKind::Kueue, 16, false);
            b.priorities = per_class(100, 1000);
            let assertions = if preempt {
                vec![
                    makespan(51.1),
                    Assertion::MakespanBelow {
                        preset: "kueue-priority".into(),
                    },
                    Assertion::SeedInvariantOrder,
                ]
            } else {
                vec![
                    makespan(54.7),
                    Assertion::MakespanBelow {
                        preset: "kueue-fifo".into(),
                    },
                    Assertion::SeedInvariantOrder,
                ]
            };
            batch_scenario(name, b, a100(false), Some(single_cq(preempt)), assertions)
        }
        "kueue-2cq-borrow" => {
            let topo = QueueTopology {
                flavors: vec![gpu_flavor()],
                cluster_queues: vec![
                    cluster_queue("cq-medium", 4, Some("whisper"), true, false),
                    cluster_queue("cq-large", 4, Some("whisper"), true, false),
                ],
                local_queues: vec![
                    local_queue("lq-medium", "cq-medium"),
                    local_queue("lq-large", "cq-large"),
                ],
            };
            batch_scenario(
                name,
                batch_preset(AdmissionKind::Kueue, 16, false),
                a100(false),
                Some(topo),
                vec![makespan(55.0), Assertion::SeedInvariantOrder],
            )
        }
        "das-off-8" => batch_scenario(
            name,
            batch_preset(AdmissionKind::Baseline, 4, false),
            a100(false),
            None,
            vec![Assertion::PeakConcurrency { min: 8, max: 8 }],
        ),
        "das-on-8" => batch_scenario(
            name,
            batch_preset(AdmissionKind::Baseline, 4, true),
            a100(true),
            None,
            vec![Assertion::CompletionRatio {
                preset: "das-off-8".into(),
                min: 1.1,
                max: 1.35,
            }],
        ),
        "das-off-32" => batch_scenario(
            name,
            batch_preset(AdmissionKind::Baseline, 16, false),
            a100(false),
            None,
            vec![Assertion::PeakConcurrency { min: 8, max: 8 }],
        ),
        "das-on-32" => batch_scenario(
            name,
            batch_preset(AdmissionKind::Baseline, 16, true),
            a100(true),
            None,
            vec![
                Assertion::PeakConcurrency { min: 24, max: 28 },
                Assertion::CompletionReduction {
                    preset: "das-off-32".into(),
                    mean_min: 0.25,
                    p95_min: 0.20,
                },
            ],
        ),
        "gaie-overhead" => serving_scenario(
            name,
            ExperimentKind::Overhead,
            serving_preset(
                vec![
                    Strategy::ClusteripRoundRobin,
                    Strategy::GatewayOnly,
                    Strategy::GatewayEppRandom,
                ],
                Backend::Constant { ttft_ms: 50.0 },
                1,
            ),
            vec![Assertion::OverheadDelta {
                with: Strategy::GatewayEppRandom,
                without: Strategy::ClusteripRoundRobin,
                min_ms: 3.0,
                max_ms: 11.0,
            }],
        ),
        "gaie-routing" => {
            let (slow, fast) = (Strategy::GatewayEppRandom, Strategy::GatewayEppPrecise);
            serving_scenario(
                name,
                ExperimentKind::Serving,
                serving_preset(vec![slow, fast], Backend::PrefixCache, 8),
                vec![
                    Assertion::MeanTtftRatio { slow, fast, min: 5.0 },
                    Assertion::MeanTtftRange {
                        strategy: fast,
                        min_ms: 60.0,
                        max_ms: 120.0,
                    },
                    Assertion::P99TtftRatio { slow, fast, min: 10.0 },
                    Assertion::P99TtftImprovement { slow, fast, min: 0.80 },
                    Assertion::MeanE2eGap {
                        slow,
                        fast,
                        min_ms: 500.0,
                    },
                    Assertion::P99E2eGap {
                        slow,
                        fast,
                        min_ms: 3000.0,
                    },
                    Assertion::HitRate {
                        strategy: fast,
                        min: 0.8,
                        max: 1.0,
                    },
                    Assertion::HitRate {
                        strategy: slow,
                        min: 0.0,
                        max: 0.6,
                    },
                    Assertion::TtftDominance { slow, fast },
                ],
            )
        }
        _ => return None,
    })
}

/// Resolve a preset name or a scenario file path.
pub fn load(target: &str) -> Result<Scenario, ScenarioError> {
    if let Some(s) = preset_scenario(target) {
        return Ok(s);
    }
    let path = Path::new(target);
    if path.exists() {
        return parse_scenario(path);
    }
    Err(ScenarioError::UnknownPreset(target.to_owned()))
}

/// Run, write reports and return the report. Dispatch logs go next to the reports.
pub fn run_to_dir(s: &Scenario, opts: &RunOptions, out_dir: &Path) -> Result<(Report, Vec<PathBuf>), ScenarioError> {
    let report = run_with_assertions(s, opts)?;
    let mut files = write_reports(&report, out_dir)?;
    if opts.emit_dispatch_log {
        for r in &report.batch_runs {
            let path = out_dir.join(format!("dispatch-seed{}.log", r.seed));
            write_log(&path, &r.dispatch_log)?;
            files.push(path);
        }
        for r in &report.serving_runs {
            let path = out_dir.join(format!("dispatch-{}-seed{}.log", r.strategy, r.seed));
            write_log(&path, &r.dispatch_log)?;
            files.push(path);
        }
    }
    Ok((report, files))
}

fn write_log(path: &Path, lines: &[String]) -> Result<(), ScenarioError> {
    let mut text = lines.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|source| ScenarioError::Io {
        path: path.to_owned(),
        source,
    })
}
