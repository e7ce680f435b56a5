// SPDX-License-Identifier: Apache-2.0

//! Percentiles, report aggregation and report files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::batch::{BatchRun, ModelClass};
use crate::inference::{ServingRun, Strategy};
use crate::sim::Millis;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("percentile of an empty sample")]
    Empty,
    #[error("percentile p={0} outside (0, 100]")]
    BadPercentile(f64),
    #[error("job `{0}` has not finished")]
    Unfinished(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

/// Nearest-rank percentile: the ascending-order sample at 1-based index ceil(p/100 * n).
pub fn percentile<T: Copy + PartialOrd>(samples: &[T], p: f64) -> Result<T, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(MetricsError::BadPercentile(p));
    }
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let rank = (p / 100.0 * s.len() as f64).ceil() as usize;
    Ok(s[rank.clamp(1, s.len()) - 1])
}

pub fn mean(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().sum::<f64>() / samples.len() as f64
}

/// Normal-approximation 95% half-width, 1.96 * sd / sqrt(n), sample sd.
pub fn ci95_half_width(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(samples);
    let var = samples.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    1.96 * var.sqrt() / (n as f64).sqrt()
}

pub fn sample_variance(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(samples);
    samples.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64
}

pub fn minutes(ms: Millis) -> f64 {
    ms as f64 / 60_000.0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassSummary {
    pub queue_median_ms: Millis,
    pub exec_median_ms: Millis,
}

/// One configuration's row, pooled over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchSummary {
    pub config: String,
    pub seeds: usize,
    pub jobs: usize,
    pub makespan_median_ms: Millis,
    pub makespan_min_ms: Millis,
    pub makespan_max_ms: Millis,
    pub queue_median_ms: Millis,
    pub queue_p95_ms: Millis,
    pub exec_median_ms: Millis,
    pub medium: ClassSummary,
    pub large: ClassSummary,
    pub completion_mean_ms: f64,
    pub completion_p95_ms: Millis,
    pub concurrent_jobs_peak: u32,
}

pub fn summarize_batch(config: &str, runs: &[BatchRun]) -> Result<BatchSummary, MetricsError> {
    let makespans: Vec<Millis> = runs.iter().map(|r| r.makespan_ms).collect();
    let jobs: Vec<_> = runs.iter().flat_map(|r| r.jobs.iter()).collect();
    for j in &jobs {
        if j.finished_at < j.pod_created_at || j.pod_created_at < j.created_at {
            return Err(MetricsError::Unfinished(j.job_id.clone()));
        }
    }
    let queue: Vec<Millis> = jobs.iter().map(|j| j.queue_ms()).collect();
    let exec: Vec<Millis> = jobs.iter().map(|j| j.exec_ms()).collect();
    let completion: Vec<Millis> = jobs.iter().map(|j| j.completion_ms()).collect();
    let class = |c: ModelClass| -> Result<ClassSummary, MetricsError> {
        let q: Vec<Millis> = jobs
            .iter()
            .filter(|j| j.model_class == c)
            .map(|j| j.queue_ms())
            .collect();
        let e: Vec<Millis> = jobs
            .iter()
            .filter(|j| j.model_class == c)
            .map(|j| j.exec_ms())
            .collect();
        Ok(ClassSummary {
            queue_median_ms: percentile(&q, 50.0)?,
            exec_median_ms: percentile(&e, 50.0)?,
        })
    };
    let completion_f: Vec<f64> = completion.iter().map(|&c| c as f64).collect();
    Ok(BatchSummary {
        config: config.to_owned(),
        seeds: runs.len(),
        jobs: jobs.len(),
        makespan_median_ms: percentile(&makespans, 50.0)?,
        makespan_min_ms: *makespans.iter().min().ok_or(MetricsError::Empty)?,
        makespan_max_ms: *makespans.iter().max().ok_or(MetricsError::Empty)?,
        queue_median_ms: percentile(&queue, 50.0)?,
        queue_p95_ms: percentile(&queue, 95.0)?,
        exec_median_ms: percentile(&exec, 50.0)?,
        medium: class(ModelClass::Medium)?,
        large: class(ModelClass::Large)?,
        completion_mean_ms: mean(&completion_f),
        completion_p95_ms: percentile(&completion, 95.0)?,
        concurrent_jobs_peak: runs.iter().map(|r| r.peak_concurrency).max().unwrap_or(0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LatencyMetric {
    Ttft,
    E2e,
}

impl LatencyMetric {
    pub fn as_str(&self) -> &'static str {
        match self {
            LatencyMetric::Ttft => "ttft",
            LatencyMetric::E2e => "e2e",
        }
    }
}

/// One row of `serving.csv`, pooled over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ServingAggregate {
    pub strategy: Strategy,
    pub concurrency: u32,
    pub metric: LatencyMetric,
    pub mean: f64,
    pub p99: Millis,
    pub ci95_half_width: f64,
    #[serde(skip)]
    pub count: usize,
    #[serde(skip)]
    pub variance: f64,
    /// Cached tokens over prompt tokens across the level's requests.
    #[serde(skip)]
    pub hit_rate: f64,
}

/// Aggregates per (strategy, concurrency, metric) in first-seen strategy order
/// and ascending concurrency.
pub fn summarize_serving(runs: &[ServingRun]) -> Result<Vec<ServingAggregate>, MetricsError> {
    let mut strategies: Vec<Strategy> = Vec::new();
    for r in runs {
        if !strategies.contains(&r.strategy) {
            strategies.push(r.strategy);
        }
    }
    let mut out = Vec::new();
    for s in strategies {
        let mut levels: Vec<u32> = runs
            .iter()
            .filter(|r| r.strategy == s)
            .flat_map(|r| r.records.iter().map(|x| x.concurrency))
            .collect();
        levels.sort_unstable();
        levels.dedup();
        for k in levels {
            let recs: Vec<_> = runs
                .iter()
                .filter(|r| r.strategy == s)
                .flat_map(|r| r.records.iter())
                .filter(|x| x.concurrency == k)
                .collect();
            let cached: u64 = recs.iter().map(|r| r.cached_tokens).sum();
            let total: u64 = recs.iter().map(|r| r.cached_tokens + r.prefill_tokens).sum();
            let hit_rate = if total == 0 { 0.0 } else { cached as f64 / total as f64 };
            for metric in [LatencyMetric::Ttft, LatencyMetric::E2e] {
                let xs: Vec<Millis> = recs
                    .iter()
                    .map(|r| match metric {
                        LatencyMetric::Ttft => r.ttft_ms(),
                        LatencyMetric::E2e => r.e2e_ms(),
                    })
                    .collect();
                let xf: Vec<f64> = xs.iter().map(|&x| x as f64).collect();
                out.push(ServingAggregate {
                    strategy: s,
                    concurrency: k,
                    metric,
                    mean: mean(&xf),
                    p99: percentile(&xs, 99.0)?,
                    ci95_half_width: ci95_half_width(&xf),
                    count: xs.len(),
                    variance: sample_variance(&xf),
                    hit_rate,
                });
            }
        }
    }
    Ok(out)
}

/// Look up one aggregate row.
pub fn aggregate(
    rows: &[ServingAggregate],
    strategy: Strategy,
    concurrency: u32,
    metric: LatencyMetric,
) -> Option<&ServingAggregate> {
    rows.iter()
        .find(|r| r.strategy == strategy && r.concurrency == concurrency && r.metric == metric)
}

/// Everything a run produces, ready to be written.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub scenario: String,
    pub batch_runs: Vec<BatchRun>,
    pub batch_summary: Option<BatchSummary>,
    pub serving_runs: Vec<ServingRun>,
    pub serving_summary: Vec<ServingAggregate>,
    /// Resolved scenario, TOML text.
    pub resolved_scenario: String,
    pub config_digest: String,
    pub calibration_digest: String,
    pub seeds: Vec<u64>,
    /// Assertion outcomes: (name, passed, detail).
    pub assertions: Vec<(String, bool, String)>,
}

#[derive(Serialize)]
struct BatchRow<'a> {
    config: &'a str,
    seed: u64,
    makespan_ms: Millis,
    concurrent_jobs_peak: u32,
    evictions: u32,
    peak_stranded_compute: u32,
    mean_compute_fraction: f64,
    mean_memory_fraction: f64,
}

#[derive(Serialize)]
struct JobRow<'a> {
    config: &'a str,
    seed: u64,
    job_id: &'a str,
    model_class: ModelClass,
    audio_seconds: f64,
    profile: &'a str,
    created_at_ms: Millis,
    admitted_at_ms: Millis,
    pod_created_at_ms: Millis,
    finished_at_ms: Millis,
    queue_ms: Millis,
    exec_ms: Millis,
    restart_count: u32,
}

#[derive(Serialize)]
struct RequestRow<'a> {
    seed: u64,
    strategy: Strategy,
    concurrency: u32,
    request_id: u64,
    prompt_id: &'a str,
    chosen_replica: u32,
    arrive_at_ms: Millis,
    ttft_at_ms: Millis,
    done_at_ms: Millis,
    cached_tokens: u64,
    prefill_tokens: u64,
    output_tokens: u32,
}

const BATCH_HEADER: &[&str] = &[
    "config",
    "seed",
    "makespan_ms",
    "concurrent_jobs_peak",
    "evictions",
    "peak_stranded_compute",
    "mean_compute_fraction",
    "mean_memory_fraction",
];
const JOB_HEADER: &[&str] = &[
    "config",
    "seed",
    "job_id",
    "model_class",
    "audio_seconds",
    "profile",
    "created_at_ms",
    "admitted_at_ms",
    "pod_created_at_ms",
    "finished_at_ms",
    "queue_ms",
    "exec_ms",
    "restart_count",
];
const SERVING_HEADER: &[&str] = &["strategy", "concurrency", "metric", "mean", "p99", "ci95_half_width"];
const REQUEST_HEADER: &[&str] = &[
    "seed",
    "strategy",
    "concurrency",
    "request_id",
    "prompt_id",
    "chosen_replica",
    "arrive_at_ms",
    "ttft_at_ms",
    "done_at_ms",
    "cached_tokens",
    "prefill_tokens",
    "output_tokens",
];

fn write_csv<R: Serialize>(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = R>,
) -> Result<(), MetricsError> {
    let csv_err = |source| MetricsError::Csv {
        path: path.to_owned(),
        source,
    };
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|source| MetricsError::Io {
        path: path.to_owned(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), MetricsError> {
    std::fs::write(path, text).map_err(|source| MetricsError::Io {
        path: path.to_owned(),
        source,
    })
}

impl Report {
    /// Human-readable summary, the same text as summary.txt.
    pub fn summary_text(&self) -> String {
        render_summary(self)
    }
}

fn render_summary(report: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scenario: {}", report.scenario);
    let seeds: Vec<String> = report.seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(s, "seeds: {}", seeds.join(","));
    if let Some(b) = &report.batch_summary {
        let m = |ms: Millis| format!("{:.1}", minutes(ms));
        let _ = writeln!(s);
        let _ = writeln!(s, "batch (minutes; queue/exec pooled over {} jobs)", b.jobs);
        let _ = writeln!(
            s,
            "  makespan median {} ({}-{})",
            m(b.makespan_median_ms),
            m(b.makespan_min_ms),
            m(b.makespan_max_ms)
        );
        let _ = writeln!(s, "  queue median {}  p95 {}", m(b.queue_median_ms), m(b.queue_p95_ms));
        let _ = writeln!(s, "  exec median {}", m(b.exec_median_ms));
        let _ = writeln!(
            s,
            "  medium queue {} exec {} | large queue {} exec {}",
            m(b.medium.queue_median_ms),
            m(b.medium.exec_median_ms),
            m(b.large.queue_median_ms),
            m(b.large.exec_median_ms)
        );
        let _ = writeln!(
            s,
            "  completion mean {:.1}  p95 {}",
            b.completion_mean_ms / 60_000.0,
            m(b.completion_p95_ms)
        );
        let _ = writeln!(s, "  concurrent jobs peak {}", b.concurrent_jobs_peak);
    }
    if !report.serving_summary.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<24}{:>6}{:>12}{:>10}{:>12}{:>10}{:>8}",
            "strategy", "conc", "ttft_mean", "ttft_p99", "e2e_mean", "e2e_p99", "hit"
        );
        for t in report
            .serving_summary
            .iter()
            .filter(|r| r.metric == LatencyMetric::Ttft)
        {
            let e = aggregate(&report.serving_summary, t.strategy, t.concurrency, LatencyMetric::E2e);
            let (em, ep) = e.map(|e| (e.mean, e.p99)).unwrap_or((0.0, 0));
            let _ = writeln!(
                s,
                "{:<24}{:>6}{:>12.1}{:>10}{:>12.1}{:>10}{:>8.2}",
                t.strategy.as_str(),
                t.concurrency,
                t.mean,
                t.p99,
                em,
                ep,
                t.hit_rate
            );
        }
    }
    if !report.assertions.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "assertions");
        for (name, ok, detail) in &report.assertions {
            let _ = writeln!(s, "  [{}] {name}: {detail}", if *ok { "pass" } else { "FAIL" });
        }
    }
    s
}

fn render_meta(report: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scenario = {:?}", report.scenario);
    let seeds: Vec<String> = report.seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(s, "seeds = [{}]", seeds.join(", "));
    let _ = writeln!(s, "config_digest = {:?}", report.config_digest);
    let _ = writeln!(s, "calibration_digest = {:?}", report.calibration_digest);
    for r in &report.batch_runs {
        let _ = writeln!(
            s,
            "\n[[batch_run]]\nseed = {}\ndispatch_digest = {:?}",
            r.seed, r.dispatch_digest
        );
    }
    for r in &report.serving_runs {
        let _ = writeln!(
            s,
            "\n[[serving_run]]\nstrategy = {:?}\nseed = {}\ndispatch_digest = {:?}",
            r.strategy.as_str(),
            r.seed,
            r.dispatch_digest
        );
    }
    s
}

/// Write every report file into `out_dir` and return their paths.
pub fn write_reports(report: &Report, out_dir: &Path) -> Result<Vec<PathBuf>, MetricsError> {
    std::fs::create_dir_all(out_dir).map_err(|source| MetricsError::Io {
        path: out_dir.to_owned(),
        source,
    })?;
    let config = report.scenario.as_str();
    let mut files = Vec::new();

    let path = out_dir.join("batch.csv");
    write_csv(
        &path,
        BATCH_HEADER,
        report.batch_runs.iter().map(|r| BatchRow {
            config,
            seed: r.seed,
            makespan_ms: r.makespan_ms,
            concurrent_jobs_peak: r.peak_concurrency,
            evictions: r.evictions,
            peak_stranded_compute: r.peak_stranded_compute,
            mean_compute_fraction: r.occupancy.map(|o| o.mean_compute_fraction).unwrap_or(0.0),
            mean_memory_fraction: r.occupancy.map(|o| o.mean_memory_fraction).unwrap_or(0.0),
        }),
    )?;
    files.push(path);

    let path = out_dir.join("jobs.csv");
    write_csv(
        &path,
        JOB_HEADER,
        report.batch_runs.iter().flat_map(|r| {
            r.jobs.iter().map(move |j| JobRow {
                config,
                seed: r.seed,
                job_id: &j.job_id,
                model_class: j.model_class,
                audio_seconds: j.audio_seconds,
                profile: &j.profile,
                created_at_ms: j.created_at,
                admitted_at_ms: j.admitted_at,
                pod_created_at_ms: j.pod_created_at,
                finished_at_ms: j.finished_at,
                queue_ms: j.queue_ms(),
                exec_ms: j.exec_ms(),
                restart_count: j.restart_count,
            })
        }),
    )?;
    files.push(path);

    let path = out_dir.join("serving.csv");
    write_csv(&path, SERVING_HEADER, report.serving_summary.iter())?;
    files.push(path);

    let path = out_dir.join("requests.csv");
    write_csv(
        &path,
        REQUEST_HEADER,
        report.serving_runs.iter().flat_map(|r| {
            r.records.iter().map(move |x| RequestRow {
                seed: r.seed,
                strategy: x.strategy,
                concurrency: x.concurrency,
                request_id: x.request_id,
                prompt_id: &x.prompt_id,
                chosen_replica: x.chosen_replica,
                arrive_at_ms: x.arrive_at,
                ttft_at_ms: x.ttft_at,
                done_at_ms: x.done_at,
                cached_tokens: x.cached_tokens,
                prefill_tokens: x.prefill_tokens,
                output_tokens: x.output_tokens,
            })
        }),
    )?;
    files.push(path);

    let path = out_dir.join("summary.txt");
    write_text(&path, &render_summary(report))?;
    files.push(path);

    let path = out_dir.join("meta.toml");
    write_text(&path, &render_meta(report))?;
    files.push(path);

    let path = out_dir.join("scenario.toml");
    write_text(&path, &report.resolved_scenario)?;
    files.push(path);

    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nearest_rank_examples() {
        let xs: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&xs, 95.0).unwrap(), 95);
        assert_eq!(percentile(&[7u64], 1.0).unwrap(), 7);
        assert_eq!(percentile(&[7u64], 100.0).unwrap(), 7);
        assert_eq!(percentile(&[1u64, 2, 3, 4], 50.0).unwrap(), 2);
    }

    #[test]
    fn percentile_errors() {
        assert!(matches!(percentile::<u64>(&[], 50.0), Err(MetricsError::Empty)));
        assert!(matches!(percentile(&[1u64], 0.0), Err(MetricsError::BadPercentile(_))));
        assert!(matches!(
            percentile(&[1u64], 100.5),
            Err(MetricsError::BadPercentile(_))
        ));
    }

    #[test]
    fn ci95_of_constant_is_zero() {
        assert_eq!(ci95_half_width(&[3.0, 3.0, 3.0]), 0.0);
        assert_eq!(ci95_half_width(&[3.0]), 0.0);
        let hw = ci95_half_width(&[1.0, 2.0, 3.0, 4.0]);
        assert!((hw - 1.96 * (5.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_serving_report_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let report = Report {
            scenario: "empty".into(),
            ..Report::default()
        };
        write_reports(&report, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("serving.csv")).unwrap();
        assert_eq!(text, "strategy,concurrency,metric,mean,p99,ci95_half_width\n");
    }

    proptest! {
        #[test]
        fn percentile_monotone_in_p(xs in proptest::collection::vec(0u64..10_000, 1..200), a in 1u32..=100, b in 1u32..=100) {
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(percentile(&xs, f64::from(lo)).unwrap() <= percentile(&xs, f64::from(hi)).unwrap());
        }

        #[test]
        fn percentile_permutation_invariant(mut xs in proptest::collection::vec(0u64..10_000, 1..200), p in 1u32..=100, rot in 0usize..200) {
            let before = percentile(&xs, f64::from(p)).unwrap();
            let n = xs.len();
            xs.rotate_left(rot % n);
            xs.reverse();
            prop_assert_eq!(before, percentile(&xs, f64::from(p)).unwrap());
        }
    }
}
