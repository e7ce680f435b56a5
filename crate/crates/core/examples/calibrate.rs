// SPDX-License-Identifier: Apache-2.0

//! Grid search over the synthetic trace seed, a scale on the shipped full-GPU real-time
//! factors and the MIG slowdown. Prints candidates for which every batch preset
//! assertion passes, best first by squared relative makespan error.
//!
//! cargo run --release --example calibrate -- [max_trace_seed]

use std::sync::Mutex;

use kgsim::batch::{CalibrationParams, DeviceClass, ModelClass};
use kgsim::scenario::{preset_scenario, run_with_assertions, RunOptions};

const BATCH_PRESETS: [&str; 9] = [
    "pure-jobs",
    "das-on-32",
    "das-on-8",
    "kueue-fifo",
    "kueue-priority",
    "kueue-preempt",
    "kueue-2cq-borrow",
    "das-off-8",
    "das-off-32",
];

const MAKESPAN_TARGETS: [(&str, f64); 5] = [
    ("pure-jobs", 60.5),
    ("kueue-fifo", 62.5),
    ("kueue-priority", 54.7),
    ("kueue-preempt", 51.1),
    ("kueue-2cq-borrow", 55.0),
];

fn params(scale: f64, slowdown: f64) -> CalibrationParams {
    let base = CalibrationParams::default();
    let mut p = CalibrationParams::new(base.startup_overhead_s);
    for class in ModelClass::ALL {
        let full = base.rtf(class, DeviceClass::Full).unwrap() * scale;
        p = p
            .with_rtf(class, DeviceClass::Full, (full * 1e4).round() / 1e4)
            .with_rtf(class, DeviceClass::Mig, (full * slowdown * 1e4).round() / 1e4);
    }
    p
}

fn evaluate(trace_seed: u64, calib: &CalibrationParams) -> Option<f64> {
    let opts = RunOptions {
        calibration: Some(calib.clone()),
        trace_seed: Some(trace_seed),
        ..RunOptions::default()
    };
    let mut err = 0.0;
    for name in BATCH_PRESETS {
        let report = run_with_assertions(&preset_scenario(name)?, &opts).ok()?;
        if !report.assertions.iter().all(|(_, ok, _)| *ok) {
            return None;
        }
        if let Some((_, target)) = MAKESPAN_TARGETS.iter().find(|(n, _)| *n == name) {
            let got = report.batch_summary.as_ref()?.makespan_median_ms as f64 / 60_000.0;
            err += ((got - target) / target).powi(2);
        }
        if name == "kueue-fifo" {
            let got = report.batch_summary.as_ref()?.exec_median_ms as f64 / 60_000.0;
            err += ((got - 9.4) / 9.4).powi(2);
        }
    }
    Some(err)
}

fn main() {
    let max_seed: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(500);
    let scales = [0.95, 1.0, 1.05, 1.1];
    let slowdowns = [1.1, 1.15, 1.21, 1.27];
    let threads = std::thread::available_parallelism().map_or(4, |n| n.get());
    let found = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for t in 0..threads as u64 {
            let found = &found;
            scope.spawn(move || {
                let mut seed = 1 + t;
                while seed <= max_seed {
                    for &scale in &scales {
                        for &slowdown in &slowdowns {
                            let calib = params(scale, slowdown);
                            if let Some(err) = evaluate(seed, &calib) {
                                found.lock().unwrap().push((err, seed, scale, slowdown));
                            }
                        }
                    }
                    seed += threads as u64;
                }
            });
        }
    });
    let mut found = found.into_inner().unwrap();
    found.sort_by(|a, b| a.0.total_cmp(&b.0));
    println!("{} passing candidates", found.len());
    for (err, seed, scale, slowdown) in found.iter().take(15) {
        println!("trace_seed={seed} scale={scale} slowdown={slowdown} err={err:.5}");
        print!("{}", params(*scale, *slowdown).to_text());
    }
}
