//! Calibration run for the Monte Carlo bands in `thresholds.toml`.
//!
//! Runs every config under `configs/` (or the ones named on the command line),
//! prints the aggregates behind each verdict and a bootstrap interval for
//! each median, and flags bundled thresholds that sit inside the 99%
//! bootstrap interval of their statistic (too close to call).
//!
//!     cargo run --release --example pilot [configs/flat_half.toml ...]

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::IndexedRandom;
use relbm::boundary_stats::{median, quantile, Thresholds};
use relbm::cli_io::runner::worker_count;
use relbm::cli_io::{execute, SimConfig};
use relbm::rng::{NoiseKey, StreamRole};

const BOOTSTRAP: usize = 2000;

fn bootstrap_median(v: &[f64], seed: u64) -> (f64, f64) {
    let mut rng = NoiseKey::new(seed, 0).rng(StreamRole::Sampling, 0, 0);
    let meds: Vec<f64> = (0..BOOTSTRAP)
        .map(|_| {
            let re: Vec<f64> = (0..v.len()).map(|_| *v.choose(&mut rng).unwrap()).collect();
            median(&re)
        })
        .collect();
    (quantile(&meds, 0.005), quantile(&meds, 0.995))
}

fn main() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut files: Vec<PathBuf> = std::env::args().skip(1).map(PathBuf::from).collect();
    if files.is_empty() {
        files = std::fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
    }
    let th = Thresholds::defaults();
    let threads = worker_count();
    for f in files {
        let cfg = SimConfig::load(&f).unwrap();
        let t0 = Instant::now();
        let r = execute(&cfg, threads).unwrap();
        println!(
            "== {} ({}; {} paths, {} aborted, {:.1}s)",
            f.file_name().unwrap().to_string_lossy(),
            r.summary.kind,
            r.ensemble.requested,
            r.ensemble.aborted,
            t0.elapsed().as_secs_f64()
        );
        for (name, m) in &r.summary.aggregates.metrics {
            let v = r.ensemble.values(name);
            let (lo, hi) = bootstrap_median(&v, cfg.ensemble.seed);
            println!(
                "  {name:18} median {:>11.4e}  boot99 [{lo:.4e}, {hi:.4e}]  q05 {:.3e}  q95 {:.3e}  max {:.3e}",
                m.median, m.q05, m.q95, m.max
            );
        }
        for (name, o) in &r.summary.verdicts {
            println!("  -> {name:22} {:?}  {:.4e} vs {}  ({})", o.verdict, o.statistic, o.threshold, o.detail);
            // a threshold inside the bootstrap interval of its median is not a
            // stable band
            if let Some(c) = th.checks.get(name.as_str()) {
                let key = name_to_metric(name);
                if let (Some(key), Some(thr)) = (key, c.threshold) {
                    let (lo, hi) = bootstrap_median(&r.ensemble.values(key), cfg.ensemble.seed);
                    if lo <= thr && thr <= hi {
                        println!("     ! threshold {thr} lies inside the bootstrap interval [{lo:.4e}, {hi:.4e}]");
                    }
                }
            }
        }
        if let Some(ks) = r.summary.aggregates.two_start_ks {
            println!("  two-start KS {ks:.4} at sizes {:?}", r.summary.aggregates.two_start_sizes);
        }
        for (i, e) in r.aborted.iter().take(5) {
            println!("  aborted path {i}: {e}");
        }
    }
}

fn name_to_metric(check: &str) -> Option<&'static str> {
    use relbm::boundary_stats::metric::*;
    Some(match check {
        "theta-converges" | "theta-spreads" => THETA_TAIL,
        "delta-converges" => DELTA_TAIL,
        "x-converges" => X_TAIL,
        "delta-tilde-converges" => DELTA_TILDE_TAIL,
        "clock-saturates" | "clock-grows" => CLOCK_GROWTH,
        "theta-inf-matches" => THETA_INF_ANGLE,
        "v-to-one" => V_LAST,
        _ => return None,
    })
}
