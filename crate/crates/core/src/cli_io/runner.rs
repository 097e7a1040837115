//! Ensemble execution and artifact writing.
//!
//! Paths are independent tasks on a rayon pool; each draws its noise from
//! `NoiseKey(seed, path)`, and results are collected in path-index order, so
//! every output except the manifest timing is independent of the worker count.

use std::fs;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::Serialize;

use super::config::{OutputFormat, SimConfig};
use super::exit;
use super::plotdata::{histogram_csv, slope_csv, trace_csv, PlotSeries};
use crate::base_sde::{simulate_path, PhaseState};
use crate::boundary_stats::{
    base_path_metrics, nak_path_metrics, nak_theta1_tail, rw_path_metrics, verdict_suite, Ensemble, EnsembleSummary,
    PathSummary, Thresholds,
};
use crate::error::{Error, Result};
use crate::frame_flow::GroupTag;
use crate::iwasawa::{antipodal_start, simulate_nak_path, NakPathRecord};
use crate::rng::NoiseKey;
use crate::rw_sim::RwSimulator;
use crate::spacetime::{SpaceTimeKind, SpaceTimeSpec};

/// Worker-count override.
pub const THREADS_ENV: &str = "LD_THREADS";
/// Antipodal paths use path indices offset by this much.
pub const ANTIPODAL_OFFSET: u64 = 1 << 40;
const HISTOGRAM_BINS: usize = 20;

/// What one path contributes.
#[derive(Clone, Debug, Default)]
struct PathOutcome {
    summary: Option<PathSummary>,
    antipodal: Option<PathSummary>,
    jsonl: Option<String>,
    trace: Option<PlotSeries>,
    /// first component of the terminal direction (angle on AdS)
    theta1: Option<f64>,
    error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub ensemble: Ensemble,
    pub summary: EnsembleSummary,
    /// JSONL text per path, when requested
    pub path_files: Vec<(u64, String)>,
    pub trace: Option<PlotSeries>,
    pub terminal_theta: Vec<f64>,
    /// errors of aborted paths, by index
    pub aborted: Vec<(u64, String)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub config_hash: String,
    pub code_version: String,
    pub wall_time_seconds: f64,
    pub finished_unix: u64,
    pub paths: usize,
    pub aborted: usize,
    pub threads: usize,
    pub exit_code: i32,
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).map_err(|e| Error::Internal(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

fn summary(path: u64, metrics: crate::boundary_stats::PathMetrics) -> PathSummary {
    PathSummary::new(path, metrics)
}

fn nak_summary(path: u64, rec: &NakPathRecord, split: f64) -> PathSummary {
    PathSummary { theta1_tail: nak_theta1_tail(rec, split), ..summary(path, nak_path_metrics(rec, split)) }
}

fn run_path(
    cfg: &SimConfig,
    spec: &SpaceTimeSpec,
    rw: Option<&RwSimulator>,
    th: &Thresholds,
    i: u64,
) -> Result<PathOutcome> {
    let n = &cfg.numerics;
    let key = NoiseKey::new(cfg.ensemble.seed, i);
    let emit = cfg.outputs.emit_paths;
    let want_trace = i == 0;
    let mut out = PathOutcome::default();
    match spec.kind {
        SpaceTimeKind::Rw => {
            let sim = rw.ok_or_else(|| Error::Internal("no simulator for an rw run".into()))?;
            match sim.simulate(key) {
                Ok(rec) => {
                    out.summary = Some(summary(i, rw_path_metrics(spec, &rec, th.split, th.lyapunov_window)));
                    out.theta1 = rec.samples.last().and_then(|x| x.theta.first().copied());
                    if emit {
                        out.jsonl = Some(jsonl(&rec.samples)?);
                    }
                    if want_trace {
                        out.trace = Some(PlotSeries {
                            s: rec.samples.iter().map(|x| x.s).collect(),
                            columns: vec![
                                ("t".into(), rec.samples.iter().map(|x| x.t).collect()),
                                ("tdot".into(), rec.samples.iter().map(|x| x.tdot).collect()),
                                ("log_tdot".into(), rec.samples.iter().map(|x| x.tdot.ln()).collect()),
                            ],
                        });
                    }
                }
                Err(a) => out.error = Some(a.error.to_string()),
            }
        }
        SpaceTimeKind::Minkowski => {
            let start = PhaseState::default_start(spec, n.t0, n.tdot0)?;
            match simulate_path(spec, &start, n.ds, n.s_max, key, n.record_every) {
                Ok(rec) => {
                    out.summary = Some(summary(i, base_path_metrics(&rec, th.split, th.lyapunov_window)));
                    out.theta1 = rec.last().map(|x| {
                        let norm = x.xdot.iter().map(|v| v * v).sum::<f64>().sqrt();
                        x.xdot[0] / norm
                    });
                    if emit {
                        out.jsonl = Some(jsonl(&rec.samples)?);
                    }
                    if want_trace {
                        out.trace = Some(PlotSeries {
                            s: rec.samples.iter().map(|x| x.s).collect(),
                            columns: vec![
                                ("t".into(), rec.samples.iter().map(|x| x.t).collect()),
                                ("tdot".into(), rec.samples.iter().map(|x| x.tdot).collect()),
                                ("log_tdot".into(), rec.samples.iter().map(|x| x.tdot.ln()).collect()),
                            ],
                        });
                    }
                }
                Err(a) => out.error = Some(a.error.to_string()),
            }
        }
        SpaceTimeKind::DeSitter | SpaceTimeKind::AntiDeSitter => {
            let group = if spec.kind == SpaceTimeKind::DeSitter { GroupTag::So1dPlus1 } else { GroupTag::So2d };
            let go = |key, start| {
                simulate_nak_path(
                    group,
                    spec.d,
                    spec.sigma,
                    n.ds,
                    n.s_max,
                    n.record_every,
                    n.reorth_cadence,
                    key,
                    start,
                )
            };
            match go(key, None) {
                Ok(rec) => {
                    let p = nak_summary(i, &rec, th.split);
                    out.theta1 = p.metrics.get(crate::boundary_stats::metric::THETA1_LAST).copied();
                    out.summary = Some(p);
                    if emit {
                        out.jsonl = Some(jsonl(&rec.samples)?);
                    }
                    if want_trace {
                        let names: &[&str] = if group == GroupTag::So2d { &["lambda", "mu"] } else { &["beta"] };
                        out.trace = Some(PlotSeries {
                            s: rec.times(),
                            columns: names
                                .iter()
                                .enumerate()
                                .map(|(j, nm)| (nm.to_string(), rec.samples.iter().map(|x| x.a_params[j]).collect()))
                                .collect(),
                        });
                    }
                }
                Err(a) => out.error = Some(a.error.to_string()),
            }
            if group == GroupTag::So1dPlus1 && out.error.is_none() {
                let start = antipodal_start(group, spec.d)?;
                let j = ANTIPODAL_OFFSET + i;
                match go(NoiseKey::new(cfg.ensemble.seed, j), Some(&start)) {
                    Ok(rec) => out.antipodal = Some(nak_summary(j, &rec, th.split)),
                    Err(a) => out.error = Some(format!("antipodal start: {}", a.error)),
                }
            }
        }
    }
    if out.error.is_some() {
        out.summary = None;
        out.antipodal = None;
    }
    Ok(out)
}

/// Worker count: `LD_THREADS` when set to a positive integer, else rayon's
/// default.
pub fn worker_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

/// Simulates the ensemble and evaluates its checks. Writes nothing.
pub fn execute(cfg: &SimConfig, threads: usize) -> Result<RunResult> {
    cfg.validate()?;
    let spec = cfg.spec()?;
    let th = cfg.thresholds()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Internal(e.to_string()))?;
    // regime classification integrates the warp numerically; do it once
    let rw = match spec.kind {
        SpaceTimeKind::Rw => Some(RwSimulator::new(&spec, cfg.numerics.clone())?),
        _ => None,
    };
    let n = cfg.ensemble.paths as u64;
    let outcomes: Vec<Result<PathOutcome>> =
        pool.install(|| (0..n).into_par_iter().map(|i| run_path(cfg, &spec, rw.as_ref(), &th, i)).collect());
    let mut ens = Ensemble { requested: cfg.ensemble.paths, ..Ensemble::default() };
    let mut res_files = vec![];
    let mut trace = None;
    let mut theta = vec![];
    let mut aborted = vec![];
    for (i, o) in outcomes.into_iter().enumerate() {
        let o = o?;
        if let Some(e) = o.error {
            ens.aborted += 1;
            aborted.push((i as u64, e));
        }
        ens.paths.extend(o.summary);
        ens.antipodal.extend(o.antipodal);
        if let Some(text) = o.jsonl {
            res_files.push((i as u64, text));
        }
        if o.trace.is_some() {
            trace = o.trace;
        }
        theta.extend(o.theta1);
    }
    let summary = verdict_suite(&spec, &ens, &th, cfg.checks.registry.as_deref());
    Ok(RunResult { ensemble: ens, summary, path_files: res_files, trace, terminal_theta: theta, aborted })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Writes the summary, per-path files and plot data under the configured
/// directory.
pub fn write_artifacts(cfg: &SimConfig, r: &RunResult) -> Result<()> {
    let dir = &cfg.outputs.directory;
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())));
    mkdir(dir)?;
    let fmts = &cfg.outputs.formats;
    if fmts.contains(&OutputFormat::Json) {
        let text = serde_json::to_string_pretty(&r.summary).map_err(|e| Error::Internal(e.to_string()))?;
        write_file(&dir.join("summary.json"), &(text + "\n"))?;
    }
    if fmts.contains(&OutputFormat::Csv) {
        write_file(&dir.join("summary.csv"), &r.summary.to_csv()?)?;
    }
    if !r.path_files.is_empty() {
        let pdir = dir.join("paths");
        mkdir(&pdir)?;
        for (i, text) in &r.path_files {
            write_file(&pdir.join(format!("path_{i:06}.jsonl")), text)?;
        }
    }
    if fmts.contains(&OutputFormat::Plotdata) {
        let pdir = dir.join("plot");
        mkdir(&pdir)?;
        let trace = r.trace.clone().unwrap_or_default();
        write_file(&pdir.join("trace.csv"), &trace_csv(&trace)?)?;
        let first = trace.columns.iter().find(|(n, _)| n == "log_tdot").or(trace.columns.first());
        if let Some((name, _)) = first {
            let th = cfg.thresholds()?;
            write_file(&pdir.join("slope.csv"), &slope_csv(&trace, name, th.lyapunov_window)?)?;
        }
        write_file(&pdir.join("histogram.csv"), &histogram_csv(&r.terminal_theta, HISTOGRAM_BINS)?)?;
    }
    Ok(())
}

fn exit_code_of(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) => exit::INVALID_CONFIG,
        Error::Io(_) => exit::IO_FAILURE,
        _ => exit::FAIL,
    }
}

/// Full `simulate`: validate, run, write, report. Returns the exit status.
/// An invalid configuration writes nothing.
pub fn run(cfg: &SimConfig) -> i32 {
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return exit::INVALID_CONFIG;
    }
    let threads = worker_count();
    let started = Instant::now();
    let r = match execute(cfg, threads) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code_of(&e);
        }
    };
    let code = r.summary.exit_code();
    let finish = || -> Result<()> {
        write_artifacts(cfg, &r)?;
        let manifest = Manifest {
            config_hash: cfg.hash()?,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_seconds: started.elapsed().as_secs_f64(),
            finished_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            paths: r.ensemble.requested,
            aborted: r.ensemble.aborted,
            threads,
            exit_code: code,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Internal(e.to_string()))?;
        write_file(&cfg.outputs.directory.join("manifest.json"), &(text + "\n"))
    };
    if let Err(e) = finish() {
        eprintln!("error: {e}");
        return exit_code_of(&e);
    }
    for (i, e) in &r.aborted {
        eprintln!("path {i} aborted: {e}");
    }
    for (name, o) in &r.summary.verdicts {
        eprintln!("{name}: {:?} ({:e} vs {}) {}", o.verdict, o.statistic, o.threshold, o.detail);
    }
    code
}
