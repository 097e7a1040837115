use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use serde_json::json;

use relbm::cli_io::{exit, runner, SimConfig};
use relbm::frame_flow::{FrameElement, GroupTag};
use relbm::iwasawa::decompose;
use relbm::spacetime::{classify_regime, Fiber, SpaceTimeSpec, WarpFunction};
use relbm::Error;

#[derive(Parser)]
#[command(name = "relbm", version, about = "Relativistic Brownian motion ensembles and boundary diagnostics")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an ensemble described by a TOML config and evaluate its checks.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// write one JSONL file per path
        #[arg(long)]
        emit_paths: bool,
        /// validate the config and stop
        #[arg(long)]
        check_only: bool,
    },
    /// NAK factorisation of matrices, one row-major matrix per CSV record.
    Decompose {
        /// so1d+1, so2d, so1d or sod+1
        #[arg(long)]
        group: String,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Asymptotic regime of a warp function.
    Classify {
        /// t^A, e^t, e^t^B, cosh, 1 or table:PATH
        #[arg(long)]
        warp: String,
        #[arg(long, default_value = "flat")]
        fiber: String,
        #[arg(long, default_value_t = 3)]
        d: usize,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
    },
}

fn status(code: i32) -> ExitCode {
    ExitCode::from(code.clamp(0, 255) as u8)
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    status(match e {
        // a bad command-line argument is a usage error like a bad config
        Error::InvalidConfig(_) | Error::UnsupportedGroup(_) => exit::INVALID_CONFIG,
        Error::Io(_) => exit::IO_FAILURE,
        _ => exit::FAIL,
    })
}

fn simulate(
    config: PathBuf,
    paths: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    emit_paths: bool,
    check_only: bool,
) -> ExitCode {
    let mut cfg = match SimConfig::load(&config) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    if let Some(n) = paths {
        cfg.ensemble.paths = n;
    }
    if let Some(s) = seed {
        cfg.ensemble.seed = s;
    }
    if let Some(o) = out {
        cfg.outputs.directory = o;
    }
    cfg.outputs.emit_paths |= emit_paths;
    if check_only {
        return match cfg.validate() {
            Ok(()) => {
                println!("config ok");
                status(exit::PASS)
            }
            Err(e) => fail(&e),
        };
    }
    status(runner::run(&cfg))
}

fn decompose_batch(group: &str, input: &PathBuf) -> Result<bool, Error> {
    let group: GroupTag = group.parse()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .from_path(input)
        .map_err(|e| Error::Io(e.to_string()))?;
    let mut all_ok = true;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|v| v.trim().parse::<f64>().map_err(|_| Error::InvalidConfig(format!("record {i}: `{v}`"))))
            .collect::<Result<_, _>>()?;
        let dim = (vals.len() as f64).sqrt().round() as usize;
        let d_of = |dim: usize| match group {
            GroupTag::So1dPlus1 | GroupTag::So2d => dim.checked_sub(2),
            GroupTag::So1d | GroupTag::SoDPlus1 => dim.checked_sub(1),
        };
        let result = if dim * dim != vals.len() {
            Err(Error::Dimension { expected: dim * dim, got: vals.len() })
        } else {
            d_of(dim)
                .ok_or(Error::Dimension { expected: 3, got: dim })
                .and_then(|d| FrameElement::new(group, d, DMatrix::from_row_slice(dim, dim, &vals)))
                .and_then(|g| decompose(&g).map(|c| (c.residual(&g.g), c)))
        };
        let line = match result {
            Ok((residual, c)) => json!({
                "index": i,
                "a_params": c.a_params,
                "nil": c.nil.to_vec(),
                "k": c.k.transpose().as_slice(),
                "residual": residual,
            }),
            Err(e) => {
                all_ok = false;
                json!({ "index": i, "error": e.to_string(), "code": e.code() })
            }
        };
        println!("{line}");
    }
    Ok(all_ok)
}

fn classify(warp: &str, fiber: &str, d: usize, sigma: f64) -> Result<(), Error> {
    let warp: WarpFunction = warp.parse()?;
    let fiber: Fiber = fiber.parse()?;
    let spec = SpaceTimeSpec::rw(fiber, warp, d, sigma);
    spec.validate()?;
    let report = classify_regime(&spec)?;
    let rates = report.lyapunov_prediction(d, sigma);
    let out = json!({
        "regime": report.predicted_regime.name(),
        "report": report,
        "predicted_log_tdot_rate": rates.map(|r| r.0),
        "predicted_log_alpha_rate": rates.map(|r| r.1),
    });
    println!("{}", serde_json::to_string_pretty(&out).map_err(|e| Error::Internal(e.to_string()))?);
    Ok(())
}

fn main() -> ExitCode {
    match Cli::parse().cmd {
        Cmd::Simulate { config, paths, seed, out, emit_paths, check_only } => {
            simulate(config, paths, seed, out, emit_paths, check_only)
        }
        Cmd::Decompose { group, input } => match decompose_batch(&group, &input) {
            Ok(true) => status(exit::PASS),
            Ok(false) => status(exit::FAIL),
            Err(e) => fail(&e),
        },
        Cmd::Classify { warp, fiber, d, sigma } => match classify(&warp, &fiber, d, sigma) {
            Ok(()) => status(exit::PASS),
            Err(e) => fail(&e),
        },
    }
}
