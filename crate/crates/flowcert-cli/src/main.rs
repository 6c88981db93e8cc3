//! Command-line front end: load a problem, run one stage of the
//! pipeline, drop machine-readable reports in the output directory, and
//! signal the verdict through the exit code.
//!
//! Exit codes are part of the interface: 0 success/pass, 1 unsafe or
//! failed validation, 2 unusable input, 3 inconclusive, 4 a synthesis
//! construction stage refused. Verification outcomes never surface as
//! crashes. Reports are JSON, grids and trajectories CSV, and a fixed
//! seed reproduces every byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use flowcert::barrier::{validate_barrier, ExprBarrier};
use flowcert::benchmarks::{by_name, list_benchmarks};
use flowcert::certify::{
    search_certificate_with, validate_certificate_with, CertStatus, CertifyReport, SearchOptions,
};
use flowcert::flow::{lipschitz_estimate, TrajectorySample};
use flowcert::grid::{rasterize_set, GridShape};
use flowcert::pipeline::{default_resolution, synthesize, SynthesisConfig, SynthesisOutcome};
use flowcert::problem::{parse_problem, SafetyProblem};
use flowcert::reach::{reach_interval, ReachParams};

const EXIT_OK: u8 = 0;
const EXIT_UNSAFE: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_INCONCLUSIVE: u8 = 3;
const EXIT_STAGE: u8 = 4;

#[derive(Parser)]
#[command(
    name = "flowcert",
    version,
    about = "Grid-based safety verification and barrier synthesis for smooth vector fields"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Over-approximate the disturbed reach set over the horizon
    Reach(RunArgs),
    /// Search for an invariant certificate set and validate it
    Certify(RunArgs),
    /// Full pipeline: certificate, exit times, smoothing, barrier
    Synthesize(RunArgs),
    /// Validate a closed-form barrier expression against a problem
    CheckBarrier(CheckArgs),
    /// List built-in benchmarks, or print one's problem file
    Bench(BenchArgs),
}

#[derive(Args)]
struct Source {
    /// Problem description file
    #[arg(long, value_name = "PATH", conflicts_with = "bench")]
    problem: Option<PathBuf>,
    /// Built-in benchmark name
    #[arg(long, value_name = "NAME")]
    bench: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: Source,
    /// Disturbance bound
    #[arg(long, default_value_t = 0.1)]
    eps: f64,
    /// Invariance step
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
    /// Time horizon
    #[arg(long, default_value_t = 20.0)]
    tmax: f64,
    /// Cells per axis: one count for all axes, or comma-separated
    #[arg(long, value_name = "N[,N...]")]
    grid: Option<String>,
    /// Saturation level of the assembled barrier
    #[arg(long, default_value_t = 0.2)]
    clamp: f64,
    /// Smoothing kernel radius; defaults to four cells
    #[arg(long, value_name = "F")]
    kernel_width: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report directory
    #[arg(long, default_value = "out", value_name = "DIR")]
    out: PathBuf,
    /// Sampling budget for validation
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
}

#[derive(Args)]
struct CheckArgs {
    /// Barrier candidate as an expression in x1, x2, ...
    barrier: String,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// Print this benchmark's problem file instead of the list
    #[arg(long, value_name = "NAME")]
    bench: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Reach(a) => cmd_reach(&a),
        Command::Certify(a) => cmd_certify(&a),
        Command::Synthesize(a) => cmd_synthesize(&a),
        Command::CheckBarrier(a) => cmd_check_barrier(&a),
        Command::Bench(a) => cmd_bench(&a),
    };
    ExitCode::from(code.unwrap_or_else(|msg| {
        eprintln!("error: {msg}");
        EXIT_INPUT
    }))
}

/// `Err` means unusable input; every verdict is an `Ok` code.
type CmdResult = Result<u8, String>;

fn load_problem(src: &Source) -> Result<SafetyProblem, String> {
    let text = match (&src.problem, &src.bench) {
        (Some(path), None) => fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?,
        (None, Some(name)) => by_name(name)
            .ok_or_else(|| {
                let known: Vec<&str> = list_benchmarks().iter().map(|b| b.name).collect();
                format!("unknown benchmark {name:?}; built-ins: {}", known.join(", "))
            })?
            .text
            .to_string(),
        _ => return Err("exactly one of --problem or --bench is required".into()),
    };
    parse_problem(&text).map_err(|e| e.to_string())
}

fn parse_grid(spec: Option<&str>, dim: usize) -> Result<Vec<usize>, String> {
    let Some(spec) = spec else {
        return Ok(vec![default_resolution(dim); dim]);
    };
    let counts: Vec<usize> = spec
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad cell count {part:?} in --grid"))
        })
        .collect::<Result<_, _>>()?;
    match counts.as_slice() {
        [] => Err("--grid needs at least one count".into()),
        [n] => Ok(vec![*n; dim]),
        _ if counts.len() == dim => Ok(counts),
        _ => Err(format!(
            "--grid lists {} axes for a {dim}-dimensional problem",
            counts.len()
        )),
    }
}

fn write_report<P: Serialize>(dir: &Path, name: &str, payload: &P) -> Result<PathBuf, String> {
    let mut text = serde_json::to_string_pretty(payload)
        .map_err(|e| format!("cannot serialize {name}: {e}"))?;
    text.push('\n');
    write_bytes(dir, name, text.as_bytes())
}

fn write_bytes(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, String> {
    fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    Ok(path)
}

fn witness_csv(sample: &TrajectorySample) -> String {
    let mut out = String::new();
    for (t, x) in sample.times.iter().zip(&sample.states) {
        write!(out, "{t}").unwrap();
        for c in x {
            write!(out, ",{c}").unwrap();
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct ReachReport {
    cells: usize,
    occupied: usize,
    fraction: f64,
    escaped: bool,
    unsafe_contact: bool,
    eps: f64,
    horizon: f64,
    grid: Vec<usize>,
}

fn cmd_reach(a: &RunArgs) -> CmdResult {
    let p = load_problem(&a.source)?;
    let grid = parse_grid(a.grid.as_deref(), p.dim)?;
    if !(a.eps > 0.0) || !(a.tmax > 0.0) || !(a.delta > 0.0) {
        return Err("eps, delta and tmax must be positive".into());
    }
    let shape = GridShape::new(&p.domain, &grid);
    let init = rasterize_set(&p.init, &shape);
    if init.is_empty() {
        return Err("the initial set misses every grid cell".into());
    }
    let lip = lipschitz_estimate(&p, 2048);
    let rp = ReachParams::new(a.eps, a.delta / 8.0, lip);
    let w = reach_interval(&init, &p, &rp, a.tmax);
    let unsafe_contact = !w
        .is_disjoint(&rasterize_set(&p.unsafe_set, &shape))
        .expect("same shape by construction");

    let report = ReachReport {
        cells: shape.cells(),
        occupied: w.occupied_count(),
        fraction: w.occupied_count() as f64 / shape.cells() as f64,
        escaped: w.escaped,
        unsafe_contact,
        eps: a.eps,
        horizon: a.tmax,
        grid,
    };
    let mut csv = Vec::new();
    w.write_csv(&mut csv).map_err(|e| e.to_string())?;
    write_bytes(&a.out, "reach.csv", &csv)?;
    write_report(&a.out, "reach.json", &report)?;
    println!(
        "reach: {} of {} cells over t <= {}, escaped = {}, unsafe contact = {}",
        report.occupied, report.cells, a.tmax, report.escaped, unsafe_contact
    );
    Ok(if w.escaped || unsafe_contact {
        EXIT_UNSAFE
    } else {
        EXIT_OK
    })
}

fn cmd_certify(a: &RunArgs) -> CmdResult {
    let p = load_problem(&a.source)?;
    let grid = parse_grid(a.grid.as_deref(), p.dim)?;
    let shape = GridShape::new(&p.domain, &grid);
    let opts = SearchOptions {
        seed: a.seed,
        ..SearchOptions::default()
    };
    let result = search_certificate_with(&p, a.eps, a.delta, a.tmax, &shape, &opts)
        .map_err(|e| e.to_string())?;

    let mut report = CertifyReport {
        status: result.status,
        t_found: result.t_found,
        eps: a.eps,
        delta: a.delta,
        grid,
        verdicts: None,
        witness_csv_path: None,
    };
    let code = match result.status {
        CertStatus::Found => {
            let v = result.v.as_ref().expect("found result carries its set");
            let verdicts = validate_certificate_with(v, &p, a.eps, a.delta, a.trials, &opts)
                .map_err(|e| e.to_string())?;
            if !verdicts.all_pass() {
                eprintln!("warning: found certificate failed re-validation");
            }
            report.verdicts = Some(verdicts);
            let mut csv = Vec::new();
            v.write_csv(&mut csv).map_err(|e| e.to_string())?;
            write_bytes(&a.out, "v.csv", &csv)?;
            EXIT_OK
        }
        CertStatus::UnsafeSuspect => {
            let witness = result.witness.as_ref().expect("suspect carries a witness");
            write_bytes(&a.out, "witness.csv", witness_csv(witness).as_bytes())?;
            report.witness_csv_path = Some("witness.csv".into());
            EXIT_UNSAFE
        }
        CertStatus::Inconclusive => EXIT_INCONCLUSIVE,
    };
    write_report(&a.out, "certify.json", &report)?;
    match result.status {
        CertStatus::Found => println!(
            "certify: found at t = {}",
            result.t_found.expect("found result carries its time")
        ),
        CertStatus::UnsafeSuspect => println!("certify: unsafe suspect, witness written"),
        CertStatus::Inconclusive => println!("certify: inconclusive"),
    }
    Ok(code)
}

fn cmd_synthesize(a: &RunArgs) -> CmdResult {
    let p = load_problem(&a.source)?;
    let cfg = SynthesisConfig {
        eps: a.eps,
        delta: a.delta,
        t_max: a.tmax,
        grid: parse_grid(a.grid.as_deref(), p.dim)?,
        clamp: a.clamp,
        kernel_width: a.kernel_width,
        seed: a.seed,
        trials: a.trials,
    };
    let outcome = synthesize(&p, &cfg).map_err(|e| e.to_string())?;
    write_report(&a.out, "synthesize.json", &outcome.summary())?;

    let code = match &outcome {
        SynthesisOutcome::Synthesized(run) => {
            let v = &run.field.band.v;
            let mut csv = Vec::new();
            v.write_csv(&mut csv).map_err(|e| e.to_string())?;
            write_bytes(&a.out, "v.csv", &csv)?;
            csv.clear();
            run.field.write_csv(&mut csv).map_err(|e| e.to_string())?;
            write_bytes(&a.out, "nu.csv", &csv)?;
            csv.clear();
            let sweep = GridShape::new(&p.domain, &cfg.grid);
            run.barrier
                .write_csv(&p, &sweep, &mut csv)
                .map_err(|e| e.to_string())?;
            write_bytes(&a.out, "barrier.csv", &csv)?;
            println!(
                "synthesize: barrier validated, eps_b = {}",
                run.report.eps_b
            );
            EXIT_OK
        }
        SynthesisOutcome::UnsafeSuspect(cert) => {
            let witness = cert.witness.as_ref().expect("suspect carries a witness");
            write_bytes(&a.out, "witness.csv", witness_csv(witness).as_bytes())?;
            println!("synthesize: unsafe suspect, witness written");
            EXIT_UNSAFE
        }
        SynthesisOutcome::Inconclusive(_) => {
            println!("synthesize: inconclusive");
            EXIT_INCONCLUSIVE
        }
        SynthesisOutcome::Failed(f) => {
            println!("synthesize: {} stage refused: {}", f.stage, f.message);
            EXIT_STAGE
        }
    };
    Ok(code)
}

fn cmd_check_barrier(a: &CheckArgs) -> CmdResult {
    let p = load_problem(&a.run.source)?;
    let grid = parse_grid(a.run.grid.as_deref(), p.dim)?;
    if a.run.trials == 0 {
        return Err("validation needs at least one trial".into());
    }
    let beta = ExprBarrier::parse(&a.barrier, p.dim)
        .map_err(|e| format!("barrier expression: {e}"))?;
    let sweep = GridShape::new(&p.domain, &grid);
    let report = validate_barrier(&beta, &p, a.run.trials, &sweep);
    write_report(&a.run.out, "check.json", &report)?;
    if report.passed {
        println!("check-barrier: pass, eps_b = {}", report.eps_b);
        Ok(EXIT_OK)
    } else {
        println!(
            "check-barrier: fail (floor {}, growth {}, ceiling {})",
            report.init_floor.margin, report.zero_growth.margin, report.unsafe_ceiling.margin
        );
        Ok(EXIT_UNSAFE)
    }
}

#[derive(Serialize)]
struct BenchRow {
    name: &'static str,
    dim: usize,
    known_safe: bool,
    analytic_barrier: Option<&'static str>,
}

fn cmd_bench(a: &BenchArgs) -> CmdResult {
    if let Some(name) = &a.bench {
        let b = by_name(name).ok_or_else(|| format!("unknown benchmark {name:?}"))?;
        print!("{}", b.text);
        return Ok(EXIT_OK);
    }
    let rows: Vec<BenchRow> = list_benchmarks()
        .iter()
        .map(|b| BenchRow {
            name: b.name,
            dim: b.problem().dim,
            known_safe: b.known_safe,
            analytic_barrier: b.analytic_barrier,
        })
        .collect();
    let mut text = serde_json::to_string_pretty(&rows).map_err(|e| e.to_string())?;
    text.push('\n');
    print!("{text}");
    Ok(EXIT_OK)
}
