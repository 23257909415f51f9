//! Command-line entry point: `gen`, `quantize`, `eval`, `oracle`, `compare`.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{value_parser, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::beacon::{beacon_matrix, export_scales_json, BeaconConfig, ColumnOrder, QuantizedMatrix};
use crate::error::{Error, Result};
use crate::geometry::Matrix;
use crate::grid::{IntegerGrid, Levels};
use crate::harness::{evaluate, gen_synthetic, write_layer, CalibDist, EvalReport, SyntheticSpec, WeightDist};
use crate::oracle::{exhaustive_best, rtn_matrix, rtn_refit_matrix, DEFAULT_LIMIT};
use crate::tensor_io::{read_quantized, read_tensor, write_quantized};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_FORMAT: i32 = 4;
pub const EXIT_SHAPE: i32 = 5;
pub const EXIT_OTHER: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "beacon", version, about = "Per-channel PTQ with automatic scaling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic layer (w.bcn, x.bcn, x_tilde.bcn)
    Gen(GenArgs),
    /// Quantize a layer and write a BCNQ file plus a JSON report
    Quantize(QuantizeArgs),
    /// Score a stored quantized layer
    Eval(EvalArgs),
    /// Exhaustively search the best codes for tiny channels
    Oracle(OracleArgs),
    /// Compare beacon, rtn and rtn-refit as a CSV table
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CalibKind {
    Gaussian,
    Correlated,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Ordering {
    Sorted,
    Natural,
}

impl From<Ordering> for ColumnOrder {
    fn from(o: Ordering) -> Self {
        match o {
            Ordering::Sorted => ColumnOrder::NormSorted,
            Ordering::Natural => ColumnOrder::Natural,
        }
    }
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    m: usize,
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    n_prime: usize,
    #[arg(long, value_enum, default_value = "gaussian")]
    weight_dist: WeightDist,
    #[arg(long, value_enum, default_value = "correlated")]
    calib_dist: CalibKind,
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    #[arg(long, default_value_t = 0.01)]
    sigma: f64,
}

#[derive(Debug, Args)]
struct Inputs {
    /// Weight tensor, N x N'
    #[arg(long)]
    weights: PathBuf,
    /// Calibration tensor, m x N
    #[arg(long)]
    calib: PathBuf,
    /// Perturbed calibration tensor, m x N; enables error correction
    #[arg(long)]
    calib_tilde: Option<PathBuf>,
}

struct Loaded {
    w: Matrix,
    x: Matrix,
    x_tilde: Option<Matrix>,
}

impl Inputs {
    fn load(&self) -> Result<Loaded> {
        let w = read_tensor(&self.weights)?.to_matrix()?;
        let x = read_tensor(&self.calib)?.to_matrix()?;
        let x_tilde = match &self.calib_tilde {
            Some(p) => Some(read_tensor(p)?.to_matrix()?),
            None => None,
        };
        if x.cols() != w.rows() {
            return Err(Error::Shape(format!(
                "calibration has {} columns but weights have {} rows",
                x.cols(),
                w.rows()
            )));
        }
        if let Some(xt) = &x_tilde {
            if (xt.rows(), xt.cols()) != (x.rows(), x.cols()) {
                return Err(Error::Shape(format!(
                    "perturbed calibration is {}x{}, calibration is {}x{}",
                    xt.rows(),
                    xt.cols(),
                    x.rows(),
                    x.cols()
                )));
            }
        }
        Ok(Loaded { w, x, x_tilde })
    }
}

#[derive(Debug, Args)]
struct GridArgs {
    /// Bit width; the grid has 2^bits points [default: 4]
    #[arg(long, value_parser = value_parser!(u8).range(1..=8), conflicts_with = "levels")]
    bits: Option<u8>,
    /// Grid size when it is not a power of two, e.g. 3 for a ternary grid
    #[arg(long, value_parser = value_parser!(u32).range(2..=256))]
    levels: Option<u32>,
}

impl GridArgs {
    fn levels(&self) -> Result<Levels> {
        match (self.bits, self.levels) {
            (_, Some(l)) => Levels::new(l),
            (Some(b), None) => Levels::from_bits(b),
            (None, None) => Levels::from_bits(4),
        }
    }
}

fn bits_label(levels: Levels) -> String {
    if levels.is_power_of_two() {
        levels.storage_bits().to_string()
    } else {
        format!("{:.2}", (levels.count() as f64).log2())
    }
}

#[derive(Debug, Args)]
struct SolverArgs {
    /// Maximum refinement sweeps
    #[arg(long, default_value_t = 6)]
    loops: usize,
    #[arg(long, value_enum, default_value = "sorted")]
    ordering: Ordering,
    /// Always run every sweep even after the codes stop changing
    #[arg(long)]
    no_early_stop: bool,
    /// Worker threads; output is identical for any value
    #[arg(long, env = "BEACON_THREADS")]
    threads: Option<usize>,
}

impl SolverArgs {
    fn config(&self, levels: Levels, error_correction: bool) -> BeaconConfig {
        BeaconConfig {
            levels,
            max_loops: self.loops,
            ordering: self.ordering.into(),
            error_correction,
            early_stop: !self.no_early_stop,
        }
    }
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Output BCNQ file
    #[arg(long)]
    out: PathBuf,
    /// JSON report path
    #[arg(long)]
    report: Option<PathBuf>,
    /// JSON per-channel scale export
    #[arg(long)]
    scales: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// BCNQ file to score
    #[arg(long)]
    quantized: PathBuf,
    /// JSON report path (stdout if absent)
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    grid: GridArgs,
    /// Only search this column
    #[arg(long)]
    column: Option<usize>,
    /// Maximum number of candidates per channel
    #[arg(long, default_value_t = DEFAULT_LIMIT)]
    limit: u64,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// CSV path (stdout if absent)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct QuantizeReport {
    method: &'static str,
    levels: u32,
    bits: u8,
    loops: usize,
    ordering: ColumnOrder,
    error_correction: bool,
    early_stop: bool,
    metrics: EvalReport,
}

#[derive(Serialize)]
struct OracleLine {
    col: usize,
    cos: f64,
    c: f64,
    z: i32,
    q: Vec<i32>,
    enumerated: u64,
}

#[derive(Debug, Serialize)]
struct CompareRow {
    method: &'static str,
    bits: String,
    rel_error: f64,
    mean_cos: f64,
    wall_ms: f64,
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::ThreadPool(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match path {
        Some(p) => fs::write(p, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let spec = SyntheticSpec {
        seed: args.seed,
        m: args.m,
        n: args.n,
        n_prime: args.n_prime,
        weight_dist: args.weight_dist,
        calib_dist: match args.calib_dist {
            CalibKind::Gaussian => CalibDist::Gaussian,
            CalibKind::Correlated => CalibDist::Correlated { rho: args.rho },
        },
        perturb_sigma: args.sigma,
    };
    let layer = gen_synthetic(&spec)?;
    let files = write_layer(&layer, &args.out_dir)?;
    println!("{}", files.weights.display());
    println!("{}", files.calib.display());
    println!("{}", files.calib_tilde.display());
    Ok(())
}

fn cmd_quantize(args: &QuantizeArgs) -> Result<()> {
    let levels = args.grid.levels()?;
    let data = args.inputs.load()?;
    let cfg = args.solver.config(levels, data.x_tilde.is_some());
    let start = Instant::now();
    let qm = with_threads(args.solver.threads, || {
        beacon_matrix(&data.x, data.x_tilde.as_ref(), &data.w, &cfg)
    })??;
    let wall_ms = elapsed_ms(start);

    write_quantized(&args.out, &qm.to_file()?)?;
    if let Some(path) = &args.scales {
        fs::write(path, export_scales_json(&qm)? + "\n")?;
    }
    let mut metrics = evaluate(&data.w, &data.x, data.x_tilde.as_ref(), &qm)?;
    metrics.wall_ms = wall_ms;
    let report = QuantizeReport {
        method: "beacon",
        levels: levels.count(),
        bits: levels.storage_bits(),
        loops: cfg.max_loops,
        ordering: cfg.ordering,
        error_correction: cfg.error_correction,
        early_stop: cfg.early_stop,
        metrics,
    };
    match &args.report {
        Some(p) => write_json(Some(p), &report),
        None => {
            eprintln!(
                "rel_error {:.6}  mean_cos {:.6}  negative_scales {}",
                report.metrics.rel_error, report.metrics.mean_cosine, report.metrics.negative_scales
            );
            Ok(())
        }
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let data = args.inputs.load()?;
    let qm = QuantizedMatrix::from_file(&read_quantized(&args.quantized)?)?;
    let report = evaluate(&data.w, &data.x, data.x_tilde.as_ref(), &qm)?;
    write_json(args.report.as_deref(), &report)
}

fn cmd_oracle(args: &OracleArgs) -> Result<()> {
    let levels = args.grid.levels()?;
    let data = args.inputs.load()?;
    let cols: Vec<usize> = match args.column {
        Some(j) if j >= data.w.cols() => {
            return Err(Error::Shape(format!(
                "column {j} out of range for {} columns",
                data.w.cols()
            )))
        }
        Some(j) => vec![j],
        None => (0..data.w.cols()).collect(),
    };
    let mut out = io::stdout().lock();
    for j in cols {
        let w = data.w.col(j);
        let grid = IntegerGrid::for_channel(w, levels)?;
        let r = exhaustive_best(&data.x, data.x_tilde.as_ref(), w, &grid, args.limit)?;
        let line = OracleLine {
            col: j,
            cos: r.cos_star,
            c: r.c_star,
            z: grid.zero_point,
            q: r.q_star,
            enumerated: r.enumerated,
        };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let levels = args.grid.levels()?;
    let data = args.inputs.load()?;
    let xt = data.x_tilde.as_ref();
    let cfg = args.solver.config(levels, xt.is_some());
    let bits = bits_label(levels);

    let mut rows = Vec::new();
    let mut push = |method: &'static str, qm: QuantizedMatrix, start: Instant| -> Result<()> {
        let wall_ms = elapsed_ms(start);
        let r = evaluate(&data.w, &data.x, xt, &qm)?;
        rows.push(CompareRow {
            method,
            bits: bits.clone(),
            rel_error: r.rel_error,
            mean_cos: r.mean_cosine,
            wall_ms,
        });
        Ok(())
    };

    let start = Instant::now();
    let qm = with_threads(args.solver.threads, || beacon_matrix(&data.x, xt, &data.w, &cfg))??;
    push("beacon", qm, start)?;
    let start = Instant::now();
    push("rtn", rtn_matrix(&data.w, levels)?, start)?;
    let start = Instant::now();
    push("rtn_refit", rtn_refit_matrix(&data.x, xt, &data.w, levels)?, start)?;

    let sink: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(fs::File::create(p)?),
        None => Box::new(io::stdout()),
    };
    let mut wtr = csv::Writer::from_writer(sink);
    for row in &rows {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) => EXIT_IO,
        Error::BadMagic { .. }
        | Error::UnsupportedDtype(_)
        | Error::UnsupportedVersion(_)
        | Error::Truncated { .. }
        | Error::TrailingBytes(_)
        | Error::NonFinite { .. }
        | Error::DimMismatch { .. }
        | Error::CodeOutOfRange { .. } => EXIT_FORMAT,
        Error::Shape(_) | Error::ShortCalibration { .. } => EXIT_SHAPE,
        Error::UnsupportedBits(_) | Error::UnsupportedLevels(_) | Error::InvalidSpec(_) => EXIT_USAGE,
        _ => EXIT_OTHER,
    }
}

/// Runs the CLI on `argv` (including the program name) and returns the exit
/// code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Compare(a) => cmd_compare(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
