//! Command-line front end: `verify`, `sweep`, `compare`, and `scale`.
//!
//! Every subcommand spins up an in-process worker pool, runs the requested
//! solves, and (except `verify`) emits rows in the fixed CSV schema
//! [`super::CSV_HEADER`]. Rank 0's rows are the output; `--out` writes them
//! to a file, otherwise they go to stdout. `--no-timing` leaves the seconds
//! column empty so repeated runs are byte-identical.
//!
//! Exit codes: 0 success, 1 runtime or verification failure, 2 usage.

use super::{
    dense_reference_solve, gather_global, mean_difference, random_smooth_source, render_csv,
    single_mode_solution, single_mode_source, BenchRow, SpinupSource, DENSE_ORACLE_MAX_POINTS,
};
use crate::comm::{run_spmd, Communicator};
use crate::grid::{GridSpec, Orientation, PencilLayout, ProcessGrid};
use crate::krylov::{IterativeSolver, Method, SolverOptions};
use crate::pencil::{DistributedField, ElemKind};
use crate::spectral::SpectralPlan;
use crate::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::ffi::OsString;
use std::time::Instant;

/// Perturbation decay per step of the spin-up sequence used by `compare
/// --steps`.
const SPINUP_DECAY: f64 = 0.5;

#[derive(Parser, Debug)]
#[command(
    name = "pencil-poisson",
    version,
    about = "Distributed Poisson pressure solvers on a pencil-decomposed grid"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the single-mode check problem and compare against the exact
    /// discrete answer (and the dense reference, on small grids).
    Verify(VerifyArgs),
    /// Sweep iterative tolerances against the direct solution.
    Sweep(SweepArgs),
    /// Run the direct solver and every iterative variant on one problem.
    Compare(CompareArgs),
    /// Weak scaling: fixed per-worker block, growing worker counts.
    Scale(ScaleArgs),
}

fn parse_usize3(s: &str) -> std::result::Result<[usize; 3], String> {
    parse_triple(s)
}

fn parse_f64x3(s: &str) -> std::result::Result<[f64; 3], String> {
    parse_triple(s)
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> std::result::Result<[T; 3], String>
where
    T: Default + Copy,
    T::Err: std::fmt::Display,
{
    let mut out = [T::default(); 3];
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got '{s}'"));
    }
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part.trim().parse().map_err(|e| format!("'{part}': {e}"))?;
    }
    Ok(out)
}

#[derive(Args, Debug, Clone)]
struct GridArgs {
    /// Global grid points as NX,NY,NZ.
    #[arg(long, value_parser = parse_usize3)]
    grid: [usize; 3],
    /// Grid spacing as DX,DY,DZ.
    #[arg(long, value_parser = parse_f64x3, default_value = "1,1,1")]
    spacing: [f64; 3],
}

impl GridArgs {
    fn to_spec(&self) -> Result<GridSpec> {
        GridSpec::new(
            self.grid[0],
            self.grid[1],
            self.grid[2],
            self.spacing[0],
            self.spacing[1],
            self.spacing[2],
        )
    }
}

fn default_workers() -> usize {
    std::env::var("PENCIL_POISSON_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1)
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum SolverChoice {
    Fft,
    Cg,
    Bicgstab,
}

impl SolverChoice {
    fn method(self) -> Option<Method> {
        match self {
            SolverChoice::Fft => None,
            SolverChoice::Cg => Some(Method::ConjugateGradient),
            SolverChoice::Bicgstab => Some(Method::BiCgStab),
        }
    }
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    grid: GridArgs,
    /// Worker count (default: PENCIL_POISSON_WORKERS or 1).
    #[arg(long, default_value_t = default_workers())]
    workers: usize,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, default_value_t = default_workers())]
    workers: usize,
    /// Iterative solver to sweep.
    #[arg(long, value_enum, default_value_t = SolverChoice::Cg)]
    solver: SolverChoice,
    /// Tolerances to sweep, comma separated.
    #[arg(long = "tol-list", value_delimiter = ',', default_value = "1e-2,1e-4,1e-6,1e-8")]
    tol_list: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    no_postcond: bool,
    #[arg(long)]
    no_overlap: bool,
    /// Leave the seconds column empty for reproducible output.
    #[arg(long)]
    no_timing: bool,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    out: Option<std::path::PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, default_value_t = default_workers())]
    workers: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Number of spin-up steps; each decays the source perturbation.
    #[arg(long, default_value_t = 1)]
    steps: usize,
    /// Carry each iterative solver's solution into the next step.
    #[arg(long)]
    warm_start: bool,
    #[arg(long)]
    no_overlap: bool,
    #[arg(long)]
    no_timing: bool,
    #[arg(long)]
    out: Option<std::path::PathBuf>,
}

#[derive(Args, Debug)]
struct ScaleArgs {
    /// Per-worker block as NX,NY,NZ; the global grid grows with the process
    /// grid.
    #[arg(long = "local-grid", value_parser = parse_usize3, default_value = "16,16,16")]
    local_grid: [usize; 3],
    #[arg(long, value_parser = parse_f64x3, default_value = "1,1,1")]
    spacing: [f64; 3],
    /// Worker counts to run, comma separated.
    #[arg(long = "workers-list", value_delimiter = ',', default_value = "1,2,4,8")]
    workers_list: Vec<usize>,
    #[arg(long, value_enum, default_value_t = SolverChoice::Fft)]
    solver: SolverChoice,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    no_timing: bool,
    #[arg(long)]
    out: Option<std::path::PathBuf>,
}

/// Parse arguments and run; returns the process exit code. Kept separate
/// from `main` so tests can drive it in-process.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let run = match cli.command {
        Command::Verify(a) => run_verify(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Compare(a) => run_compare(a),
        Command::Scale(a) => run_scale(a),
    };
    match run {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn z_layout(grid: GridSpec, workers: usize) -> Result<PencilLayout> {
    let pgrid = ProcessGrid::closest_to_square(workers)?;
    PencilLayout::new(grid, pgrid, Orientation::Z)
}

/// Global max via the sum reduction: each rank owns one slot.
fn global_max(comm: &Communicator, value: f64) -> Result<f64> {
    let mut slots = vec![0.0; comm.size()];
    slots[comm.rank()] = value;
    let all = comm.allreduce_sum(&slots)?;
    Ok(all.iter().fold(0.0f64, |a, &b| a.max(b)))
}

fn emit(rows: &[BenchRow], include_timing: bool, out: Option<&std::path::Path>) -> Result<i32> {
    let csv = render_csv(rows, include_timing);
    match out {
        Some(path) => std::fs::write(path, csv)
            .map_err(|e| crate::Error::InvalidArgument(format!("writing {path:?}: {e}")))?,
        None => print!("{csv}"),
    }
    Ok(0)
}

fn run_verify(args: VerifyArgs) -> Result<i32> {
    let grid = args.grid.to_spec()?;
    let layout = z_layout(grid, args.workers)?;
    let source = single_mode_source(grid);
    let solution = single_mode_solution(grid);
    let results = run_spmd(args.workers, |comm| {
        let rank = comm.rank();
        let b = DistributedField::from_global_fn(layout, rank, source.as_fn())?;
        let mut plan = SpectralPlan::new(layout, rank)?;
        let p = plan.solve(&b, &comm)?;
        let expected = DistributedField::from_global_fn(layout, rank, solution.as_fn())?;
        let local_err = p
            .data
            .iter()
            .zip(&expected.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let max_err = global_max(&comm, local_err)?;
        let residue = global_max(&comm, plan.imag_residue())?;
        let dense_diff = if grid.total_points() <= DENSE_ORACLE_MAX_POINTS {
            let b_global = gather_global(&b, &comm)?;
            let dense = dense_reference_solve(grid, &b_global)?;
            let mut dense_field = DistributedField::zeros(layout, rank, ElemKind::Real)?;
            let bbox = layout.local_box(rank)?;
            let mut i = 0;
            for x in bbox.range(crate::grid::Axis::X) {
                for y in bbox.range(crate::grid::Axis::Y) {
                    for z in bbox.range(crate::grid::Axis::Z) {
                        dense_field.data[i] = dense[(x * grid.ny + y) * grid.nz + z];
                        i += 1;
                    }
                }
            }
            Some(mean_difference(&p, &dense_field, &comm)?)
        } else {
            None
        };
        Ok((max_err, residue, dense_diff))
    })?;
    let (max_err, residue, dense_diff) = results[0];
    let ok = max_err <= 1e-10 && residue <= 1e-10 && dense_diff.map_or(true, |d| d <= 1e-9);
    let dense_txt = dense_diff
        .map(|d| format!("{d:e}"))
        .unwrap_or_else(|| "skipped".into());
    println!(
        "verify grid={}x{}x{} workers={} max_error={:e} imag_residue={:e} dense_diff={} -> {}",
        grid.nx,
        grid.ny,
        grid.nz,
        args.workers,
        max_err,
        residue,
        dense_txt,
        if ok { "ok" } else { "FAILED" },
    );
    Ok(if ok { 0 } else { 1 })
}

/// Timed direct solve plus its report row.
fn fft_row(
    layout: PencilLayout,
    b: &DistributedField,
    comm: &Communicator,
    workers: usize,
) -> Result<(DistributedField, BenchRow)> {
    let mut plan = SpectralPlan::new(layout, b.rank)?;
    let mut p = DistributedField::zeros(layout, b.rank, ElemKind::Real)?;
    let started = Instant::now();
    plan.solve_into(b, &mut p, comm)?;
    let seconds = started.elapsed().as_secs_f64();
    let row = BenchRow {
        solver: "fft".into(),
        seconds: Some(seconds),
        workers,
        peak_bytes: Some(plan.buffer_bytes() as u64),
        ..BenchRow::default()
    };
    Ok((p, row))
}

fn solver_id(method: Method, postcond: bool, overlap: bool) -> String {
    let mut id = String::from(match method {
        Method::ConjugateGradient => "cg",
        Method::BiCgStab => "bicgstab",
    });
    if !postcond {
        id.push_str("-nopc");
    }
    if !overlap {
        id.push_str("-noov");
    }
    id
}

fn run_sweep(args: SweepArgs) -> Result<i32> {
    let Some(method) = args.solver.method() else {
        eprintln!("sweep needs an iterative solver (cg or bicgstab)");
        return Ok(2);
    };
    let grid = args.grid.to_spec()?;
    let layout = z_layout(grid, args.workers)?;
    let source = random_smooth_source(grid, args.seed);
    let workers = args.workers;
    let tols = args.tol_list.clone();
    let postcond = !args.no_postcond;
    let overlap = !args.no_overlap;
    let results = run_spmd(workers, |comm| {
        let rank = comm.rank();
        let b = DistributedField::from_global_fn(layout, rank, source.as_fn())?;
        // Direct solve is the accuracy reference only; one row per tolerance.
        let mut plan = SpectralPlan::new(layout, rank)?;
        let reference = plan.solve(&b, &comm)?;
        let mut rows = Vec::with_capacity(tols.len());
        for &tol in &tols {
            let opts = SolverOptions {
                method,
                tol,
                postcond,
                overlap,
                ..SolverOptions::default()
            };
            let id = solver_id(method, postcond, overlap);
            // A failed solve keeps its row (with empty cells) so the sweep
            // completes and the gap is visible in the CSV.
            let row = match IterativeSolver::new(layout, rank, opts)
                .and_then(|mut s| s.solve(&b, &comm))
            {
                Ok((x, report)) => BenchRow {
                    solver: id,
                    tol: Some(tol),
                    mean_diff: Some(mean_difference(&x, &reference, &comm)?),
                    seconds: Some(report.seconds),
                    iterations: Some(report.iterations as u64),
                    workers,
                    peak_bytes: Some(report.peak_buffer_bytes as u64),
                },
                Err(e) => {
                    if rank == 0 {
                        eprintln!("sweep: {id} at tol {tol:e} failed: {e}");
                    }
                    BenchRow {
                        solver: id,
                        tol: Some(tol),
                        workers,
                        ..BenchRow::default()
                    }
                }
            };
            rows.push(row);
        }
        Ok(rows)
    })?;
    emit(&results[0], !args.no_timing, args.out.as_deref())
}

fn run_compare(args: CompareArgs) -> Result<i32> {
    let grid = args.grid.to_spec()?;
    let layout = z_layout(grid, args.workers)?;
    let sequence = SpinupSource::new(grid, args.seed, SPINUP_DECAY);
    let workers = args.workers;
    let steps = args.steps.max(1);
    let overlap = !args.no_overlap;
    let warm = args.warm_start;
    let tol = args.tol;
    let variants: Vec<(Method, bool)> = vec![
        (Method::ConjugateGradient, true),
        (Method::ConjugateGradient, false),
        (Method::BiCgStab, true),
        (Method::BiCgStab, false),
    ];
    let results = run_spmd(workers, |comm| {
        let rank = comm.rank();
        let mut solvers = Vec::new();
        for &(method, postcond) in &variants {
            let opts = SolverOptions {
                method,
                tol,
                postcond,
                overlap,
                warm_start: warm,
                ..SolverOptions::default()
            };
            solvers.push(IterativeSolver::new(layout, rank, opts)?);
        }
        let mut rows = Vec::new();
        for step in 0..steps {
            let b = DistributedField::from_global_fn(layout, rank, sequence.source_at(step))?;
            let (reference, fft) = fft_row(layout, &b, &comm, workers)?;
            rows.push(fft);
            for (solver, &(method, postcond)) in solvers.iter_mut().zip(&variants) {
                let (x, report) = solver.solve(&b, &comm)?;
                let diff = mean_difference(&x, &reference, &comm)?;
                rows.push(BenchRow {
                    solver: solver_id(method, postcond, overlap),
                    tol: Some(tol),
                    mean_diff: Some(diff),
                    seconds: Some(report.seconds),
                    iterations: Some(report.iterations as u64),
                    workers,
                    peak_bytes: Some(report.peak_buffer_bytes as u64),
                });
            }
        }
        Ok(rows)
    })?;
    emit(&results[0], !args.no_timing, args.out.as_deref())
}

fn run_scale(args: ScaleArgs) -> Result<i32> {
    let host_threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut rows = Vec::new();
    for &workers in &args.workers_list {
        if workers > host_threads {
            eprintln!(
                "note: {workers} workers oversubscribe this host ({host_threads} threads); \
                 timings will not reflect real scaling"
            );
        }
        let pgrid = ProcessGrid::closest_to_square(workers)?;
        let grid = GridSpec::new(
            args.local_grid[0] * pgrid.px,
            args.local_grid[1] * pgrid.py,
            args.local_grid[2],
            args.spacing[0],
            args.spacing[1],
            args.spacing[2],
        )?;
        let layout = PencilLayout::new(grid, pgrid, Orientation::Z)?;
        let source = random_smooth_source(grid, args.seed);
        let method = args.solver.method();
        let tol = args.tol;
        let step_rows = run_spmd(workers, |comm| {
            let rank = comm.rank();
            let b = DistributedField::from_global_fn(layout, rank, source.as_fn())?;
            match method {
                None => {
                    let (_, row) = fft_row(layout, &b, &comm, workers)?;
                    Ok(vec![row])
                }
                Some(method) => {
                    let opts = SolverOptions { method, tol, ..SolverOptions::default() };
                    let mut solver = IterativeSolver::new(layout, rank, opts)?;
                    let (_, report) = solver.solve(&b, &comm)?;
                    Ok(vec![BenchRow {
                        solver: solver_id(method, true, true),
                        tol: Some(tol),
                        seconds: Some(report.seconds),
                        iterations: Some(report.iterations as u64),
                        workers,
                        peak_bytes: Some(report.peak_buffer_bytes as u64),
                        ..BenchRow::default()
                    }])
                }
            }
        })?;
        rows.extend(step_rows[0].clone());
    }
    emit(&rows, !args.no_timing, args.out.as_deref())
}
