//! Python bindings. Every function is stateless: it spins up the in-process
//! worker pool, distributes the given global field, runs the requested
//! operation, and gathers the result back into a flat list.
//!
//! Global arrays are x-major: index `(x * ny + y) * nz + z`.

use pencil_poisson::bench::{dense_reference_solve, gather_global, random_smooth_source};
use pencil_poisson::comm::run_spmd;
use pencil_poisson::grid::{GridSpec, Orientation, PencilLayout, ProcessGrid};
use pencil_poisson::krylov::{IterativeSolver, Method, SolveReport, SolverOptions};
use pencil_poisson::pencil::DistributedField;
use pencil_poisson::spectral::SpectralPlan;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn perr(e: pencil_poisson::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn layout_for(
    shape: (usize, usize, usize),
    spacing: (f64, f64, f64),
    workers: usize,
) -> PyResult<PencilLayout> {
    let grid = GridSpec::new(shape.0, shape.1, shape.2, spacing.0, spacing.1, spacing.2)
        .map_err(perr)?;
    let pgrid = ProcessGrid::closest_to_square(workers).map_err(perr)?;
    PencilLayout::new(grid, pgrid, Orientation::Z).map_err(perr)
}

fn check_len(source: &[f64], grid: GridSpec) -> PyResult<()> {
    if source.len() != grid.total_points() {
        return Err(PyValueError::new_err(format!(
            "source has {} values, grid needs {}",
            source.len(),
            grid.total_points()
        )));
    }
    Ok(())
}

fn scatter(
    layout: PencilLayout,
    rank: usize,
    source: &[f64],
) -> pencil_poisson::Result<DistributedField> {
    let (ny, nz) = (layout.grid.ny, layout.grid.nz);
    DistributedField::from_global_fn(layout, rank, |x, y, z| source[(x * ny + y) * nz + z])
}

/// Smooth random right-hand side with zero mean on every horizontal level,
/// as a flat x-major list.
#[pyfunction]
fn generate_source(nx: usize, ny: usize, nz: usize, seed: u64) -> PyResult<Vec<f64>> {
    let grid = GridSpec::new(nx, ny, nz, 1.0, 1.0, 1.0).map_err(perr)?;
    let modes = random_smooth_source(grid, seed);
    let mut out = Vec::with_capacity(grid.total_points());
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                out.push(modes.value(x, y, z));
            }
        }
    }
    Ok(out)
}

/// Direct solve through the distributed transform pipeline. Returns the
/// mean-free solution and a stats dict.
#[pyfunction]
#[pyo3(signature = (shape, source, spacing=(1.0, 1.0, 1.0), workers=1))]
fn solve_fft(
    py: Python<'_>,
    shape: (usize, usize, usize),
    source: Vec<f64>,
    spacing: (f64, f64, f64),
    workers: usize,
) -> PyResult<(Vec<f64>, Py<PyDict>)> {
    let layout = layout_for(shape, spacing, workers)?;
    check_len(&source, layout.grid)?;
    let source = &source;
    let gathered = run_spmd(workers, |comm| {
        let rank = comm.rank();
        let b = scatter(layout, rank, source)?;
        let mut plan = SpectralPlan::new(layout, rank)?;
        let p = plan.solve(&b, &comm)?;
        let global = gather_global(&p, &comm)?;
        Ok((
            global,
            plan.imag_residue(),
            plan.buffer_bytes(),
            plan.network_bytes_per_solve(),
        ))
    })
    .map_err(perr)?;
    let (solution, imag_residue, buffer_bytes, network_bytes) = gathered[0].clone();
    let stats = PyDict::new(py);
    stats.set_item("imag_residue", imag_residue)?;
    stats.set_item("peak_buffer_bytes", buffer_bytes)?;
    stats.set_item("network_bytes", network_bytes)?;
    stats.set_item("workers", workers)?;
    Ok((solution, stats.unbind()))
}

fn report_dict(py: Python<'_>, report: &SolveReport, workers: usize) -> PyResult<Py<PyDict>> {
    let d = PyDict::new(py);
    d.set_item("iterations", report.iterations)?;
    d.set_item("converged", report.converged)?;
    d.set_item("relative_residual", report.relative_residual)?;
    d.set_item("halo_swaps", report.halo_swaps)?;
    d.set_item("reductions", report.reductions)?;
    d.set_item("network_bytes", report.network_bytes)?;
    d.set_item("peak_buffer_bytes", report.peak_buffer_bytes)?;
    d.set_item("workers", workers)?;
    Ok(d.unbind())
}

/// Matrix-free iterative solve. `method` is `"cg"` or `"bicgstab"`. Returns
/// the mean-free solution and a report dict.
#[pyfunction]
#[pyo3(signature = (
    shape, source, spacing=(1.0, 1.0, 1.0), workers=1, method="cg", tol=1e-6,
    postcond=true, overlap=true, fuse_reductions=true, max_iters=5000,
))]
#[allow(clippy::too_many_arguments)]
fn solve_iterative(
    py: Python<'_>,
    shape: (usize, usize, usize),
    source: Vec<f64>,
    spacing: (f64, f64, f64),
    workers: usize,
    method: &str,
    tol: f64,
    postcond: bool,
    overlap: bool,
    fuse_reductions: bool,
    max_iters: usize,
) -> PyResult<(Vec<f64>, Py<PyDict>)> {
    let method = match method {
        "cg" => Method::ConjugateGradient,
        "bicgstab" => Method::BiCgStab,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown method {other:?}, expected \"cg\" or \"bicgstab\""
            )))
        }
    };
    let layout = layout_for(shape, spacing, workers)?;
    check_len(&source, layout.grid)?;
    let opts = SolverOptions {
        method,
        tol,
        max_iters,
        postcond,
        overlap,
        fuse_reductions,
        warm_start: false,
    };
    let source = &source;
    let gathered = run_spmd(workers, |comm| {
        let rank = comm.rank();
        let b = scatter(layout, rank, source)?;
        let mut solver = IterativeSolver::new(layout, rank, opts)?;
        let (x, report) = solver.solve(&b, &comm)?;
        let global = gather_global(&x, &comm)?;
        Ok((global, report))
    })
    .map_err(perr)?;
    let (solution, report) = gathered[0].clone();
    Ok((solution, report_dict(py, &report, workers)?))
}

/// Dense Gaussian-elimination reference solution (small grids only),
/// de-meaned for comparison against the other solvers.
#[pyfunction]
#[pyo3(signature = (shape, source, spacing=(1.0, 1.0, 1.0)))]
fn dense_reference(
    shape: (usize, usize, usize),
    source: Vec<f64>,
    spacing: (f64, f64, f64),
) -> PyResult<Vec<f64>> {
    let grid = GridSpec::new(shape.0, shape.1, shape.2, spacing.0, spacing.1, spacing.2)
        .map_err(perr)?;
    check_len(&source, grid)?;
    let mut solution = dense_reference_solve(grid, &source).map_err(perr)?;
    let mean = solution.iter().sum::<f64>() / solution.len() as f64;
    for v in &mut solution {
        *v -= mean;
    }
    Ok(solution)
}

/// Mean absolute difference between two fields after removing each field's
/// own mean; pressure solutions are only defined up to a constant.
#[pyfunction]
fn mean_abs_difference(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(PyValueError::new_err(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    Ok(a.iter()
        .zip(&b)
        .map(|(x, y)| ((x - ma) - (y - mb)).abs())
        .sum::<f64>()
        / n)
}

#[pymodule]
fn pencil_poisson_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_source, m)?)?;
    m.add_function(wrap_pyfunction!(solve_fft, m)?)?;
    m.add_function(wrap_pyfunction!(solve_iterative, m)?)?;
    m.add_function(wrap_pyfunction!(dense_reference, m)?)?;
    m.add_function(wrap_pyfunction!(mean_abs_difference, m)?)?;
    Ok(())
}
