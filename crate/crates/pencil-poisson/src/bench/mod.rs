//! Benchmark and verification harness: reproducible source fields, a dense
//! reference solve, the mean-difference metric, and CSV reporting.
//!
//! Source fields are sums of plane-wave modes evaluated pointwise from
//! global indices, so every rank computes bitwise-identical values no matter
//! how the grid is decomposed. The random generator keeps all modes off the
//! `(kx, ky) = (0, 0)` axis; such fields are horizontally mean-free on every
//! level, which makes the direct and iterative solvers answer the same
//! question and lets them be compared pointwise.
//!
//! The dense reference assembles the full 7-point operator and runs
//! Gaussian elimination with partial pivoting. It exists to check the fast
//! paths on small grids, and refuses grids it would be too slow for.

pub mod cli;

use crate::comm::Communicator;
use crate::grid::{horizontal_eigenvalue, GridSpec};
use crate::pencil::DistributedField;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;

/// Largest point count the dense reference will accept; elimination is
/// cubic, so bigger grids belong to the fast solvers.
pub const DENSE_ORACLE_MAX_POINTS: usize = 4096;

/// A sum of plane-wave modes, evaluated from global grid indices. Cheap to
/// clone, safe to share across worker threads, and independent of the
/// decomposition by construction.
#[derive(Debug, Clone)]
pub struct ModeSum {
    modes: Vec<Mode>,
}

#[derive(Debug, Clone, Copy)]
struct Mode {
    fx: f64,
    fy: f64,
    fz: f64,
    amp: f64,
    phase: f64,
}

impl ModeSum {
    pub fn value(&self, x: usize, y: usize, z: usize) -> f64 {
        let (x, y, z) = (x as f64, y as f64, z as f64);
        self.modes
            .iter()
            .map(|m| m.amp * (TAU * (m.fx * x + m.fy * y + m.fz * z) + m.phase).cos())
            .sum()
    }

    /// Adapter for field construction.
    pub fn as_fn(&self) -> impl Fn(usize, usize, usize) -> f64 + Send + Sync + '_ {
        move |x, y, z| self.value(x, y, z)
    }
}

/// The classic check case: the source whose exact discrete solution is
/// `cos(2*pi*x/nx)`. See [`single_mode_solution`].
pub fn single_mode_source(grid: GridSpec) -> ModeSum {
    let lambda = horizontal_eigenvalue(1, grid.nx, grid.dx);
    ModeSum {
        modes: vec![Mode {
            fx: 1.0 / grid.nx as f64,
            fy: 0.0,
            fz: 0.0,
            amp: lambda,
            phase: 0.0,
        }],
    }
}

/// The exact discrete solution matching [`single_mode_source`], already in
/// the mean-free gauge.
pub fn single_mode_solution(grid: GridSpec) -> ModeSum {
    ModeSum {
        modes: vec![Mode {
            fx: 1.0 / grid.nx as f64,
            fy: 0.0,
            fz: 0.0,
            amp: 1.0,
            phase: 0.0,
        }],
    }
}

/// Reproducible band-limited random field. Every mode has a nonzero
/// horizontal wavevector, so each level's horizontal mean vanishes (to
/// rounding) and direct and iterative solutions agree pointwise.
pub fn random_smooth_source(grid: GridSpec, seed: u64) -> ModeSum {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kx_max = 3.min((grid.nx - 1) / 2) as i64;
    let ky_max = 3.min((grid.ny - 1) / 2) as i64;
    let kz_max = 2.min((grid.nz - 1) / 2) as i64;
    let mut modes = Vec::new();
    if kx_max == 0 && ky_max == 0 {
        // No nonzero horizontal wavevector exists; the only mean-free
        // source is zero.
        return ModeSum { modes };
    }
    for _ in 0..12 {
        let (kx, ky) = loop {
            let kx = rng.random_range(-kx_max..=kx_max);
            let ky = rng.random_range(0..=ky_max);
            if (kx, ky) != (0, 0) {
                break (kx, ky);
            }
        };
        let kz = rng.random_range(0..=kz_max);
        modes.push(Mode {
            fx: kx as f64 / grid.nx as f64,
            fy: ky as f64 / grid.ny as f64,
            fz: kz as f64 / grid.nz as f64,
            amp: rng.random_range(-1.0..1.0),
            phase: rng.random_range(0.0..TAU),
        });
    }
    ModeSum { modes }
}

/// Timestep-like sequence: a steady field plus a perturbation that decays
/// geometrically, for exercising warm starts the way a model spin-up does.
#[derive(Debug, Clone)]
pub struct SpinupSource {
    steady: ModeSum,
    perturb: ModeSum,
    decay: f64,
}

impl SpinupSource {
    pub fn new(grid: GridSpec, seed: u64, decay: f64) -> Self {
        SpinupSource {
            steady: random_smooth_source(grid, seed),
            perturb: random_smooth_source(grid, seed ^ 0x9E37_79B9_7F4A_7C15),
            decay,
        }
    }

    pub fn value(&self, step: usize, x: usize, y: usize, z: usize) -> f64 {
        self.steady.value(x, y, z) + self.decay.powi(step as i32) * self.perturb.value(x, y, z)
    }

    pub fn source_at(&self, step: usize) -> impl Fn(usize, usize, usize) -> f64 + Send + Sync + '_ {
        move |x, y, z| self.value(step, x, y, z)
    }
}

/// Assemble the global 7-point operator and solve it densely with partial
/// pivoting. The source is projected mean-free and the first unknown is
/// pinned to fix the gauge (the constant null space); the returned vector is
/// that pinned representative. Only for small grids; see
/// [`DENSE_ORACLE_MAX_POINTS`].
pub fn dense_reference_solve(grid: GridSpec, source: &[f64]) -> Result<Vec<f64>> {
    let n = grid.total_points();
    if n > DENSE_ORACLE_MAX_POINTS {
        return Err(Error::OracleTooLarge { max: DENSE_ORACLE_MAX_POINTS, got: n });
    }
    if source.len() != n {
        return Err(Error::InvalidArgument(format!(
            "source has {} points, grid needs {n}",
            source.len()
        )));
    }
    let (nx, ny, nz) = (grid.nx, grid.ny, grid.nz);
    let (ax, ay, az) = (
        1.0 / (grid.dx * grid.dx),
        1.0 / (grid.dy * grid.dy),
        1.0 / (grid.dz * grid.dz),
    );
    let idx = |x: usize, y: usize, z: usize| (x * ny + y) * nz + z;
    let mut m = vec![0.0f64; n * n];
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let row = idx(x, y, z);
                let mut add = |col: usize, v: f64| m[row * n + col] += v;
                add(row, -2.0 * (ax + ay + az));
                add(idx((x + 1) % nx, y, z), ax);
                add(idx((x + nx - 1) % nx, y, z), ax);
                add(idx(x, (y + 1) % ny, z), ay);
                add(idx(x, (y + ny - 1) % ny, z), ay);
                if z + 1 < nz {
                    add(idx(x, y, z + 1), az);
                } else {
                    add(row, az);
                }
                if z > 0 {
                    add(idx(x, y, z - 1), az);
                } else {
                    add(row, az);
                }
            }
        }
    }
    let mean = source.iter().sum::<f64>() / n as f64;
    let mut rhs: Vec<f64> = source.iter().map(|v| v - mean).collect();
    // Pin the gauge: first unknown is zero.
    for c in 0..n {
        m[c] = 0.0;
    }
    m[0] = 1.0;
    rhs[0] = 0.0;
    gaussian_solve(&mut m, &mut rhs, n)?;
    Ok(rhs)
}

/// In-place Gaussian elimination with partial pivoting; `rhs` becomes the
/// solution.
fn gaussian_solve(m: &mut [f64], rhs: &mut [f64], n: usize) -> Result<()> {
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&a, &b| m[a * n + col].abs().total_cmp(&m[b * n + col].abs()))
            .expect("non-empty pivot range");
        if m[pivot_row * n + col] == 0.0 {
            return Err(Error::SingularSystem { row: col });
        }
        if pivot_row != col {
            for c in col..n {
                m.swap(col * n + c, pivot_row * n + c);
            }
            rhs.swap(col, pivot_row);
        }
        let inv = 1.0 / m[col * n + col];
        for row in col + 1..n {
            let f = m[row * n + col] * inv;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                m[row * n + c] -= f * m[col * n + c];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for c in row + 1..n {
            acc -= m[row * n + c] * rhs[c];
        }
        rhs[row] = acc / m[row * n + row];
    }
    Ok(())
}

/// Mean absolute difference after removing each field's own global mean —
/// gauge-independent, so any two solver outputs are comparable.
pub fn mean_difference(
    a: &DistributedField,
    b: &DistributedField,
    comm: &Communicator,
) -> Result<f64> {
    if a.layout != b.layout || a.elem != b.elem {
        return Err(Error::LayoutMismatch { side: "mean difference" });
    }
    let n = a.layout.grid.total_points() as f64;
    let sums = comm.allreduce_sum(&[a.data.iter().sum(), b.data.iter().sum()])?;
    let (ma, mb) = (sums[0] / n, sums[1] / n);
    let local: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| ((x - ma) - (y - mb)).abs())
        .sum();
    let total = comm.allreduce_sum(&[local])?;
    Ok(total[0] / n)
}

/// Collect a distributed field into a full global array, x-major, on every
/// rank. Each rank deposits its block into a zero-filled vector and a sum
/// reduction merges them.
pub fn gather_global(field: &DistributedField, comm: &Communicator) -> Result<Vec<f64>> {
    let grid = field.layout.grid;
    let lanes = field.elem.lanes();
    let mut global = vec![0.0f64; grid.total_points() * lanes];
    let bbox = field.local_box();
    let order = field.layout.orientation.storage_order();
    let mut i = 0;
    for a in bbox.range(order[0]) {
        for b in bbox.range(order[1]) {
            for c in bbox.range(order[2]) {
                let mut g = [0usize; 3];
                g[order[0].idx()] = a;
                g[order[1].idx()] = b;
                g[order[2].idx()] = c;
                let gi = (g[0] * grid.ny + g[1]) * grid.nz + g[2];
                for l in 0..lanes {
                    global[gi * lanes + l] = field.data[i * lanes + l];
                }
                i += 1;
            }
        }
    }
    comm.allreduce_sum(&global)
}

/// One output row; `None` cells print empty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchRow {
    pub solver: String,
    pub tol: Option<f64>,
    pub mean_diff: Option<f64>,
    pub seconds: Option<f64>,
    pub iterations: Option<u64>,
    pub workers: usize,
    pub peak_bytes: Option<u64>,
}

pub const CSV_HEADER: &str = "solver,tol,mean_diff,seconds,iterations,workers,peak_bytes";

fn cell_f(v: Option<f64>) -> String {
    v.map(|v| format!("{v:e}")).unwrap_or_default()
}

fn cell_u(v: Option<u64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Render rows as CSV. With `include_timing` off the seconds column is left
/// empty, making output byte-identical across runs.
pub fn render_csv(rows: &[BenchRow], include_timing: bool) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let secs = if include_timing { r.seconds } else { None };
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.solver,
            cell_f(r.tol),
            cell_f(r.mean_diff),
            cell_f(secs),
            cell_u(r.iterations),
            r.workers,
            cell_u(r.peak_bytes),
        ));
    }
    out
}
