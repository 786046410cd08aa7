//! Iterative pressure solvers: conjugate gradient and BiCGStab with an
//! optional per-column tridiagonal postconditioner.
//!
//! The operator is the 7-point discrete Laplacian on the Z pencil: periodic
//! in x and y (ghost planes via [`halo::HaloField`]), Neumann in z (boundary
//! cells reflect their own value). It is symmetric negative semidefinite
//! with the constants as null space, so the source is projected mean-free up
//! front and the returned solution is gauged mean-free as well. The Krylov
//! recurrences are invariant under negating both the operator and the
//! postconditioner, so the textbook formulas apply unchanged.
//!
//! The postconditioner solves, per vertical column, the tridiagonal made of
//! the stencil's vertical terms plus its (constant) horizontal diagonal.
//! That matrix is strictly diagonally dominant, so it factors once and every
//! application is two short sweeps per column with no communication.
//!
//! Each iteration needs two global reduction rounds when `fuse_reductions`
//! is on (three otherwise): grouped inner products share one reduction, and
//! for BiCGStab a five-term fusion reconstructs the residual norm and the
//! next `rho` algebraically instead of re-measuring them.

pub mod halo;

pub use halo::{HaloField, PendingHalo};

use crate::comm::Communicator;
use crate::grid::{GridSpec, Orientation, PencilLayout};
use crate::pencil::{DistributedField, ElemKind};
use crate::spectral::build_vertical_system;
use crate::{Error, Result};
use std::time::Instant;

/// Which Krylov recurrence drives the solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    ConjugateGradient,
    BiCgStab,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub method: Method,
    /// Relative residual target, measured against the mean-free source norm.
    pub tol: f64,
    pub max_iters: usize,
    pub postcond: bool,
    /// Compute ghost-independent cells between posting and completing the
    /// halo exchange. Results are bitwise identical either way.
    pub overlap: bool,
    /// Keep the previous solution as the initial guess for the next solve.
    pub warm_start: bool,
    /// Group simultaneous inner products into shared reductions (two rounds
    /// per iteration instead of three).
    pub fuse_reductions: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            method: Method::ConjugateGradient,
            tol: 1e-6,
            max_iters: 5000,
            postcond: true,
            overlap: true,
            warm_start: false,
            fuse_reductions: true,
        }
    }
}

/// What one solve did and cost.
#[derive(Debug, Clone, Copy, Default)]
pub struct SolveReport {
    /// Operator applications that advanced the iterate: one per conjugate
    /// gradient iteration, two per full BiCGStab loop (one if it exits at
    /// the half step). This is the comparable unit across methods, since an
    /// operator application is the expensive step (stencil plus halo swap).
    pub iterations: usize,
    pub converged: bool,
    /// Residual norm over source norm at exit.
    pub relative_residual: f64,
    pub halo_swaps: u64,
    /// Global reduction rounds, including setup and the final gauge fix.
    pub reductions: u64,
    /// Bytes this rank put on the wire during the solve.
    pub network_bytes: u64,
    /// Communication buffer bytes held by the solver (ghost shells and
    /// packing scratch).
    pub peak_buffer_bytes: usize,
    pub seconds: f64,
}

/// Apply the 7-point Laplacian: periodic horizontally, Neumann vertically.
/// `overlap` interleaves interior columns with the halo exchange; the shell
/// columns run after, through the same per-cell kernel, so the output is
/// bitwise independent of the setting.
pub fn apply_laplacian(
    field: &mut HaloField,
    out: &mut DistributedField,
    comm: &Communicator,
    overlap: bool,
) -> Result<()> {
    if out.layout != field.layout || out.rank != field.rank || out.elem != ElemKind::Real {
        return Err(Error::LayoutMismatch { side: "laplacian output" });
    }
    apply_operator(field, &mut out.data, comm, overlap)
}

struct StencilGeom {
    cx: usize,
    cy: usize,
    cz: usize,
    sx: usize,
    ax: f64,
    ay: f64,
    az: f64,
}

impl StencilGeom {
    fn of(field: &HaloField) -> Self {
        let [cx, cy, cz] = field.interior_counts();
        let g = field.layout.grid;
        StencilGeom {
            cx,
            cy,
            cz,
            sx: (cy + 2) * cz,
            ax: 1.0 / (g.dx * g.dx),
            ay: 1.0 / (g.dy * g.dy),
            az: 1.0 / (g.dz * g.dz),
        }
    }
}

/// One vertical column of the stencil; the single code path for interior and
/// shell cells keeps overlapped and blocking runs bitwise identical.
#[inline(always)]
fn stencil_column(d: &[f64], out: &mut [f64], g: &StencilGeom, x: usize, y: usize) {
    let c0 = (x + 1) * g.sx + (y + 1) * g.cz;
    let o0 = (x * g.cy + y) * g.cz;
    for z in 0..g.cz {
        let c = c0 + z;
        let vc = d[c];
        let vu = if z + 1 < g.cz { d[c + 1] } else { vc };
        let vd = if z > 0 { d[c - 1] } else { vc };
        out[o0 + z] = (d[c + g.sx] + d[c - g.sx] - 2.0 * vc) * g.ax
            + (d[c + g.cz] + d[c - g.cz] - 2.0 * vc) * g.ay
            + (vu + vd - 2.0 * vc) * g.az;
    }
}

fn apply_operator(
    field: &mut HaloField,
    out: &mut [f64],
    comm: &Communicator,
    overlap: bool,
) -> Result<()> {
    let g = StencilGeom::of(field);
    debug_assert_eq!(out.len(), g.cx * g.cy * g.cz);
    if overlap {
        let pending = field.swap_start(comm)?;
        {
            let d = field.values();
            for x in 1..g.cx.saturating_sub(1) {
                for y in 1..g.cy.saturating_sub(1) {
                    stencil_column(d, out, &g, x, y);
                }
            }
        }
        field.swap_finish(pending, comm)?;
        let d = field.values();
        for x in 0..g.cx {
            for y in 0..g.cy {
                let deep = x > 0 && x + 1 < g.cx && y > 0 && y + 1 < g.cy;
                if !deep {
                    stencil_column(d, out, &g, x, y);
                }
            }
        }
    } else {
        field.swap_halos(comm)?;
        let d = field.values();
        for x in 0..g.cx {
            for y in 0..g.cy {
                stencil_column(d, out, &g, x, y);
            }
        }
    }
    Ok(())
}

/// Per-column inverse of the stencil's vertical terms plus its horizontal
/// diagonal. Factored once; application is one forward and one backward
/// sweep per column, in place, with no communication.
pub struct LinePostconditioner {
    nz: usize,
    sub: Vec<f64>,
    cprime: Vec<f64>,
    minv: Vec<f64>,
}

impl LinePostconditioner {
    pub fn new(grid: GridSpec) -> Result<Self> {
        let shift = -2.0 / (grid.dx * grid.dx) - 2.0 / (grid.dy * grid.dy);
        let sys = build_vertical_system(shift, grid.dz, &vec![0.0; grid.nz]);
        let nz = grid.nz;
        let mut cprime = vec![0.0; nz];
        let mut minv = vec![0.0; nz];
        let mut prev = 0.0;
        for k in 0..nz {
            let den = sys.diag[k] - if k > 0 { sys.sub[k] * prev } else { 0.0 };
            if den == 0.0 || !den.is_finite() {
                return Err(Error::SingularSystem { row: k });
            }
            minv[k] = 1.0 / den;
            cprime[k] = if k + 1 < nz { sys.sup[k] * minv[k] } else { 0.0 };
            prev = cprime[k];
        }
        Ok(LinePostconditioner { nz, sub: sys.sub, cprime, minv })
    }

    /// `z = M r`, column by column (columns are contiguous in Z-pencil
    /// storage).
    pub fn apply(&self, r: &[f64], z: &mut [f64]) {
        let nz = self.nz;
        debug_assert_eq!(r.len() % nz, 0);
        debug_assert_eq!(r.len(), z.len());
        for (rc, zc) in r.chunks_exact(nz).zip(z.chunks_exact_mut(nz)) {
            zc[0] = rc[0] * self.minv[0];
            for k in 1..nz {
                zc[k] = (rc[k] - self.sub[k] * zc[k - 1]) * self.minv[k];
            }
            for k in (0..nz - 1).rev() {
                zc[k] -= self.cprime[k] * zc[k + 1];
            }
        }
    }
}

#[inline]
fn local_dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Krylov solver with persistent state: reusable work vectors, halo fields,
/// the factored postconditioner, and (for warm starts) the last solution.
pub struct IterativeSolver {
    layout: PencilLayout,
    rank: usize,
    opts: SolverOptions,
    postcond: Option<LinePostconditioner>,
    halo_a: HaloField,
    halo_b: Option<HaloField>,
    x: Vec<f64>,
    b: Vec<f64>,
    r: Vec<f64>,
    p: Vec<f64>,
    q: Vec<f64>,
    z: Vec<f64>,
    rhat0: Vec<f64>,
    s: Vec<f64>,
    t: Vec<f64>,
    shat: Vec<f64>,
    swaps: u64,
}

impl IterativeSolver {
    pub fn new(layout: PencilLayout, rank: usize, opts: SolverOptions) -> Result<Self> {
        if layout.orientation != Orientation::Z {
            return Err(Error::InvalidArgument(
                "iterative solves run in the Z pencil".into(),
            ));
        }
        let n = layout.local_box(rank)?.len();
        let bicg = opts.method == Method::BiCgStab;
        let extra = if bicg { n } else { 0 };
        Ok(IterativeSolver {
            layout,
            rank,
            opts,
            postcond: if opts.postcond {
                Some(LinePostconditioner::new(layout.grid)?)
            } else {
                None
            },
            halo_a: HaloField::new(layout, rank)?,
            halo_b: if bicg { Some(HaloField::new(layout, rank)?) } else { None },
            x: vec![0.0; n],
            b: vec![0.0; n],
            r: vec![0.0; n],
            p: vec![0.0; n],
            q: vec![0.0; n],
            z: vec![0.0; n],
            rhat0: vec![0.0; extra],
            s: vec![0.0; extra],
            t: vec![0.0; extra],
            shat: vec![0.0; extra],
            swaps: 0,
        })
    }

    pub fn options(&self) -> &SolverOptions {
        &self.opts
    }

    pub fn options_mut(&mut self) -> &mut SolverOptions {
        &mut self.opts
    }

    /// Forget the warm-start state.
    pub fn reset(&mut self) {
        self.x.fill(0.0);
    }

    /// Communication buffer bytes currently held (ghost shells plus packing
    /// scratch of every halo field).
    pub fn peak_buffer_bytes(&self) -> usize {
        self.halo_a.peak_buffer_bytes()
            + self.halo_b.as_ref().map_or(0, HaloField::peak_buffer_bytes)
    }

    /// Solve `laplacian(x) = source` for the mean-free part of the source;
    /// the result is returned with zero global mean.
    pub fn solve(
        &mut self,
        source: &DistributedField,
        comm: &Communicator,
    ) -> Result<(DistributedField, SolveReport)> {
        let mut out = DistributedField::zeros(self.layout, self.rank, ElemKind::Real)?;
        let report = self.solve_into(source, &mut out, comm)?;
        Ok((out, report))
    }

    pub fn solve_into(
        &mut self,
        source: &DistributedField,
        out: &mut DistributedField,
        comm: &Communicator,
    ) -> Result<SolveReport> {
        for (f, side) in [(&*source, "source"), (&*out, "destination")] {
            if f.layout != self.layout || f.rank != self.rank || f.elem != ElemKind::Real {
                return Err(Error::LayoutMismatch { side });
            }
        }
        let started = Instant::now();
        let c0 = comm.counters();
        self.swaps = 0;

        let npoints = self.layout.grid.total_points() as f64;
        self.b.copy_from_slice(&source.data);
        let lanes = [self.b.iter().sum::<f64>()];
        let mut sums = [0.0f64; 1];
        comm.allreduce_sum_into(&lanes, &mut sums)?;
        let mean = sums[0] / npoints;
        for v in self.b.iter_mut() {
            *v -= mean;
        }
        if !self.opts.warm_start {
            self.x.fill(0.0);
        }

        let mut report = match self.opts.method {
            Method::ConjugateGradient => self.run_cg(comm)?,
            Method::BiCgStab => self.run_bicgstab(comm)?,
        };

        // Gauge: return the mean-free representative of the solution family.
        let xsum = [self.x.iter().sum::<f64>()];
        let mut xtot = [0.0f64];
        comm.allreduce_sum_into(&xsum, &mut xtot)?;
        let xmean = xtot[0] / npoints;
        for (o, v) in out.data.iter_mut().zip(&self.x) {
            *o = v - xmean;
        }

        let c1 = comm.counters();
        report.halo_swaps = self.swaps;
        report.reductions = c1.reductions - c0.reductions;
        report.network_bytes = c1.bytes_sent - c0.bytes_sent;
        report.peak_buffer_bytes = self.peak_buffer_bytes();
        report.seconds = started.elapsed().as_secs_f64();
        Ok(report)
    }

    /// `q = A v` through the halo field, honouring the overlap option.
    fn operator(
        halo: &mut HaloField,
        swaps: &mut u64,
        v: &[f64],
        q: &mut [f64],
        comm: &Communicator,
        overlap: bool,
    ) -> Result<()> {
        halo.load_interior(v);
        *swaps += 1;
        apply_operator(halo, q, comm, overlap)
    }

    /// `z = M r`, or a plain copy when the postconditioner is off.
    fn postapply(pc: &Option<LinePostconditioner>, r: &[f64], z: &mut [f64]) {
        match pc {
            Some(m) => m.apply(r, z),
            None => z.copy_from_slice(r),
        }
    }

    fn run_cg(&mut self, comm: &Communicator) -> Result<SolveReport> {
        let overlap = self.opts.overlap;
        let fused = self.opts.fuse_reductions;
        let warm = self.x.iter().any(|&v| v != 0.0);
        if warm {
            Self::operator(&mut self.halo_a, &mut self.swaps, &self.x, &mut self.q, comm, overlap)?;
            for i in 0..self.r.len() {
                self.r[i] = self.b[i] - self.q[i];
            }
        } else {
            self.r.copy_from_slice(&self.b);
        }
        Self::postapply(&self.postcond, &self.r, &mut self.z);
        self.p.copy_from_slice(&self.z);

        let locals = [
            local_dot(&self.r, &self.z),
            local_dot(&self.r, &self.r),
            local_dot(&self.b, &self.b),
        ];
        let mut sums = [0.0f64; 3];
        comm.allreduce_sum_into(&locals, &mut sums)?;
        let [mut rz, mut rr, bb] = sums;
        let bnorm = bb.sqrt();
        let target = self.opts.tol * bnorm;
        let mut report = SolveReport { converged: true, ..Default::default() };
        if bnorm == 0.0 {
            self.x.fill(0.0);
            return Ok(report);
        }
        if rr.sqrt() <= target {
            report.relative_residual = rr.sqrt() / bnorm;
            return Ok(report);
        }

        for k in 1..=self.opts.max_iters {
            Self::operator(&mut self.halo_a, &mut self.swaps, &self.p, &mut self.q, comm, overlap)?;
            let pq_local = [local_dot(&self.p, &self.q)];
            let mut pq = [0.0f64];
            comm.allreduce_sum_into(&pq_local, &mut pq)?;
            let pq = pq[0];
            if pq == 0.0 || !pq.is_finite() {
                return Err(Error::Breakdown("conjugate direction annihilated"));
            }
            let alpha = rz / pq;
            for i in 0..self.x.len() {
                self.x[i] += alpha * self.p[i];
                self.r[i] -= alpha * self.q[i];
            }
            Self::postapply(&self.postcond, &self.r, &mut self.z);

            let (rz_new, rr_new) = if fused {
                let locals = [local_dot(&self.r, &self.z), local_dot(&self.r, &self.r)];
                let mut sums = [0.0f64; 2];
                comm.allreduce_sum_into(&locals, &mut sums)?;
                (sums[0], sums[1])
            } else {
                let mut a = [0.0f64];
                comm.allreduce_sum_into(&[local_dot(&self.r, &self.z)], &mut a)?;
                let mut b = [0.0f64];
                comm.allreduce_sum_into(&[local_dot(&self.r, &self.r)], &mut b)?;
                (a[0], b[0])
            };
            rr = rr_new;
            report.iterations = k;
            if rr.sqrt() <= target {
                report.relative_residual = rr.sqrt() / bnorm;
                return Ok(report);
            }
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..self.p.len() {
                self.p[i] = self.z[i] + beta * self.p[i];
            }
        }
        report.converged = false;
        report.relative_residual = rr.sqrt() / bnorm;
        Ok(report)
    }

    fn run_bicgstab(&mut self, comm: &Communicator) -> Result<SolveReport> {
        let overlap = self.opts.overlap;
        let fused = self.opts.fuse_reductions;
        let warm = self.x.iter().any(|&v| v != 0.0);
        if warm {
            Self::operator(&mut self.halo_a, &mut self.swaps, &self.x, &mut self.q, comm, overlap)?;
            for i in 0..self.r.len() {
                self.r[i] = self.b[i] - self.q[i];
            }
        } else {
            self.r.copy_from_slice(&self.b);
        }
        self.rhat0.copy_from_slice(&self.r);
        self.p.copy_from_slice(&self.r);

        let locals = [local_dot(&self.r, &self.r), local_dot(&self.b, &self.b)];
        let mut sums = [0.0f64; 2];
        comm.allreduce_sum_into(&locals, &mut sums)?;
        let [rr0, bb] = sums;
        // rhat0 == r here, so <rhat0, r> is just rr0.
        let mut rho = rr0;
        let bnorm = bb.sqrt();
        let target = self.opts.tol * bnorm;
        let mut report = SolveReport { converged: true, ..Default::default() };
        if bnorm == 0.0 {
            self.x.fill(0.0);
            return Ok(report);
        }
        let mut rr = rr0;
        if rr.sqrt() <= target {
            report.relative_residual = rr.sqrt() / bnorm;
            return Ok(report);
        }

        for k in 1..=self.opts.max_iters {
            // phat = M p; v = A phat (v lives in q)
            Self::postapply(&self.postcond, &self.p, &mut self.z);
            Self::operator(&mut self.halo_a, &mut self.swaps, &self.z, &mut self.q, comm, overlap)?;
            let mut rv = [0.0f64];
            comm.allreduce_sum_into(&[local_dot(&self.rhat0, &self.q)], &mut rv)?;
            let rv = rv[0];
            if rv == 0.0 || !rv.is_finite() {
                return Err(Error::Breakdown("shadow residual orthogonal to direction"));
            }
            let alpha = rho / rv;
            for i in 0..self.s.len() {
                self.s[i] = self.r[i] - alpha * self.q[i];
            }
            report.iterations = 2 * k - 1;
            // shat = M s; t = A shat
            Self::postapply(&self.postcond, &self.s, &mut self.shat);
            let hb = self.halo_b.as_mut().expect("bicgstab halo");
            hb.load_interior(&self.shat);
            self.swaps += 1;
            apply_operator(hb, &mut self.t, comm, overlap)?;

            let (ts, tt, ss, rho_new, rr_new);
            if fused {
                let locals = [
                    local_dot(&self.t, &self.s),
                    local_dot(&self.t, &self.t),
                    local_dot(&self.rhat0, &self.s),
                    local_dot(&self.rhat0, &self.t),
                    local_dot(&self.s, &self.s),
                ];
                let mut sums = [0.0f64; 5];
                comm.allreduce_sum_into(&locals, &mut sums)?;
                let [a, b, rs, rt, c] = sums;
                ts = a;
                tt = b;
                ss = c;
                if ss.sqrt() <= target || tt == 0.0 {
                    return self.bicg_half_step(alpha, ss, bnorm, target, report, tt);
                }
                let omega = ts / tt;
                rho_new = rs - omega * rt;
                rr_new = (ss - 2.0 * omega * ts + omega * omega * tt).max(0.0);
                self.bicg_full_step(alpha, omega);
            } else {
                let locals = [
                    local_dot(&self.t, &self.s),
                    local_dot(&self.t, &self.t),
                    local_dot(&self.s, &self.s),
                ];
                let mut sums = [0.0f64; 3];
                comm.allreduce_sum_into(&locals, &mut sums)?;
                ts = sums[0];
                tt = sums[1];
                ss = sums[2];
                if ss.sqrt() <= target || tt == 0.0 {
                    return self.bicg_half_step(alpha, ss, bnorm, target, report, tt);
                }
                let omega = ts / tt;
                self.bicg_full_step(alpha, omega);
                let locals = [
                    local_dot(&self.rhat0, &self.r),
                    local_dot(&self.r, &self.r),
                ];
                let mut sums = [0.0f64; 2];
                comm.allreduce_sum_into(&locals, &mut sums)?;
                rho_new = sums[0];
                rr_new = sums[1];
            }
            report.iterations = 2 * k;
            let omega = ts / tt;
            rr = rr_new;
            if rr.sqrt() <= target {
                report.relative_residual = rr.sqrt() / bnorm;
                return Ok(report);
            }
            if rho_new == 0.0 || !rho_new.is_finite() || omega == 0.0 {
                return Err(Error::Breakdown("stabilised recurrence collapsed"));
            }
            let beta = (rho_new / rho) * (alpha / omega);
            rho = rho_new;
            for i in 0..self.p.len() {
                self.p[i] = self.r[i] + beta * (self.p[i] - omega * self.q[i]);
            }
        }
        report.converged = false;
        report.relative_residual = rr.sqrt() / bnorm;
        Ok(report)
    }

    /// `x += alpha*phat + omega*shat; r = s - omega*t` (phat is in `z`,
    /// v in `q`).
    fn bicg_full_step(&mut self, alpha: f64, omega: f64) {
        for i in 0..self.x.len() {
            self.x[i] += alpha * self.z[i] + omega * self.shat[i];
            self.r[i] = self.s[i] - omega * self.t[i];
        }
    }

    /// The half-iteration exit: `s` is already below target (or `t`
    /// vanished), so take only the alpha step.
    fn bicg_half_step(
        &mut self,
        alpha: f64,
        ss: f64,
        bnorm: f64,
        target: f64,
        mut report: SolveReport,
        tt: f64,
    ) -> Result<SolveReport> {
        if ss.sqrt() > target && tt == 0.0 {
            return Err(Error::Breakdown("stabilisation direction vanished"));
        }
        for i in 0..self.x.len() {
            self.x[i] += alpha * self.z[i];
            self.r[i] = self.s[i];
        }
        report.relative_residual = ss.sqrt() / bnorm;
        report.converged = true;
        Ok(report)
    }
}

/// One-shot convenience: build a solver, run a single cold solve.
pub fn iterative_solve(
    source: &DistributedField,
    opts: SolverOptions,
    comm: &Communicator,
) -> Result<(DistributedField, SolveReport)> {
    let mut solver = IterativeSolver::new(source.layout, source.rank, opts)?;
    solver.solve(source, comm)
}
