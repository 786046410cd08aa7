//! Global grid description, worker grid factorization, and pencil extents.
//!
//! A field lives on an `nx * ny * nz` grid, periodic in x and y, closed in z.
//! Workers form a 2D `px * py` process grid; a pencil layout assigns each
//! worker a contiguous block that is complete along one axis and split along
//! the other two. All extent arithmetic is centralized here so every module
//! derives identical ownership from `(grid, process grid, orientation)`.

use crate::{Error, Result};
use std::f64::consts::TAU;

/// Grid axes in a fixed order; used to index `[usize; 3]` extent arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    X = 0,
    Y = 1,
    Z = 2,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    #[inline]
    pub fn idx(self) -> usize {
        self as usize
    }
}

/// Pencil orientation, named after the locally complete axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Orientation {
    Z,
    Y,
    X,
}

impl Orientation {
    /// The axis that is locally complete in this orientation.
    pub fn complete_axis(self) -> Axis {
        match self {
            Orientation::Z => Axis::Z,
            Orientation::Y => Axis::Y,
            Orientation::X => Axis::X,
        }
    }

    /// The two decomposed axes: first is split over `px` (process-grid rows),
    /// second over `py` (process-grid columns).
    pub fn decomposed_axes(self) -> [Axis; 2] {
        match self {
            Orientation::Z => [Axis::X, Axis::Y],
            Orientation::Y => [Axis::X, Axis::Z],
            Orientation::X => [Axis::Y, Axis::Z],
        }
    }

    /// Local storage order, slowest to fastest varying. The locally complete
    /// axis is always fastest so transforms along it see contiguous lines.
    pub fn storage_order(self) -> [Axis; 3] {
        let [d0, d1] = self.decomposed_axes();
        [d0, d1, self.complete_axis()]
    }

    /// Transposes are planned only between adjacent orientations in the chain
    /// Z - Y - X; a Z to X rearrangement is composed from the two hops.
    pub fn is_adjacent(self, other: Orientation) -> bool {
        matches!(
            (self, other),
            (Orientation::Z, Orientation::Y)
                | (Orientation::Y, Orientation::Z)
                | (Orientation::Y, Orientation::X)
                | (Orientation::X, Orientation::Y)
        )
    }
}

/// Global grid dimensions and spacings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, nz: usize, dx: f64, dy: f64, dz: f64) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::InvalidGrid(format!(
                "dimensions must be positive, got {nx}x{ny}x{nz}"
            )));
        }
        for (name, d) in [("dx", dx), ("dy", dy), ("dz", dz)] {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::InvalidGrid(format!("{name} must be positive, got {d}")));
            }
        }
        Ok(GridSpec { nx, ny, nz, dx, dy, dz })
    }

    /// Unit spacing helper for tests and layout-only work.
    pub fn cube(n: usize) -> Self {
        GridSpec { nx: n, ny: n, nz: n, dx: 1.0, dy: 1.0, dz: 1.0 }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    #[inline]
    pub fn len(&self, axis: Axis) -> usize {
        self.dims()[axis.idx()]
    }

    #[inline]
    pub fn spacing(&self, axis: Axis) -> f64 {
        [self.dx, self.dy, self.dz][axis.idx()]
    }

    #[inline]
    pub fn total_points(&self) -> usize {
        self.nx * self.ny * self.nz
    }
}

/// 2D worker grid. Rank `r` sits at row `ix = r / py`, column `iy = r % py`;
/// rows index the x-like split, columns the y-like split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProcessGrid {
    pub px: usize,
    pub py: usize,
}

impl ProcessGrid {
    pub fn new(px: usize, py: usize) -> Result<Self> {
        if px == 0 || py == 0 {
            return Err(Error::InvalidGrid(format!(
                "process grid must be positive, got {px}x{py}"
            )));
        }
        Ok(ProcessGrid { px, py })
    }

    /// Factor `nranks` into the most even `px * py` with `px >= py`.
    pub fn closest_to_square(nranks: usize) -> Result<Self> {
        if nranks == 0 {
            return Err(Error::InvalidGrid("worker count must be positive".into()));
        }
        let mut py = (nranks as f64).sqrt().floor() as usize;
        while py > 1 && nranks % py != 0 {
            py -= 1;
        }
        let py = py.max(1);
        ProcessGrid::new(nranks / py, py)
    }

    #[inline]
    pub fn nranks(&self) -> usize {
        self.px * self.py
    }

    #[inline]
    pub fn coords(&self, rank: usize) -> (usize, usize) {
        debug_assert!(rank < self.nranks());
        (rank / self.py, rank % self.py)
    }

    #[inline]
    pub fn rank_at(&self, ix: usize, iy: usize) -> usize {
        debug_assert!(ix < self.px && iy < self.py);
        ix * self.py + iy
    }
}

/// Split `n` points into `parts` contiguous intervals: the first `n % parts`
/// intervals get one extra point. Errors when any interval would be empty.
pub fn split_evenly(n: usize, parts: usize) -> Result<Vec<(usize, usize)>> {
    (0..parts)
        .map(|p| split_part(n, parts, p))
        .collect()
}

/// `(start, count)` of interval `part` of [`split_evenly`], allocation-free.
pub fn split_part(n: usize, parts: usize, part: usize) -> Result<(usize, usize)> {
    if parts == 0 || n < parts {
        return Err(Error::OverDecomposed { n, parts });
    }
    debug_assert!(part < parts);
    let base = n / parts;
    let extra = n % parts;
    let start = part * base + part.min(extra);
    Ok((start, base + usize::from(part < extra)))
}

/// One worker's contiguous block: per-axis global start and count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalBox {
    pub start: [usize; 3],
    pub count: [usize; 3],
}

impl LocalBox {
    #[inline]
    pub fn len(&self) -> usize {
        self.count[0] * self.count[1] * self.count[2]
    }

    #[inline]
    pub fn range(&self, axis: Axis) -> std::ops::Range<usize> {
        let i = axis.idx();
        self.start[i]..self.start[i] + self.count[i]
    }

    /// Element strides of this box under the given storage order.
    pub fn strides(&self, order: [Axis; 3]) -> [usize; 3] {
        let mut strides = [0usize; 3];
        let mut s = 1;
        for axis in order.iter().rev() {
            strides[axis.idx()] = s;
            s *= self.count[axis.idx()];
        }
        strides
    }
}

/// A full decomposition: every rank's block is a pure function of this value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PencilLayout {
    pub grid: GridSpec,
    pub pgrid: ProcessGrid,
    pub orientation: Orientation,
}

impl PencilLayout {
    pub fn new(grid: GridSpec, pgrid: ProcessGrid, orientation: Orientation) -> Result<Self> {
        let layout = PencilLayout { grid, pgrid, orientation };
        // Validate every rank now so plans can assume extents exist.
        for rank in 0..pgrid.nranks() {
            layout.local_box(rank)?;
        }
        Ok(layout)
    }

    /// The block owned by `rank`. The complete axis spans the whole grid.
    pub fn local_box(&self, rank: usize) -> Result<LocalBox> {
        let (ix, iy) = self.pgrid.coords(rank);
        let [d0, d1] = self.orientation.decomposed_axes();
        let mut start = [0usize; 3];
        let mut count = self.grid.dims();
        let s0 = split_part(self.grid.len(d0), self.pgrid.px, ix)?;
        let s1 = split_part(self.grid.len(d1), self.pgrid.py, iy)?;
        start[d0.idx()] = s0.0;
        count[d0.idx()] = s0.1;
        start[d1.idx()] = s1.0;
        count[d1.idx()] = s1.1;
        Ok(LocalBox { start, count })
    }

    /// Rank one step along a decomposed axis, wrapping periodically.
    pub fn neighbor_along(&self, rank: usize, axis: Axis, step: i64) -> usize {
        let (ix, iy) = self.pgrid.coords(rank);
        let [d0, d1] = self.orientation.decomposed_axes();
        let wrap = |i: usize, n: usize| -> usize {
            (i as i64 + step).rem_euclid(n as i64) as usize
        };
        if axis == d0 {
            self.pgrid.rank_at(wrap(ix, self.pgrid.px), iy)
        } else if axis == d1 {
            self.pgrid.rank_at(ix, wrap(iy, self.pgrid.py))
        } else {
            panic!("axis {axis:?} is complete in orientation {:?}", self.orientation)
        }
    }
}

/// Exact eigenvalue of the 1D periodic second-difference stencil
/// `(v[j-1] - 2 v[j] + v[j+1]) / delta^2` on the discrete mode
/// `exp(2 pi i k j / n)`. Zero at `k = 0`, non-positive everywhere, and
/// symmetric under `k -> n - k`.
#[inline]
pub fn horizontal_eigenvalue(k: usize, n: usize, delta: f64) -> f64 {
    (2.0 * (TAU * k as f64 / n as f64).cos() - 2.0) / (delta * delta)
}
