//! Distributed solvers for the constant-coefficient pressure Poisson equation
//! on a 3D grid that is periodic in x and y and closed (Neumann) in z.
//!
//! Two solver families share one decomposition:
//!
//! * [`spectral`]: horizontal DFTs turn the operator into independent vertical
//!   tridiagonal systems, solved directly. Exact up to rounding.
//! * [`krylov`]: matrix-free conjugate gradient and BiCGStab on the 7-point
//!   discrete Laplacian, with halo exchange and fused reductions.
//!
//! Fields are spread over workers as 2D "pencil" blocks ([`pencil`]), and all
//! communication goes through an in-process message-passing harness ([`comm`])
//! so multi-worker runs are plain threads inside one test or benchmark process.
//! [`bench`] holds reproducible test cases, a dense reference solve, and the
//! accuracy/scaling drivers behind the `pencil-poisson` binary.

pub mod bench;
pub mod comm;
pub mod grid;
pub mod krylov;
pub mod pencil;
pub mod spectral;

use thiserror::Error;

/// Crate-wide error type. Collective operations return the same variant on
/// every participating worker so SPMD programs fail in lockstep.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("over-decomposed: cannot split {n} points over {parts} parts")]
    OverDecomposed { n: usize, parts: usize },
    #[error("transpose requires adjacent orientations, got {0:?} -> {1:?}")]
    NonAdjacentOrientations(grid::Orientation, grid::Orientation),
    #[error("field layout does not match plan {side} layout")]
    LayoutMismatch { side: &'static str },
    #[error("communication timeout: rank {rank} waited on {what}")]
    Timeout { rank: usize, what: &'static str },
    #[error("payload size mismatch: rank {rank} expected {expected} bytes from {peer}, got {got}")]
    SizeMismatch {
        rank: usize,
        peer: usize,
        expected: usize,
        got: usize,
    },
    #[error("collective mismatch: {0}")]
    CollectiveMismatch(String),
    #[error("worker {rank} panicked: {message}")]
    WorkerPanicked { rank: usize, message: String },
    #[error("tridiagonal pivot too small at row {row}")]
    SingularSystem { row: usize },
    #[error("Krylov breakdown: {0}")]
    Breakdown(&'static str),
    #[error("dense reference solve limited to {max} points, grid has {got}")]
    OracleTooLarge { max: usize, got: usize },
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
