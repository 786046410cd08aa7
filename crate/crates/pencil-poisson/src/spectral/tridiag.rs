//! Tridiagonal systems and the Thomas algorithm.
//!
//! Each horizontal Fourier mode of the pressure equation reduces to one real
//! tridiagonal system along z: second differences with reflected (Neumann)
//! boundary closures plus the mode's horizontal eigenvalue on the diagonal.
//! The zero mode is singular under pure Neumann closures; its first row is
//! replaced by the gauge condition `x[0] = 0`.

use crate::{Error, Result};

/// Relative pivot floor: a pivot at or below this times the row magnitude is
/// treated as a zero and reported as a singular system.
pub const PIVOT_REL_TOL: f64 = 1e-14;

/// Coefficients and right-hand side of one tridiagonal system.
/// `sub[0]` and `sup[n-1]` are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct TridiagonalSystem {
    pub sub: Vec<f64>,
    pub diag: Vec<f64>,
    pub sup: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl TridiagonalSystem {
    pub fn zeros(n: usize) -> Self {
        TridiagonalSystem {
            sub: vec![0.0; n],
            diag: vec![0.0; n],
            sup: vec![0.0; n],
            rhs: vec![0.0; n],
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    /// Multiply the system matrix by `x` (used by oracle tests).
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut v = self.diag[i] * x[i];
                if i > 0 {
                    v += self.sub[i] * x[i - 1];
                }
                if i + 1 < n {
                    v += self.sup[i] * x[i + 1];
                }
                v
            })
            .collect()
    }
}

/// Thomas elimination into caller storage: `x` receives the solution and
/// `scratch` the forward-elimination coefficients; both have length n.
pub fn thomas_solve_into(sys: &TridiagonalSystem, x: &mut [f64], scratch: &mut [f64]) -> Result<()> {
    let n = sys.len();
    assert!(n > 0, "empty system");
    assert_eq!(x.len(), n);
    assert_eq!(scratch.len(), n);
    let row_scale = |i: usize| sys.sub[i].abs() + sys.diag[i].abs() + sys.sup[i].abs();

    let mut den = sys.diag[0];
    if den.abs() <= PIVOT_REL_TOL * row_scale(0) {
        return Err(Error::SingularSystem { row: 0 });
    }
    scratch[0] = sys.sup[0] / den;
    x[0] = sys.rhs[0] / den;
    for i in 1..n {
        den = sys.diag[i] - sys.sub[i] * scratch[i - 1];
        if den.abs() <= PIVOT_REL_TOL * row_scale(i) {
            return Err(Error::SingularSystem { row: i });
        }
        scratch[i] = sys.sup[i] / den;
        x[i] = (sys.rhs[i] - sys.sub[i] * x[i - 1]) / den;
    }
    for i in (0..n - 1).rev() {
        x[i] -= scratch[i] * x[i + 1];
    }
    Ok(())
}

/// Allocating convenience wrapper around [`thomas_solve_into`].
pub fn thomas_solve(sys: &TridiagonalSystem) -> Result<Vec<f64>> {
    let n = sys.len();
    let mut x = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    thomas_solve_into(sys, &mut x, &mut scratch)?;
    Ok(x)
}

/// Fill `sys` with the vertical system of one horizontal mode:
/// `(x[k-1] - 2 x[k] + x[k+1]) / dz^2 + lambda_h * x[k] = rhs[k]`, with
/// ghost reflection at both ends (each boundary diagonal gains `1/dz^2`).
/// For `lambda_h == 0` the first row is replaced by the gauge `x[0] = 0`.
pub fn build_vertical_system_into(
    sys: &mut TridiagonalSystem,
    lambda_h: f64,
    dz: f64,
    rhs: &[f64],
) {
    let n = rhs.len();
    assert_eq!(sys.len(), n, "system storage must match rhs length");
    let inv = 1.0 / (dz * dz);
    for i in 0..n {
        sys.sub[i] = inv;
        sys.diag[i] = -2.0 * inv + lambda_h;
        sys.sup[i] = inv;
        sys.rhs[i] = rhs[i];
    }
    sys.diag[0] += inv;
    sys.diag[n - 1] += inv;
    if lambda_h == 0.0 {
        sys.diag[0] = 1.0;
        sys.sup[0] = 0.0;
        sys.rhs[0] = 0.0;
    }
}

/// Allocating form of [`build_vertical_system_into`].
pub fn build_vertical_system(lambda_h: f64, dz: f64, rhs: &[f64]) -> TridiagonalSystem {
    let mut sys = TridiagonalSystem::zeros(rhs.len());
    build_vertical_system_into(&mut sys, lambda_h, dz, rhs);
    sys
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Dense Gaussian elimination with partial pivoting; the independent
    /// route for every Thomas result below.
    fn dense_solve(sys: &TridiagonalSystem) -> Vec<f64> {
        let n = sys.len();
        let mut a = vec![vec![0.0f64; n]; n];
        for i in 0..n {
            a[i][i] = sys.diag[i];
            if i > 0 {
                a[i][i - 1] = sys.sub[i];
            }
            if i + 1 < n {
                a[i][i + 1] = sys.sup[i];
            }
        }
        let mut b = sys.rhs.clone();
        for col in 0..n {
            let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, pivot);
            b.swap(col, pivot);
            assert!(a[col][col].abs() > 1e-300, "oracle hit singular matrix");
            for row in col + 1..n {
                let f = a[row][col] / a[col][col];
                if f != 0.0 {
                    for k in col..n {
                        a[row][k] -= f * a[col][k];
                    }
                    b[row] -= f * b[col];
                }
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let mut v = b[row];
            for k in row + 1..n {
                v -= a[row][k] * x[k];
            }
            x[row] = v / a[row][row];
        }
        x
    }

    #[test]
    fn single_point_mode_reference() {
        // nz = 1: both reflections cancel the vertical term, leaving
        // lambda_h * x = rhs.
        let sys = build_vertical_system(-4.0, 1.0, &[-4.0]);
        assert_eq!(sys.diag, vec![-4.0]);
        assert_eq!(thomas_solve(&sys).unwrap(), vec![1.0]);
    }

    #[test]
    fn zero_mode_is_pinned() {
        let sys = build_vertical_system(0.0, 1.0, &[0.0; 5]);
        assert_eq!(sys.diag[0], 1.0);
        assert_eq!(sys.sup[0], 0.0);
        let x = thomas_solve(&sys).unwrap();
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_mode_with_forcing_solves_pinned_chain() {
        // Pinned Neumann chain stays solvable for nonzero forcing.
        let rhs = [0.5, -1.0, 0.25, 0.75];
        let sys = build_vertical_system(0.0, 0.5, &rhs);
        let x = thomas_solve(&sys).unwrap();
        let expected = dense_solve(&sys);
        for i in 0..4 {
            assert!((x[i] - expected[i]).abs() < 1e-12, "{x:?} vs {expected:?}");
        }
        assert_eq!(x[0], 0.0, "gauge row pins the first value");
    }

    #[test]
    fn vertical_systems_match_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1usize, 2, 3, 4, 8, 13] {
            for lambda in [-4.0, -1.0, -0.3, -8.2] {
                for dz in [1.0, 0.5, 2.0] {
                    let rhs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let sys = build_vertical_system(lambda, dz, &rhs);
                    let x = thomas_solve(&sys).unwrap();
                    let expected = dense_solve(&sys);
                    let scale = expected.iter().map(|v| v.abs()).fold(1.0, f64::max);
                    for i in 0..n {
                        assert!(
                            (x[i] - expected[i]).abs() < 1e-12 * scale,
                            "n={n} lambda={lambda} dz={dz} i={i}"
                        );
                    }
                    // Substitution closes the loop independently of the oracle.
                    let back = sys.apply(&x);
                    for i in 0..n {
                        assert!((back[i] - rhs[i]).abs() < 1e-10 * scale.max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn random_dominant_systems_match_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..40 {
            let n = rng.random_range(1..12);
            let mut sys = TridiagonalSystem::zeros(n);
            for i in 0..n {
                sys.sub[i] = rng.random_range(-1.0..1.0);
                sys.sup[i] = rng.random_range(-1.0..1.0);
                // Dominance keeps both routes well-conditioned.
                sys.diag[i] = 3.0 + rng.random_range(0.0..1.0);
                sys.rhs[i] = rng.random_range(-2.0..2.0);
            }
            let x = thomas_solve(&sys).unwrap();
            let expected = dense_solve(&sys);
            for i in 0..n {
                assert!((x[i] - expected[i]).abs() < 1e-11, "trial {trial} row {i}");
            }
        }
    }

    #[test]
    fn zero_pivot_reported_with_row() {
        // Second pivot vanishes exactly: [[1, 1], [1, 1]] is rank one.
        let sys = TridiagonalSystem {
            sub: vec![0.0, 1.0],
            diag: vec![1.0, 1.0],
            sup: vec![1.0, 0.0],
            rhs: vec![1.0, 2.0],
        };
        assert_eq!(thomas_solve(&sys).unwrap_err(), Error::SingularSystem { row: 1 });
        let all_zero = TridiagonalSystem::zeros(3);
        assert_eq!(thomas_solve(&all_zero).unwrap_err(), Error::SingularSystem { row: 0 });
    }
}
