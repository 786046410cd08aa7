//! Self-contained complex DFT kernels with plan-time precomputation.
//!
//! A [`DftPlan`] fixes one transform length: it factorizes `n`, tabulates the
//! twiddle factors once, and owns the recursion scratch, so transforming a
//! line allocates nothing. Composite lengths recurse on the smallest prime
//! factor (decimation in time); a prime length, including large primes, falls
//! back to the direct O(n^2) sum over the same twiddle table.
//!
//! The forward transform is unnormalized; the inverse carries the `1/n`
//! factor, so `inverse(forward(x)) = x`.

use crate::{Error, Result};
use num_complex::Complex64;
use std::cell::RefCell;
use std::f64::consts::TAU;

/// Largest radix the in-place combine handles. The smallest prime factor of
/// a composite n is at most sqrt(n), so this admits any composite n <= 4096;
/// larger primes take the direct path and never hit the combine.
const MAX_RADIX: usize = 64;

#[derive(Debug)]
pub struct DftPlan {
    n: usize,
    factors: Vec<usize>,
    /// `twiddles[t] = exp(-2 pi i t / n)`; sub-transforms of length m index
    /// it at stride `n / m`.
    twiddles: Vec<Complex64>,
    work: RefCell<Vec<Complex64>>,
}

fn prime_factors(mut n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut p = 2;
    while p * p <= n {
        while n % p == 0 {
            out.push(p);
            n /= p;
        }
        p += 1;
    }
    if n > 1 {
        out.push(n);
    }
    out
}

fn smallest_prime_factor(n: usize) -> usize {
    let mut p = 2;
    while p * p <= n {
        if n % p == 0 {
            return p;
        }
        p += 1;
    }
    n
}

impl DftPlan {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("DFT length must be positive".into()));
        }
        let twiddles = (0..n)
            .map(|t| Complex64::from_polar(1.0, -TAU * t as f64 / n as f64))
            .collect();
        Ok(DftPlan {
            n,
            factors: prime_factors(n),
            twiddles,
            work: RefCell::new(vec![Complex64::ZERO; n]),
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn factors(&self) -> &[usize] {
        &self.factors
    }

    /// In-place unnormalized forward transform of one line.
    pub fn forward(&self, line: &mut [Complex64]) {
        assert_eq!(line.len(), self.n, "line length must match plan");
        let mut work = self.work.borrow_mut();
        self.transform(line, 0, 1, &mut work, self.n);
        line.copy_from_slice(&work);
    }

    /// In-place inverse transform, normalized by `1/n`, via conjugation of
    /// the forward kernel.
    pub fn inverse(&self, line: &mut [Complex64]) {
        assert_eq!(line.len(), self.n, "line length must match plan");
        for v in line.iter_mut() {
            *v = v.conj();
        }
        {
            let mut work = self.work.borrow_mut();
            self.transform(line, 0, 1, &mut work, self.n);
            line.copy_from_slice(&work);
        }
        let scale = 1.0 / self.n as f64;
        for v in line.iter_mut() {
            *v = v.conj() * scale;
        }
    }

    /// Twiddle for exponent `e` of the length-`m` sub-transform whose input
    /// stride is `stride`; `stride * m == n` along every recursion path.
    #[inline]
    fn tw(&self, e: usize, m: usize, stride: usize) -> Complex64 {
        self.twiddles[(e % m) * stride]
    }

    /// DFT of the strided sequence `input[offset + j * stride]`, `j < m`,
    /// written contiguously into `out[..m]`.
    fn transform(&self, input: &[Complex64], offset: usize, stride: usize, out: &mut [Complex64], m: usize) {
        if m == 1 {
            out[0] = input[offset];
            return;
        }
        let p = smallest_prime_factor(m);
        if p == m {
            // Prime length: direct summation against the shared table.
            for k in 0..m {
                let mut acc = Complex64::ZERO;
                for j in 0..m {
                    acc += input[offset + j * stride] * self.tw(j * k, m, stride);
                }
                out[k] = acc;
            }
            return;
        }
        debug_assert!(p <= MAX_RADIX);
        let sub = m / p;
        for j in 0..p {
            self.transform(
                input,
                offset + j * stride,
                stride * p,
                &mut out[j * sub..(j + 1) * sub],
                sub,
            );
        }
        // Combine the p sub-spectra in place, one output column at a time.
        let mut column = [Complex64::ZERO; MAX_RADIX];
        for k2 in 0..sub {
            for (j, c) in column[..p].iter_mut().enumerate() {
                *c = out[j * sub + k2];
            }
            for q in 0..p {
                let k = k2 + q * sub;
                let mut acc = Complex64::ZERO;
                for (j, &c) in column[..p].iter().enumerate() {
                    acc += c * self.tw(j * k, m, stride);
                }
                out[k] = acc;
            }
        }
    }
}
