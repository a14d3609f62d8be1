//! Small dense/banded linear-algebra helpers.
//!
//! The finite-volume operator on a structured nx-by-ny grid is symmetric
//! positive definite with half-bandwidth nx, so a banded Cholesky
//! factorization (the `dpbtrf` layout) gives O(n b^2) factor and O(n b)
//! solves. A Jacobi-preconditioned conjugate gradient is kept as a fallback
//! for matrices the direct factorization rejects.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Symmetric banded matrix stored by its lower band.
///
/// `band[i * (bw + 1) + d]` holds `A[i][i - d]` for `0 <= d <= bw`.
#[derive(Debug, Clone)]
pub struct SymBandMatrix {
    n: usize,
    bw: usize,
    band: Vec<f64>,
}

impl SymBandMatrix {
    pub fn zeros(n: usize, bw: usize) -> Self {
        SymBandMatrix {
            n,
            bw,
            band: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        let d = hi - lo;
        if d > self.bw {
            0.0
        } else {
            self.band[hi * (self.bw + 1) + d]
        }
    }

    /// Adds `v` to `A[i][j]` (and by symmetry `A[j][i]`). Panics if the
    /// entry falls outside the band.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        let d = hi - lo;
        assert!(d <= self.bw, "entry ({i},{j}) outside bandwidth {}", self.bw);
        self.band[hi * (self.bw + 1) + d] += v;
    }

    pub fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.n);
        let w = self.bw + 1;
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            let mut acc = 0.0;
            for j in lo..i {
                let v = self.band[i * w + (i - j)];
                acc += v * x[j];
                y[j] += v * x[i];
            }
            acc += self.band[i * w] * x[i];
            y[i] += acc;
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in i.saturating_sub(self.bw)..=i {
                let v = self.get(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    /// Banded Cholesky factorization `A = L L^T`. Fails on a non-positive
    /// pivot, which for our assembled operators signals a structurally
    /// singular system rather than roundoff.
    pub fn cholesky(&self) -> Result<BandCholesky> {
        let w = self.bw + 1;
        let mut l = self.band.clone();
        for j in 0..self.n {
            let lo = j.saturating_sub(self.bw);
            let mut diag = l[j * w];
            for k in lo..j {
                let v = l[j * w + (j - k)];
                diag -= v * v;
            }
            if diag <= 0.0 || !diag.is_finite() {
                return Err(Error::LinearSolve(format!(
                    "banded cholesky: non-positive pivot {diag:.3e} at row {j}"
                )));
            }
            let diag = diag.sqrt();
            l[j * w] = diag;
            let hi = (j + self.bw).min(self.n - 1);
            for i in (j + 1)..=hi {
                let mut v = l[i * w + (i - j)];
                let klo = lo.max(i.saturating_sub(self.bw));
                for k in klo..j {
                    v -= l[i * w + (i - k)] * l[j * w + (j - k)];
                }
                l[i * w + (i - j)] = v / diag;
            }
        }
        Ok(BandCholesky {
            n: self.n,
            bw: self.bw,
            l,
        })
    }
}

/// Lower-triangular banded Cholesky factor.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_in_place(&self, x: &mut DVector<f64>) {
        let w = self.bw + 1;
        // L y = b
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            let mut v = x[i];
            for k in lo..i {
                v -= self.l[i * w + (i - k)] * x[k];
            }
            x[i] = v / self.l[i * w];
        }
        // L^T x = y
        for i in (0..self.n).rev() {
            let hi = (i + self.bw).min(self.n - 1);
            let mut v = x[i];
            for k in (i + 1)..=hi {
                v -= self.l[k * w + (k - i)] * x[k];
            }
            x[i] = v / self.l[i * w];
        }
    }
}

/// Jacobi-preconditioned conjugate gradient with relative tolerance `rtol`.
pub fn pcg(
    a: &SymBandMatrix,
    b: &DVector<f64>,
    rtol: f64,
    max_iters: usize,
) -> Result<DVector<f64>> {
    let n = a.n();
    let mut x = DVector::zeros(n);
    let mut r = b.clone();
    let bnorm = b.norm();
    if bnorm == 0.0 {
        return Ok(x);
    }
    let dinv: Vec<f64> = (0..n)
        .map(|i| {
            let d = a.get(i, i);
            if d > 0.0 {
                1.0 / d
            } else {
                1.0
            }
        })
        .collect();
    let mut z = DVector::from_iterator(n, r.iter().zip(&dinv).map(|(ri, di)| ri * di));
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    for _ in 0..max_iters {
        let ap = a.matvec(&p);
        let denom = p.dot(&ap);
        if denom <= 0.0 {
            return Err(Error::LinearSolve(
                "pcg: operator not positive definite".into(),
            ));
        }
        let alpha = rz / denom;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        if r.norm() <= rtol * bnorm {
            return Ok(x);
        }
        z = DVector::from_iterator(n, r.iter().zip(&dinv).map(|(ri, di)| ri * di));
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        p = &z + beta * &p;
    }
    Err(Error::LinearSolve(format!(
        "pcg: no convergence to rtol {rtol:.1e} within {max_iters} iterations"
    )))
}

/// Dense Cholesky with adaptive diagonal jitter: starts at `jitter0` and
/// doubles at most `max_doublings` times before giving up. Returns the factor
/// together with the jitter that was actually applied (0.0 when none).
pub fn cholesky_with_jitter(
    a: &DMatrix<f64>,
    jitter0: f64,
    max_doublings: usize,
) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64)> {
    if let Some(chol) = nalgebra::Cholesky::new(a.clone()) {
        return Ok((chol, 0.0));
    }
    let mut jitter = jitter0;
    for _ in 0..=max_doublings {
        let mut m = a.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = nalgebra::Cholesky::new(m) {
            return Ok((chol, jitter));
        }
        jitter *= 2.0;
    }
    Err(Error::DegenerateGram(format!(
        "cholesky failed after jitter escalation to {jitter:.3e}"
    )))
}
