//! Truncated (conditional) Karhunen-Loeve representations.
//!
//! The Mercer eigenproblem is discretized with the Nystrom scheme on the
//! finite-volume cell centers: with quadrature weights W (cell areas), the
//! symmetric problem `W^{1/2} C W^{1/2} v = lambda v` is solved densely and
//! eigenfunctions recovered as `phi = W^{-1/2} v`, which makes them
//! orthonormal under the weighted inner product. A field realization is
//!
//! ```text
//! y(x) = mean(x) + sum_i sqrt(lambda_i) xi_i phi_i(x)
//! ```
//!
//! with standard-normal coefficients xi.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::iomatrix::{read_matrix, write_matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisKind {
    Unconditional,
    Conditional,
}

/// Leading eigenpairs of the weighted covariance operator.
#[derive(Debug, Clone)]
pub struct EigenPairs {
    /// Descending, clamped to be nonnegative.
    pub eigenvalues: DVector<f64>,
    /// One column per mode, orthonormal under the quadrature weights.
    pub eigenfunctions: DMatrix<f64>,
}

/// Solves the discretized eigenproblem and returns the `n_terms` largest
/// pairs with a deterministic sign convention: the largest-magnitude entry of
/// each eigenfunction is positive, ties broken by lowest index.
pub fn eigensolve(cov: &DMatrix<f64>, weights: &DVector<f64>, n_terms: usize) -> Result<EigenPairs> {
    let n = cov.nrows();
    if cov.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "eigensolve covariance matrix",
            expected: n,
            got: cov.ncols(),
        });
    }
    if weights.len() != n {
        return Err(Error::DimensionMismatch {
            context: "eigensolve quadrature weights",
            expected: n,
            got: weights.len(),
        });
    }
    if n_terms > n {
        return Err(Error::Validation(format!(
            "requested {n_terms} eigenpairs from a {n}-cell grid"
        )));
    }
    if weights.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::Validation("quadrature weights must be positive".into()));
    }

    let wsqrt = weights.map(|w| w.sqrt());
    let mut sym = cov.clone();
    for i in 0..n {
        for j in 0..n {
            sym[(i, j)] *= wsqrt[i] * wsqrt[j];
        }
    }
    let eig = nalgebra::SymmetricEigen::try_new(sym, f64::EPSILON, 100 * n.max(32))
        .ok_or(Error::EigenFailure { size: n })?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut eigenvalues = DVector::zeros(n_terms);
    let mut eigenfunctions = DMatrix::zeros(n, n_terms);
    for (k, &src) in order.iter().take(n_terms).enumerate() {
        eigenvalues[k] = eig.eigenvalues[src].max(0.0);
        let mut phi = DVector::from_fn(n, |i, _| eig.eigenvectors[(i, src)] / wsqrt[i]);
        let mut arg = 0;
        let mut best = -1.0;
        for (i, &v) in phi.iter().enumerate() {
            if v.abs() > best {
                best = v.abs();
                arg = i;
            }
        }
        if phi[arg] < 0.0 {
            phi.neg_mut();
        }
        eigenfunctions.set_column(k, &phi);
    }
    Ok(EigenPairs {
        eigenvalues,
        eigenfunctions,
    })
}

/// Truncated (C)KLE over a fixed grid.
#[derive(Debug, Clone)]
pub struct FieldBasis {
    pub kind: BasisKind,
    pub mean: DVector<f64>,
    pub eigenvalues: DVector<f64>,
    pub eigenfunctions: DMatrix<f64>,
    /// Quadrature weights the eigenfunctions are orthonormal under.
    pub weights: DVector<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BasisHeader {
    kind: BasisKind,
    n_xi: usize,
    n_cells: usize,
    grid_hash: String,
}

impl FieldBasis {
    pub fn new(
        kind: BasisKind,
        mean: DVector<f64>,
        pairs: EigenPairs,
        weights: DVector<f64>,
    ) -> Self {
        assert_eq!(mean.len(), pairs.eigenfunctions.nrows());
        assert_eq!(mean.len(), weights.len());
        FieldBasis {
            kind,
            mean,
            eigenvalues: pairs.eigenvalues,
            eigenfunctions: pairs.eigenfunctions,
            weights,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.mean.len()
    }

    pub fn n_xi(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `mean + sum_i sqrt(lambda_i) xi_i phi_i`.
    pub fn expand(&self, xi: &DVector<f64>) -> Result<DVector<f64>> {
        if xi.len() != self.n_xi() {
            return Err(Error::DimensionMismatch {
                context: "kle expansion coefficients",
                expected: self.n_xi(),
                got: xi.len(),
            });
        }
        let scaled = DVector::from_fn(self.n_xi(), |i, _| self.eigenvalues[i].sqrt() * xi[i]);
        let mut field = self.mean.clone();
        field.gemv(1.0, &self.eigenfunctions, &scaled, 1.0);
        Ok(field)
    }

    /// Total retained variance `sum_i lambda_i`.
    pub fn energy(&self) -> f64 {
        self.eigenvalues.sum()
    }

    pub fn save(&self, dir: &Path, grid_hash: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = BasisHeader {
            kind: self.kind,
            n_xi: self.n_xi(),
            n_cells: self.n_cells(),
            grid_hash: grid_hash.to_string(),
        };
        let header_path = dir.join("header.json");
        let text = serde_json::to_string_pretty(&header)
            .map_err(|e| Error::json(&header_path, e))?;
        fs::write(&header_path, text).map_err(|e| Error::io(&header_path, e))?;
        write_matrix(&dir.join("mean.ckba"), &DMatrix::from_column_slice(
            self.mean.len(), 1, self.mean.as_slice(),
        ))?;
        write_matrix(&dir.join("eigenvalues.ckba"), &DMatrix::from_column_slice(
            self.eigenvalues.len(), 1, self.eigenvalues.as_slice(),
        ))?;
        write_matrix(&dir.join("eigenfunctions.ckba"), &self.eigenfunctions)?;
        write_matrix(&dir.join("weights.ckba"), &DMatrix::from_column_slice(
            self.weights.len(), 1, self.weights.as_slice(),
        ))?;
        Ok(())
    }

    pub fn load(dir: &Path, expected_grid_hash: Option<&str>) -> Result<FieldBasis> {
        let header_path = dir.join("header.json");
        let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
        let header: BasisHeader =
            serde_json::from_str(&text).map_err(|e| Error::json(&header_path, e))?;
        if let Some(expected) = expected_grid_hash {
            if header.grid_hash != expected {
                return Err(Error::StaleArtifact {
                    stage: "eigs".into(),
                    path: dir.to_path_buf(),
                    problem: format!(
                        "built for grid {} but current grid is {expected}",
                        header.grid_hash
                    ),
                });
            }
        }
        let mean = read_matrix(&dir.join("mean.ckba"))?.column(0).into_owned();
        let eigenvalues = read_matrix(&dir.join("eigenvalues.ckba"))?.column(0).into_owned();
        let eigenfunctions = read_matrix(&dir.join("eigenfunctions.ckba"))?;
        let weights = read_matrix(&dir.join("weights.ckba"))?.column(0).into_owned();
        if eigenvalues.len() != header.n_xi || mean.len() != header.n_cells {
            return Err(Error::StaleArtifact {
                stage: "eigs".into(),
                path: dir.to_path_buf(),
                problem: "array shapes disagree with header".into(),
            });
        }
        Ok(FieldBasis {
            kind: header.kind,
            mean,
            eigenvalues,
            eigenfunctions,
            weights,
        })
    }
}

/// Draws `count` i.i.d. standard-normal coefficient vectors as the columns of
/// an `n_xi x count` matrix. Fill order is fixed (column by column), so the
/// result is bit-reproducible for a given generator state.
pub fn sample_coeffs(rng: &mut impl Rng, count: usize, n_xi: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n_xi, count);
    for j in 0..count {
        for i in 0..n_xi {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}
