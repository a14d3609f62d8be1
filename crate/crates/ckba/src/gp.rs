//! Gaussian-process models of the log-transmissivity field.
//!
//! A model is a mean function plus a stationary covariance kernel, optionally
//! conditioned on direct point measurements through the Kriging equations
//!
//! ```text
//! ybar_c(x)  = m(x) + C(x, X) [C(X, X) + sigma_y^2 I]^{-1} (yhat - m(X))
//! C_c(x, x') = C(x, x') - C(x, X) [C(X, X) + sigma_y^2 I]^{-1} C(X, x')
//! ```
//!
//! The Gram factorization uses adaptive diagonal jitter starting at 1e-10 and
//! doubling at most 10 times; exact duplicate locations with zero noise are
//! rejected up front as a degenerate Gram matrix.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::cholesky_with_jitter;

pub type Point = [f64; 2];

const JITTER_START: f64 = 1e-10;
const JITTER_DOUBLINGS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    Matern52,
    SquaredExponential,
}

/// Stationary covariance kernel specification.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub variance: f64,
    pub lengthscale: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, variance: f64, lengthscale: f64) -> Result<Self> {
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(Error::Validation(format!(
                "kernel variance must be positive, got {variance}"
            )));
        }
        if !(lengthscale > 0.0) || !lengthscale.is_finite() {
            return Err(Error::Validation(format!(
                "kernel lengthscale must be positive, got {lengthscale}"
            )));
        }
        Ok(KernelSpec {
            family,
            variance,
            lengthscale,
        })
    }
}

/// Evaluates the kernel at a pair of points.
pub fn kernel_eval(spec: &KernelSpec, x1: Point, x2: Point) -> f64 {
    let dx = x1[0] - x2[0];
    let dy = x1[1] - x2[1];
    let r = (dx * dx + dy * dy).sqrt();
    match spec.family {
        KernelFamily::Matern52 => {
            let s = 5.0f64.sqrt() * r / spec.lengthscale;
            spec.variance * (1.0 + s + s * s / 3.0) * (-s).exp()
        }
        KernelFamily::SquaredExponential => {
            let z = r / spec.lengthscale;
            spec.variance * (-0.5 * z * z).exp()
        }
    }
}

/// Prior mean of the field.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum MeanFunction {
    Constant(f64),
    /// Values sampled at fixed points; evaluation snaps to the nearest point.
    GridSampled { points: Vec<Point>, values: Vec<f64> },
}

impl MeanFunction {
    pub fn eval(&self, x: Point) -> f64 {
        match self {
            MeanFunction::Constant(c) => *c,
            MeanFunction::GridSampled { points, values } => {
                let (best, _) = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let dx = p[0] - x[0];
                        let dy = p[1] - x[1];
                        (i, dx * dx + dy * dy)
                    })
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .expect("grid-sampled mean must hold at least one point");
                values[best]
            }
        }
    }
}

/// Data and precomputed factors for a conditioned model.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub locations: Vec<Point>,
    pub values: DVector<f64>,
    pub noise_variance: f64,
    /// Jitter added to factor the Gram matrix (0.0 when none was needed).
    pub jitter_used: f64,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    /// [C(X,X) + sigma^2 I]^{-1} (yhat - m(X))
    alpha: DVector<f64>,
}

/// Gaussian-process model, unconditional or conditioned on point data.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub mean: MeanFunction,
    pub kernel: KernelSpec,
    pub conditioning: Option<Conditioning>,
}

impl GpModel {
    pub fn unconditional(mean: MeanFunction, kernel: KernelSpec) -> Self {
        GpModel {
            mean,
            kernel,
            conditioning: None,
        }
    }

    pub fn is_conditioned(&self) -> bool {
        self.conditioning.is_some()
    }

    /// Conditions the model on observations `yhat` at `locations` with noise
    /// variance `noise_variance`. An empty observation set returns the model
    /// unchanged.
    pub fn condition(
        &self,
        locations: &[Point],
        yhat: &DVector<f64>,
        noise_variance: f64,
    ) -> Result<GpModel> {
        if self.conditioning.is_some() {
            return Err(Error::Validation(
                "model is already conditioned; condition the unconditional model instead".into(),
            ));
        }
        if locations.len() != yhat.len() {
            return Err(Error::DimensionMismatch {
                context: "conditioning locations vs values",
                expected: locations.len(),
                got: yhat.len(),
            });
        }
        if noise_variance < 0.0 {
            return Err(Error::Validation(format!(
                "noise variance must be nonnegative, got {noise_variance}"
            )));
        }
        if locations.is_empty() {
            return Ok(self.clone());
        }
        if noise_variance == 0.0 {
            for i in 0..locations.len() {
                for j in 0..i {
                    if locations[i] == locations[j] {
                        return Err(Error::DegenerateGram(format!(
                            "duplicate observation locations {:?} at indices {j} and {i} \
                             with zero noise",
                            locations[i]
                        )));
                    }
                }
            }
        }
        let n = locations.len();
        let mut gram = DMatrix::from_fn(n, n, |i, j| {
            kernel_eval(&self.kernel, locations[i], locations[j])
        });
        for i in 0..n {
            gram[(i, i)] += noise_variance;
        }
        let (chol, jitter_used) = cholesky_with_jitter(&gram, JITTER_START, JITTER_DOUBLINGS)?;
        let residual =
            DVector::from_iterator(n, (0..n).map(|i| yhat[i] - self.mean.eval(locations[i])));
        let alpha = chol.solve(&residual);
        Ok(GpModel {
            mean: self.mean.clone(),
            kernel: self.kernel,
            conditioning: Some(Conditioning {
                locations: locations.to_vec(),
                values: yhat.clone(),
                noise_variance,
                jitter_used,
                chol,
                alpha,
            }),
        })
    }

    /// Mean at a point: `m(x)` or the Kriging mean when conditioned.
    pub fn mean_at(&self, x: Point) -> f64 {
        let base = self.mean.eval(x);
        match &self.conditioning {
            None => base,
            Some(cond) => {
                let cross: f64 = cond
                    .locations
                    .iter()
                    .zip(cond.alpha.iter())
                    .map(|(&xi, &a)| kernel_eval(&self.kernel, x, xi) * a)
                    .sum();
                base + cross
            }
        }
    }

    /// Covariance between two points: `C` or the conditioned `C_c`.
    pub fn cov_at(&self, x1: Point, x2: Point) -> f64 {
        let prior = kernel_eval(&self.kernel, x1, x2);
        match &self.conditioning {
            None => prior,
            Some(cond) => {
                let k1 = DVector::from_iterator(
                    cond.locations.len(),
                    cond.locations
                        .iter()
                        .map(|&xi| kernel_eval(&self.kernel, x1, xi)),
                );
                let k2 = DVector::from_iterator(
                    cond.locations.len(),
                    cond.locations
                        .iter()
                        .map(|&xi| kernel_eval(&self.kernel, x2, xi)),
                );
                prior - k1.dot(&cond.chol.solve(&k2))
            }
        }
    }

    /// Mean vector over a set of points.
    pub fn mean_vector(&self, points: &[Point]) -> DVector<f64> {
        DVector::from_iterator(points.len(), points.iter().map(|&x| self.mean_at(x)))
    }

    /// Materializes the (conditional) covariance matrix on a point set.
    ///
    /// The result is exactly symmetric; row assembly runs in parallel.
    pub fn cov_matrix(&self, points: &[Point]) -> Result<DMatrix<f64>> {
        if points.is_empty() {
            return Err(Error::Validation("covariance grid must be nonempty".into()));
        }
        let n = points.len();
        let mut prior = DMatrix::zeros(n, n);
        {
            let spec = self.kernel;
            let rows: Vec<Vec<f64>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    (0..=i)
                        .map(|j| kernel_eval(&spec, points[i], points[j]))
                        .collect()
                })
                .collect();
            for (i, row) in rows.into_iter().enumerate() {
                for (j, v) in row.into_iter().enumerate() {
                    prior[(i, j)] = v;
                    prior[(j, i)] = v;
                }
            }
        }
        let Some(cond) = &self.conditioning else {
            return Ok(prior);
        };
        let ny = cond.locations.len();
        let cross = DMatrix::from_fn(n, ny, |i, j| {
            kernel_eval(&self.kernel, points[i], cond.locations[j])
        });
        // C_c = C - B K^{-1} B^T with B = C(grid, X)
        let solved = cond.chol.solve(&cross.transpose());
        let mut out = prior - &cross * solved;
        // enforce exact symmetry against roundoff
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (out[(i, j)] + out[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::Rng;

    fn spec() -> KernelSpec {
        KernelSpec::new(KernelFamily::Matern52, 1.0, 0.5).unwrap()
    }

    #[test]
    fn kernel_at_zero_distance_equals_variance() {
        let s = KernelSpec::new(KernelFamily::Matern52, 2.5, 0.3).unwrap();
        let x = [0.4, 0.7];
        assert_relative_eq!(kernel_eval(&s, x, x), 2.5, epsilon = 1e-15);
    }

    #[test]
    fn kernel_is_symmetric() {
        let s = spec();
        let mut rng = crate::rng::stream(1, "gp-kernel-symmetry");
        for _ in 0..50 {
            let a = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let b = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            assert_eq!(kernel_eval(&s, a, b), kernel_eval(&s, b, a));
        }
    }

    #[test]
    fn matern_value_at_one_lengthscale() {
        // closed form (1 + sqrt5 + 5/3) exp(-sqrt5) evaluated in f64
        let s = KernelSpec::new(KernelFamily::Matern52, 1.0, 0.25).unwrap();
        let v = kernel_eval(&s, [0.0, 0.0], [0.25, 0.0]);
        assert_abs_diff_eq!(v, 0.5239941088318203, epsilon = 1e-12);
    }

    #[test]
    fn matern_monotone_in_distance() {
        let s = spec();
        let mut last = f64::INFINITY;
        for k in 0..200 {
            let r = k as f64 * 0.02;
            let v = kernel_eval(&s, [0.0, 0.0], [r, 0.0]);
            assert!(v <= last + 1e-15, "kernel increased at r = {r}");
            last = v;
        }
    }

    #[test]
    fn empty_conditioning_returns_identical_model() {
        let gp = GpModel::unconditional(MeanFunction::Constant(0.3), spec());
        let same = gp.condition(&[], &DVector::zeros(0), 0.0).unwrap();
        assert!(!same.is_conditioned());
        let x = [0.2, 0.9];
        assert_eq!(gp.mean_at(x), same.mean_at(x));
        assert_eq!(gp.cov_at(x, [0.5, 0.5]), same.cov_at(x, [0.5, 0.5]));
    }

    #[test]
    fn noiseless_conditioning_interpolates() {
        let gp = GpModel::unconditional(MeanFunction::Constant(0.0), spec());
        let xs = [[0.1, 0.1], [0.8, 0.3], [0.4, 0.9]];
        let ys = DVector::from_vec(vec![1.0, -0.5, 0.25]);
        let cond = gp.condition(&xs, &ys, 0.0).unwrap();
        for (i, &x) in xs.iter().enumerate() {
            assert_abs_diff_eq!(cond.mean_at(x), ys[i], epsilon = 1e-8);
            assert_abs_diff_eq!(cond.cov_at(x, x), 0.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn duplicate_locations_with_zero_noise_are_degenerate() {
        let gp = GpModel::unconditional(MeanFunction::Constant(0.0), spec());
        let xs = [[0.1, 0.1], [0.1, 0.1]];
        let ys = DVector::from_vec(vec![1.0, 1.0]);
        match gp.condition(&xs, &ys, 0.0) {
            Err(Error::DegenerateGram(_)) => {}
            other => panic!("expected degenerate gram, got {other:?}"),
        }
        // positive noise makes repeated reads legal
        assert!(gp.condition(&xs, &ys, 1e-4).is_ok());
    }

    #[test]
    fn mean_reproduces_data_within_noise() {
        let gp = GpModel::unconditional(MeanFunction::Constant(0.0), spec());
        let mut rng = crate::rng::stream(2, "gp-noise-repro");
        let xs: Vec<Point> = (0..12)
            .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
            .collect();
        // consistent data: a smooth function of position
        let ys = DVector::from_iterator(
            xs.len(),
            xs.iter().map(|p| (2.0 * p[0]).sin() + 0.5 * p[1]),
        );
        let sigma = 1e-3;
        let cond = gp.condition(&xs, &ys, sigma * sigma).unwrap();
        for (i, &x) in xs.iter().enumerate() {
            assert!((cond.mean_at(x) - ys[i]).abs() < sigma.max(1e-6));
        }
    }

    #[test]
    fn cov_matrix_single_cell_unconditional() {
        let gp = GpModel::unconditional(MeanFunction::Constant(0.0), spec());
        let m = gp.cov_matrix(&[[0.5, 0.5]]).unwrap();
        assert_eq!(m.nrows(), 1);
        assert_relative_eq!(m[(0, 0)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn conditioned_row_vanishes_at_exact_observation() {
        let gp = GpModel::unconditional(MeanFunction::Constant(0.0), spec());
        let grid: Vec<Point> = (0..10).map(|i| [i as f64 / 10.0, 0.5]).collect();
        let obs = [grid[3]];
        let cond = gp
            .condition(&obs, &DVector::from_vec(vec![0.7]), 0.0)
            .unwrap();
        let m = cond.cov_matrix(&grid).unwrap();
        for j in 0..grid.len() {
            assert_abs_diff_eq!(m[(3, j)], 0.0, epsilon = 1e-8);
            assert_abs_diff_eq!(m[(j, 3)], 0.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn conditioning_shrinks_diagonal_and_trace() {
        let gp = GpModel::unconditional(MeanFunction::Constant(0.0), spec());
        let grid: Vec<Point> = (0..10).map(|i| [i as f64 / 10.0, 0.25]).collect();
        let obs = [[0.15, 0.3], [0.65, 0.2], [0.9, 0.28]];
        let cond = gp
            .condition(&obs, &DVector::from_vec(vec![0.1, -0.2, 0.4]), 1e-6)
            .unwrap();
        let prior = gp.cov_matrix(&grid).unwrap();
        let posterior = cond.cov_matrix(&grid).unwrap();
        for i in 0..grid.len() {
            assert!(posterior[(i, i)] <= prior[(i, i)] + 1e-10);
            assert!(posterior[(i, i)] >= -1e-10);
        }
        assert!(posterior.trace() <= prior.trace() + 1e-8);
    }
}
