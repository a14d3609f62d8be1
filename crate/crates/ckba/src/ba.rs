//! Basis adaptation: low-dimensional ridge surrogates of scalar observables.
//!
//! For each observable the dominant direction of variation is identified by
//! an l1-minimal affine fit of the normalized ensemble data (basis pursuit
//! denoising), additional directions come from regressing residuals on the
//! orthogonal complement, and the regression along the identified rotation is
//! a Hermite PCE estimated by Smolyak-Gauss-Hermite projection with
//! least-square preimage queries `xi = A^T eta`.
//!
//! Two variants are assembled:
//! * `Kd` — a full K-dimensional PCE re-projected at every stage;
//! * `Kx1d` — a sum of one-dimensional PCEs fitted on successive residuals,
//!   each stage projecting `g(a_k eta) - f_{k-1}(0)`.
//!
//! The BPDN solver is coordinate descent on the penalized (lasso) form with
//! an outer penalty-continuation loop that drives the data misfit to the
//! requested tolerance; iteration stops when the sweep change falls below
//! 1e-10 and the constraint is met within 1e-6.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pce::{project, smolyak_gh, MultiIndexSet, PceModel};
use crate::pipeline::iomatrix::{read_matrix, write_matrix};

/// Observable map queried while fitting surrogates. Implementations must be
/// pure so that quadrature queries can run in parallel.
pub trait ObservableFunction: Sync {
    fn n_outputs(&self) -> usize;
    fn eval(&self, xi: &DVector<f64>) -> Result<DVector<f64>>;
}

impl ObservableFunction for crate::darcy::HeadObservable<'_> {
    fn n_outputs(&self) -> usize {
        self.n_outputs()
    }

    fn eval(&self, xi: &DVector<f64>) -> Result<DVector<f64>> {
        crate::darcy::HeadObservable::eval(self, xi)
    }
}

/// Adapter for closures, mostly used by tests and synthetic studies.
pub struct FnObservable<F> {
    pub n_outputs: usize,
    pub f: F,
}

impl<F: Fn(&DVector<f64>) -> DVector<f64> + Sync> ObservableFunction for FnObservable<F> {
    fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    fn eval(&self, xi: &DVector<f64>) -> Result<DVector<f64>> {
        Ok((self.f)(xi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetRole {
    Train,
    Test,
}

/// Paired coefficient/observable ensembles: column j of `xi` produced column
/// j of `u`.
#[derive(Debug, Clone)]
pub struct EnsembleDataset {
    pub xi: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub seed_tag: String,
    pub role: DatasetRole,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    role: DatasetRole,
    seed_tag: String,
    n_xi: usize,
    n_u: usize,
    q: usize,
}

impl EnsembleDataset {
    pub fn new(
        xi: DMatrix<f64>,
        u: DMatrix<f64>,
        seed_tag: String,
        role: DatasetRole,
    ) -> Result<Self> {
        if xi.ncols() != u.ncols() {
            return Err(Error::DimensionMismatch {
                context: "ensemble column counts",
                expected: xi.ncols(),
                got: u.ncols(),
            });
        }
        for (i, v) in xi.iter().chain(u.iter()).enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "ensemble dataset",
                    index: i,
                });
            }
        }
        Ok(EnsembleDataset {
            xi,
            u,
            seed_tag,
            role,
        })
    }

    pub fn q(&self) -> usize {
        self.xi.ncols()
    }

    pub fn n_xi(&self) -> usize {
        self.xi.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.u.nrows()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = DatasetHeader {
            role: self.role,
            seed_tag: self.seed_tag.clone(),
            n_xi: self.n_xi(),
            n_u: self.n_u(),
            q: self.q(),
        };
        let hp = dir.join("header.json");
        let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(&hp, e))?;
        fs::write(&hp, text).map_err(|e| Error::io(&hp, e))?;
        write_matrix(&dir.join("xi.ckba"), &self.xi)?;
        write_matrix(&dir.join("u.ckba"), &self.u)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let hp = dir.join("header.json");
        let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
        let header: DatasetHeader =
            serde_json::from_str(&text).map_err(|e| Error::json(&hp, e))?;
        let xi = read_matrix(&dir.join("xi.ckba"))?;
        let u = read_matrix(&dir.join("u.ckba"))?;
        if xi.nrows() != header.n_xi || u.nrows() != header.n_u || xi.ncols() != header.q {
            return Err(Error::StaleArtifact {
                stage: "ensemble".into(),
                path: dir.to_path_buf(),
                problem: "array shapes disagree with header".into(),
            });
        }
        EnsembleDataset::new(xi, u, header.seed_tag, header.role)
    }
}

/// Options for the BPDN solver.
#[derive(Debug, Clone)]
pub struct BpdnOptions {
    /// Penalize the bias coordinate as written in the l1 objective (default);
    /// switch off to study an unpenalized intercept.
    pub penalize_bias: bool,
    /// Coordinate-descent sweep budget per continuation step.
    pub max_sweeps: usize,
}

impl Default for BpdnOptions {
    fn default() -> Self {
        BpdnOptions {
            penalize_bias: true,
            max_sweeps: 400_000,
        }
    }
}

/// Outcome report stored with every fitted direction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BpdnReport {
    pub epsilon: f64,
    pub achieved_residual: f64,
    pub lambda: f64,
    pub sweeps: u64,
    /// Whether the misfit constraint was reachable; when the data cannot be
    /// fit to `epsilon` even by least squares the best iterate is returned
    /// with this flag cleared.
    pub constraint_met: bool,
}

const CD_TOL: f64 = 1e-10;
const CONSTRAINT_SLACK: f64 = 1e-6;

/// Lasso coordinate descent in covariance form. A zero penalty weight leaves
/// a coordinate unpenalized; zero-norm columns stay at zero.
struct LassoWorkspace {
    gram: DMatrix<f64>,
    corr: DVector<f64>,
    gz: DVector<f64>,
    z: DVector<f64>,
    target_sq: f64,
}

impl LassoWorkspace {
    fn new(design: &DMatrix<f64>, target: &DVector<f64>) -> Self {
        let gram = design.transpose() * design;
        let corr = design.transpose() * target;
        let m = design.ncols();
        LassoWorkspace {
            gram,
            corr,
            gz: DVector::zeros(m),
            z: DVector::zeros(m),
            target_sq: target.norm_squared(),
        }
    }

    fn objective(&self, lambda: f64, weights: &[f64]) -> f64 {
        let quad = 0.5 * self.z.dot(&self.gz) - self.z.dot(&self.corr) + 0.5 * self.target_sq;
        let l1: f64 = self
            .z
            .iter()
            .zip(weights)
            .map(|(z, w)| z.abs() * w)
            .sum();
        quad + lambda * l1
    }

    /// Runs sweeps until the largest coordinate change drops below `tol`.
    /// Near-singular designs (projected coefficient matrices have exactly
    /// dependent columns) can trade mass between correlated coordinates
    /// indefinitely, so a stalled objective also counts as converged.
    fn solve(&mut self, lambda: f64, weights: &[f64], tol: f64, max_sweeps: usize) -> (u64, bool) {
        let m = self.z.len();
        let mut prev_obj = self.objective(lambda, weights);
        let mut stalled = 0u32;
        for sweep in 0..max_sweeps {
            let mut max_change = 0.0f64;
            for j in 0..m {
                let gjj = self.gram[(j, j)];
                if gjj <= f64::MIN_POSITIVE {
                    continue;
                }
                let cj = self.corr[j] - self.gz[j] + gjj * self.z[j];
                let thresh = lambda * weights[j];
                let new = if cj > thresh {
                    (cj - thresh) / gjj
                } else if cj < -thresh {
                    (cj + thresh) / gjj
                } else {
                    0.0
                };
                let delta = new - self.z[j];
                if delta != 0.0 {
                    let col = self.gram.column(j);
                    self.gz.zip_apply(&col, |g, c| *g += delta * c);
                    self.z[j] = new;
                    max_change = max_change.max(delta.abs());
                }
            }
            if max_change < tol {
                return (sweep as u64 + 1, true);
            }
            let obj = self.objective(lambda, weights);
            if prev_obj - obj <= 1e-15 * (1.0 + obj.abs()) {
                stalled += 1;
                if stalled >= 5 {
                    return (sweep as u64 + 1, true);
                }
            } else {
                stalled = 0;
            }
            prev_obj = obj;
        }
        (max_sweeps as u64, false)
    }

    /// `||target - design z||_2` via the covariance form.
    fn residual_norm(&self) -> f64 {
        let quad = self.z.dot(&self.gz) - 2.0 * self.z.dot(&self.corr) + self.target_sq;
        quad.max(0.0).sqrt()
    }
}

/// Solution of `min ||z||_1  s.t.  ||target - design z||_2 <= epsilon`.
#[derive(Debug, Clone)]
pub struct BpdnSolution {
    pub coeffs: DVector<f64>,
    pub report: BpdnReport,
}

/// Solves BPDN for an arbitrary design matrix. `penalty_weights`, when given,
/// scales the l1 penalty per coordinate (zero = unpenalized).
pub fn bpdn(
    design: &DMatrix<f64>,
    target: &DVector<f64>,
    epsilon: f64,
    opts: &BpdnOptions,
    penalty_weights: Option<&[f64]>,
) -> Result<BpdnSolution> {
    if design.nrows() != target.len() {
        return Err(Error::DimensionMismatch {
            context: "bpdn design rows vs target",
            expected: target.len(),
            got: design.nrows(),
        });
    }
    if epsilon < 0.0 || !epsilon.is_finite() {
        return Err(Error::Validation(format!(
            "bpdn tolerance must be nonnegative and finite, got {epsilon}"
        )));
    }
    for (i, v) in design.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "bpdn design matrix",
                index: i,
            });
        }
    }
    let m = design.ncols();
    let default_weights = vec![1.0; m];
    let weights = penalty_weights.unwrap_or(&default_weights);
    assert_eq!(weights.len(), m);

    let tnorm = target.norm();
    if tnorm <= epsilon {
        // zero is feasible and l1-minimal
        return Ok(BpdnSolution {
            coeffs: DVector::zeros(m),
            report: BpdnReport {
                epsilon,
                achieved_residual: tnorm,
                lambda: f64::INFINITY,
                sweeps: 0,
                constraint_met: true,
            },
        });
    }

    let mut ws = LassoWorkspace::new(design, target);
    let mut sweeps_total = 0u64;
    let lambda_max = ws
        .corr
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(c, &w)| c.abs() / w)
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);

    let run = |ws: &mut LassoWorkspace, lambda: f64, total: &mut u64| -> Result<f64> {
        let (sweeps, converged) = ws.solve(lambda, weights, CD_TOL, opts.max_sweeps);
        *total += sweeps;
        if !converged {
            return Err(Error::BpdnNonConvergence {
                achieved: ws.residual_norm(),
                epsilon,
                best: ws.z.iter().copied().collect(),
            });
        }
        Ok(ws.residual_norm())
    };

    // continuation: halve lambda until the constraint is reachable; a
    // residual plateau means the target is below the least-squares floor
    let lambda_floor = lambda_max * 1e-15;
    let mut hi = lambda_max;
    let hi_res = run(&mut ws, hi, &mut sweeps_total)?;
    let mut lo = hi;
    let mut lo_res = hi_res;
    let mut feasible = hi_res <= epsilon;
    if !feasible {
        let mut prev = hi_res;
        let mut plateau = 0u32;
        while lo > lambda_floor {
            lo *= 0.5;
            lo_res = run(&mut ws, lo, &mut sweeps_total)?;
            if lo_res <= epsilon {
                feasible = true;
                break;
            }
            if prev - lo_res <= 1e-9 * tnorm.max(1.0) {
                plateau += 1;
                if plateau >= 2 {
                    break;
                }
            } else {
                plateau = 0;
            }
            prev = lo_res;
            hi = lo;
        }
    }
    if !feasible {
        // even the (near) least-squares solution misses epsilon: return the
        // best iterate with the flag cleared
        return Ok(BpdnSolution {
            coeffs: ws.z.clone(),
            report: BpdnReport {
                epsilon,
                achieved_residual: lo_res,
                lambda: lo,
                sweeps: sweeps_total,
                constraint_met: false,
            },
        });
    }

    // bisect in log lambda for the largest feasible penalty
    if lo < hi {
        for _ in 0..60 {
            if lo_res >= epsilon - CONSTRAINT_SLACK || hi / lo <= 1.0 + 1e-9 {
                break;
            }
            let mid = ((lo.ln() + hi.ln()) * 0.5).exp();
            let mid_res = run(&mut ws, mid, &mut sweeps_total)?;
            if mid_res <= epsilon {
                lo = mid;
                lo_res = mid_res;
            } else {
                hi = mid;
            }
        }
        // land on the feasible endpoint
        lo_res = run(&mut ws, lo, &mut sweeps_total)?;
    }
    Ok(BpdnSolution {
        coeffs: ws.z.clone(),
        report: BpdnReport {
            epsilon,
            achieved_residual: lo_res,
            lambda: lo,
            sweeps: sweeps_total,
            constraint_met: lo_res <= epsilon + CONSTRAINT_SLACK,
        },
    })
}

/// BPDN on the affine design `[Xi^T | 1]`; returns the coefficient vector,
/// the bias, and the solver report.
pub fn bpdn_affine(
    xi: &DMatrix<f64>,
    target: &DVector<f64>,
    epsilon: f64,
    opts: &BpdnOptions,
) -> Result<(DVector<f64>, f64, BpdnReport)> {
    let q = xi.ncols();
    let m = xi.nrows();
    let mut design = DMatrix::zeros(q, m + 1);
    design.view_mut((0, 0), (q, m)).copy_from(&xi.transpose());
    design.column_mut(m).fill(1.0);
    let mut weights = vec![1.0; m + 1];
    if !opts.penalize_bias {
        weights[m] = 0.0;
    }
    let sol = bpdn(&design, target, epsilon, opts, Some(&weights))?;
    let a = sol.coeffs.rows(0, m).into_owned();
    Ok((a, sol.coeffs[m], sol.report))
}

/// Ensemble mean/standard deviation used to normalize a data row.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

pub fn norm_stats(u: &DVector<f64>) -> NormStats {
    let q = u.len() as f64;
    let mean = u.sum() / q;
    let var = u.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / q;
    NormStats {
        mean,
        std: var.sqrt(),
    }
}

const DEGENERATE_STD: f64 = 1e-14;

/// Identifies the dominant direction of a scalar observable from ensemble
/// data: normalize the data row, solve BPDN with `epsilon = tau * ||u_hat||`,
/// discard the bias, normalize the coefficients, and fix the sign so the
/// ensemble correlation between `a^T xi` and the normalized data is
/// nonnegative.
pub fn dominant_direction(
    xi: &DMatrix<f64>,
    u: &DVector<f64>,
    tau: f64,
    opts: &BpdnOptions,
) -> Result<(DVector<f64>, NormStats, BpdnReport)> {
    let stats = norm_stats(u);
    if stats.std < DEGENERATE_STD {
        return Err(Error::DegenerateObservable { sigma: stats.std });
    }
    let u_hat = u.add_scalar(-stats.mean) / stats.std;
    let epsilon = tau * u_hat.norm();
    let (a, _bias, report) = bpdn_affine(xi, &u_hat, epsilon, opts)?;
    let norm = a.norm();
    if norm < 1e-300 {
        return Err(Error::Validation(
            "bpdn returned the zero vector; tolerance too large to identify a direction".into(),
        ));
    }
    let mut direction = a / norm;
    let corr = (xi.transpose() * &direction).dot(&u_hat);
    if corr < 0.0 {
        direction.neg_mut();
    }
    Ok((direction, stats, report))
}

/// Result of a residual-driven direction search.
pub enum NextDirection {
    Found {
        direction: DVector<f64>,
        stats: NormStats,
        report: BpdnReport,
    },
    /// The current surrogate already explains the data.
    Converged,
}

/// Finds direction k+1 from the residual `u - predictions` after projecting
/// the coefficients onto the orthogonal complement of the rows of `rotation`;
/// the result satisfies `|rotation * a| < 1e-8` componentwise.
pub fn next_direction(
    xi: &DMatrix<f64>,
    u: &DVector<f64>,
    predictions: &DVector<f64>,
    rotation: &DMatrix<f64>,
    tau: f64,
    opts: &BpdnOptions,
) -> Result<NextDirection> {
    let residual = u - predictions;
    let res_stats = norm_stats(&residual);
    let data_stats = norm_stats(u);
    if res_stats.std <= 1e-12 * data_stats.std.max(1.0) {
        return Ok(NextDirection::Converged);
    }
    // Xi_{k+1} = (I - A^T A) Xi
    let projected = xi - rotation.transpose() * (rotation * xi);
    let (raw, stats, report) = match dominant_direction(&projected, &residual, tau, opts) {
        Ok(v) => v,
        Err(Error::DegenerateObservable { .. }) => return Ok(NextDirection::Converged),
        Err(e) => return Err(e),
    };
    // cleanup: remove any residual component in the span and renormalize
    let mut direction = &raw - rotation.transpose() * (rotation * &raw);
    let norm = direction.norm();
    if norm < 1e-8 {
        return Ok(NextDirection::Converged);
    }
    direction /= norm;
    Ok(NextDirection::Found {
        direction,
        stats,
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaVariant {
    /// Full K-dimensional PCE re-projected at each stage.
    Kd,
    /// Sum of one-dimensional PCEs fitted on successive residuals.
    Kx1d,
}

/// Degree/level/tolerance settings for a surrogate fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    /// Total polynomial degree p of the PCE.
    pub degree: usize,
    /// Smolyak level L (1-D rules grow linearly, m(i) = i).
    pub level: usize,
    /// BPDN tolerance factor: epsilon = tau * ||u_hat||.
    pub tau: f64,
    pub penalize_bias: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            degree: 3,
            level: 5,
            tau: 0.01,
            penalize_bias: true,
        }
    }
}

/// Per-stage diagnostics recorded while fitting one observable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageStats {
    pub mean: f64,
    pub std: f64,
    pub bpdn: BpdnReport,
    /// Training RMSE of the surrogate after this stage.
    pub train_rmse: f64,
    /// Kx1d regression-to-zero fallback fired (stage kept the previous fit).
    pub zeroed: bool,
}

/// Regression part of a single-observable surrogate.
#[derive(Debug, Clone)]
pub enum SurrogateModel {
    Kd(PceModel),
    Kx1d {
        parts: Vec<PceModel>,
        /// `offsets[k]` is the model value at the origin after stage k+1;
        /// the previous entry is subtracted when projecting the next stage.
        offsets: Vec<f64>,
    },
}

/// Ridge surrogate of one scalar observable.
#[derive(Debug, Clone)]
pub struct ObservableSurrogate {
    /// `K_eff x N_xi` rotation with orthonormal rows.
    pub rotation: DMatrix<f64>,
    pub model: SurrogateModel,
    pub stages: Vec<StageStats>,
    /// Forward queries spent on quadrature preimages for this observable.
    pub quad_queries: u64,
}

impl ObservableSurrogate {
    pub fn k_eff(&self) -> usize {
        self.rotation.nrows()
    }

    pub fn predict_one(&self, xi: &DVector<f64>) -> f64 {
        let eta = &self.rotation * xi;
        match &self.model {
            SurrogateModel::Kd(model) => model.eval(eta.as_slice()),
            SurrogateModel::Kx1d { parts, .. } => parts
                .iter()
                .enumerate()
                .map(|(k, q)| q.eval(&[eta[k]]))
                .sum(),
        }
    }

    /// `d f / d xi` via the chain rule through the rotation.
    pub fn gradient(&self, xi: &DVector<f64>) -> DVector<f64> {
        let eta = &self.rotation * xi;
        match &self.model {
            SurrogateModel::Kd(model) => {
                let grad_eta = model.eval_grad(eta.as_slice());
                self.rotation.transpose() * grad_eta
            }
            SurrogateModel::Kx1d { parts, .. } => {
                let mut grad = DVector::zeros(self.rotation.ncols());
                for (k, q) in parts.iter().enumerate() {
                    let d = q.eval_grad(&[eta[k]])[0];
                    grad.axpy(d, &self.rotation.row(k).transpose(), 1.0);
                }
                grad
            }
        }
    }

    /// Largest deviation of `A A^T` from the identity.
    pub fn orthonormality_defect(&self) -> f64 {
        let k = self.k_eff();
        let gram = &self.rotation * self.rotation.transpose();
        let mut defect = 0.0f64;
        for i in 0..k {
            for j in 0..k {
                let expected = if i == j { 1.0 } else { 0.0 };
                defect = defect.max((gram[(i, j)] - expected).abs());
            }
        }
        defect
    }
}

/// Basis-adaptation surrogate for a vector observable: independent ridge
/// models per component.
#[derive(Debug, Clone)]
pub struct RidgeSurrogate {
    pub variant: BaVariant,
    pub k_requested: usize,
    pub config: FitConfig,
    pub observables: Vec<ObservableSurrogate>,
}

impl RidgeSurrogate {
    pub fn n_outputs(&self) -> usize {
        self.observables.len()
    }

    pub fn n_inputs(&self) -> usize {
        self.observables
            .first()
            .map(|o| o.rotation.ncols())
            .unwrap_or(0)
    }

    /// Total forward queries spent on quadrature preimages.
    pub fn quad_queries(&self) -> u64 {
        self.observables.iter().map(|o| o.quad_queries).sum()
    }

    /// Predicts all observables for a batch of coefficient columns.
    pub fn predict(&self, xi: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_outputs(), xi.ncols());
        for j in 0..xi.ncols() {
            let col = xi.column(j).into_owned();
            for (i, obs) in self.observables.iter().enumerate() {
                out[(i, j)] = obs.predict_one(&col);
            }
        }
        out
    }
}

fn rms(v: &DVector<f64>) -> f64 {
    (v.norm_squared() / v.len() as f64).sqrt()
}

/// Fits one scalar observable (row `row` of the dataset).
fn fit_observable(
    observable: &dyn ObservableFunction,
    row: usize,
    dataset: &EnsembleDataset,
    k: usize,
    variant: BaVariant,
    config: &FitConfig,
) -> Result<ObservableSurrogate> {
    let n_xi = dataset.n_xi();
    let q = dataset.q();
    let u = dataset.u.row(row).transpose().into_owned();
    let opts = BpdnOptions {
        penalize_bias: config.penalize_bias,
        ..BpdnOptions::default()
    };

    let mut rotation = DMatrix::<f64>::zeros(0, n_xi);
    let mut stages: Vec<StageStats> = Vec::new();
    let mut quad_queries = 0u64;
    // predictions of f_{k-1} on the training ensemble (f_0 = 0)
    let mut predictions = DVector::<f64>::zeros(q);
    let mut kd_model: Option<PceModel> = None;
    let mut parts: Vec<PceModel> = Vec::new();
    let mut offsets: Vec<f64> = Vec::new();

    let stage_err = |stage: usize, source: Error| Error::SurrogateStage {
        stage,
        source: Box::new(source),
    };

    // scalar query through the vector observable
    let query = |xi: &DVector<f64>| -> Result<f64> { Ok(observable.eval(xi)?[row]) };

    for stage in 1..=k {
        let found = if stage == 1 {
            let (direction, stats, report) =
                dominant_direction(&dataset.xi, &u, config.tau, &opts)
                    .map_err(|e| stage_err(stage, e))?;
            Some((direction, stats, report))
        } else {
            match next_direction(&dataset.xi, &u, &predictions, &rotation, config.tau, &opts)
                .map_err(|e| stage_err(stage, e))?
            {
                NextDirection::Found {
                    direction,
                    stats,
                    report,
                } => Some((direction, stats, report)),
                NextDirection::Converged => None,
            }
        };
        let Some((direction, stats, report)) = found else {
            break;
        };
        rotation = {
            let mut next = DMatrix::zeros(rotation.nrows() + 1, n_xi);
            next.view_mut((0, 0), (rotation.nrows(), n_xi))
                .copy_from(&rotation);
            next.row_mut(rotation.nrows())
                .copy_from(&direction.transpose());
            next
        };

        let mut zeroed = false;
        match variant {
            BaVariant::Kd => {
                let set = MultiIndexSet::new(stage, config.degree);
                let rule = smolyak_gh(stage, config.level);
                quad_queries += rule.len() as u64;
                let mut query_failure: Option<Error> = None;
                let projected = project(
                    |eta| {
                        // least-square preimage xi = A^T eta
                        let xi = rotation.transpose() * DVector::from_row_slice(eta);
                        match query(&xi) {
                            Ok(v) => v,
                            Err(e) => {
                                query_failure.get_or_insert(e);
                                f64::NAN
                            }
                        }
                    },
                    &set,
                    &rule,
                );
                if let Some(e) = query_failure {
                    return Err(stage_err(stage, e));
                }
                let model = projected.map_err(|e| stage_err(stage, e))?;
                // re-evaluate f_k on the training ensemble
                for j in 0..q {
                    let eta = &rotation * dataset.xi.column(j);
                    predictions[j] = model.eval(eta.as_slice());
                }
                kd_model = Some(model);
            }
            BaVariant::Kx1d => {
                let set = MultiIndexSet::new(1, config.degree);
                let rule = smolyak_gh(1, config.level);
                quad_queries += rule.len() as u64;
                let offset = offsets.last().copied().unwrap_or(0.0);
                let mut query_failure: Option<Error> = None;
                let projected = project(
                    |eta| {
                        let xi = &direction * eta[0];
                        match query(&xi) {
                            Ok(v) => v - offset,
                            Err(e) => {
                                query_failure.get_or_insert(e);
                                f64::NAN
                            }
                        }
                    },
                    &set,
                    &rule,
                );
                if let Some(e) = query_failure {
                    return Err(stage_err(stage, e));
                }
                let mut model = projected.map_err(|e| stage_err(stage, e))?;
                let mut candidate = predictions.clone();
                for j in 0..q {
                    let eta_k = direction.dot(&dataset.xi.column(j));
                    candidate[j] += model.eval(&[eta_k]);
                }
                let prev_rmse = stages.last().map(|s| s.train_rmse);
                let candidate_rmse = rms(&(&u - &candidate));
                match prev_rmse {
                    Some(prev) if candidate_rmse > prev + 1e-10 => {
                        // residual stage did not help on the training set;
                        // keep the previous fit by zeroing this term
                        model = PceModel::zero(MultiIndexSet::new(1, config.degree));
                        zeroed = true;
                    }
                    _ => predictions = candidate,
                }
                offsets.push(offset + model.eval(&[0.0]));
                parts.push(model);
            }
        }

        stages.push(StageStats {
            mean: stats.mean,
            std: stats.std,
            bpdn: report,
            train_rmse: rms(&(&u - &predictions)),
            zeroed,
        });
    }

    if rotation.nrows() == 0 {
        return Err(stage_err(
            1,
            Error::Validation("no direction could be identified".into()),
        ));
    }

    let model = match variant {
        BaVariant::Kd => SurrogateModel::Kd(kd_model.expect("at least one stage ran")),
        BaVariant::Kx1d => SurrogateModel::Kx1d { parts, offsets },
    };
    Ok(ObservableSurrogate {
        rotation,
        model,
        stages,
        quad_queries,
    })
}

/// Fits ridge surrogates for every observable in the dataset. `observable`
/// must be the map that generated the dataset; it is queried at the
/// quadrature preimages of each stage. Per-observable fits run in parallel.
pub fn fit(
    observable: &dyn ObservableFunction,
    dataset: &EnsembleDataset,
    k: usize,
    variant: BaVariant,
    config: &FitConfig,
) -> Result<RidgeSurrogate> {
    if k < 1 {
        return Err(Error::Validation("surrogate dimension K must be >= 1".into()));
    }
    if observable.n_outputs() != dataset.n_u() {
        return Err(Error::DimensionMismatch {
            context: "observable outputs vs dataset rows",
            expected: dataset.n_u(),
            got: observable.n_outputs(),
        });
    }
    let observables: Vec<ObservableSurrogate> = (0..dataset.n_u())
        .into_par_iter()
        .map(|row| fit_observable(observable, row, dataset, k, variant, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(RidgeSurrogate {
        variant,
        k_requested: k,
        config: config.clone(),
        observables,
    })
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct SurrogateHeader {
    variant: BaVariant,
    k_requested: usize,
    degree: usize,
    level: usize,
    tau: f64,
    penalize_bias: bool,
    n_xi: usize,
    observables: Vec<ObservableHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ObservableHeader {
    k_eff: usize,
    quad_queries: u64,
    stages: Vec<StageStats>,
    /// Kx1d offsets f_k(0); empty for Kd.
    offsets: Vec<f64>,
}

impl RidgeSurrogate {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let n_xi = self.n_inputs();
        let mut rotation_rows = 0;
        let mut coeff_len = 0;
        let mut headers = Vec::new();
        for obs in &self.observables {
            rotation_rows += obs.k_eff();
            coeff_len += match &obs.model {
                SurrogateModel::Kd(m) => m.coeffs.len(),
                SurrogateModel::Kx1d { parts, .. } => {
                    parts.iter().map(|p| p.coeffs.len()).sum::<usize>()
                }
            };
            headers.push(ObservableHeader {
                k_eff: obs.k_eff(),
                quad_queries: obs.quad_queries,
                stages: obs.stages.clone(),
                offsets: match &obs.model {
                    SurrogateModel::Kd(_) => vec![],
                    SurrogateModel::Kx1d { offsets, .. } => offsets.clone(),
                },
            });
        }
        let mut rotations = DMatrix::zeros(rotation_rows, n_xi);
        let mut coeffs = DMatrix::zeros(coeff_len, 1);
        let mut row = 0;
        let mut at = 0;
        for obs in &self.observables {
            rotations
                .view_mut((row, 0), (obs.k_eff(), n_xi))
                .copy_from(&obs.rotation);
            row += obs.k_eff();
            let mut push = |m: &PceModel| {
                coeffs
                    .view_mut((at, 0), (m.coeffs.len(), 1))
                    .copy_from(&m.coeffs);
                at += m.coeffs.len();
            };
            match &obs.model {
                SurrogateModel::Kd(m) => push(m),
                SurrogateModel::Kx1d { parts, .. } => parts.iter().for_each(|p| push(p)),
            }
        }
        let header = SurrogateHeader {
            variant: self.variant,
            k_requested: self.k_requested,
            degree: self.config.degree,
            level: self.config.level,
            tau: self.config.tau,
            penalize_bias: self.config.penalize_bias,
            n_xi,
            observables: headers,
        };
        let hp = dir.join("header.json");
        let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(&hp, e))?;
        fs::write(&hp, text).map_err(|e| Error::io(&hp, e))?;
        write_matrix(&dir.join("rotations.ckba"), &rotations)?;
        write_matrix(&dir.join("coeffs.ckba"), &coeffs)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<RidgeSurrogate> {
        let hp = dir.join("header.json");
        let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
        let header: SurrogateHeader =
            serde_json::from_str(&text).map_err(|e| Error::json(&hp, e))?;
        let rotations = read_matrix(&dir.join("rotations.ckba"))?;
        let coeffs = read_matrix(&dir.join("coeffs.ckba"))?;
        let stale = |problem: &str| Error::StaleArtifact {
            stage: "train".into(),
            path: dir.to_path_buf(),
            problem: problem.into(),
        };
        if rotations.ncols() != header.n_xi {
            return Err(stale("rotation width disagrees with header"));
        }
        let mut observables = Vec::with_capacity(header.observables.len());
        let mut row = 0;
        let mut at = 0;
        for oh in &header.observables {
            if row + oh.k_eff > rotations.nrows() {
                return Err(stale("rotation rows exhausted"));
            }
            let rotation = rotations
                .view((row, 0), (oh.k_eff, header.n_xi))
                .into_owned();
            row += oh.k_eff;
            let take = |at: &mut usize, len: usize| -> Result<DVector<f64>> {
                if *at + len > coeffs.nrows() {
                    return Err(stale("coefficient rows exhausted"));
                }
                let v = coeffs.view((*at, 0), (len, 1)).column(0).into_owned();
                *at += len;
                Ok(v)
            };
            let model = match header.variant {
                BaVariant::Kd => {
                    let set = MultiIndexSet::new(oh.k_eff, header.degree);
                    let c = take(&mut at, set.len())?;
                    SurrogateModel::Kd(PceModel {
                        index_set: set,
                        coeffs: c,
                    })
                }
                BaVariant::Kx1d => {
                    let mut parts = Vec::with_capacity(oh.k_eff);
                    for _ in 0..oh.k_eff {
                        let set = MultiIndexSet::new(1, header.degree);
                        let c = take(&mut at, set.len())?;
                        parts.push(PceModel {
                            index_set: set,
                            coeffs: c,
                        });
                    }
                    SurrogateModel::Kx1d {
                        parts,
                        offsets: oh.offsets.clone(),
                    }
                }
            };
            observables.push(ObservableSurrogate {
                rotation,
                model,
                stages: oh.stages.clone(),
                quad_queries: oh.quad_queries,
            });
        }
        if row != rotations.nrows() || at != coeffs.nrows() {
            return Err(stale("trailing array data"));
        }
        Ok(RidgeSurrogate {
            variant: header.variant,
            k_requested: header.k_requested,
            config: FitConfig {
                degree: header.degree,
                level: header.level,
                tau: header.tau,
                penalize_bias: header.penalize_bias,
            },
            observables,
        })
    }
}
