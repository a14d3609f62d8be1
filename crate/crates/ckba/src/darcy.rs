//! Finite-volume forward solver for steady 2-D saturated flow.
//!
//! The BVP is `div(T grad u) = 0` with per-edge Dirichlet head or Neumann
//! flux data, discretized on a uniform cell-centered grid with two-point
//! fluxes and harmonic-mean face transmissivities. Dirichlet edges use ghost
//! values at half-cell distance. The assembled operator is symmetric positive
//! definite and pentadiagonal; it is factorized with a banded Cholesky and
//! falls back to preconditioned conjugate gradients if the factorization is
//! rejected.
//!
//! Transmissivity is `T = exp(y)` for the log-transmissivity field `y`.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::Point;
use crate::kle::FieldBasis;
use crate::linalg::{pcg, BandCholesky, SymBandMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Edge {
    Left,
    Right,
    Bottom,
    Top,
}

pub const EDGES: [Edge; 4] = [Edge::Left, Edge::Right, Edge::Bottom, Edge::Top];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeCondition {
    Dirichlet,
    Neumann,
}

/// Uniform rectangular grid with per-edge boundary tags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridGeometry {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    /// Tags indexed as [left, right, bottom, top].
    pub boundary: [EdgeCondition; 4],
}

impl GridGeometry {
    pub fn new(
        nx: usize,
        ny: usize,
        lx: f64,
        ly: f64,
        boundary: [EdgeCondition; 4],
    ) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::Validation(format!(
                "grid must be at least 2x2 cells, got {nx}x{ny}"
            )));
        }
        if !(lx > 0.0) || !(ly > 0.0) {
            return Err(Error::Validation(format!(
                "domain lengths must be positive, got {lx}x{ly}"
            )));
        }
        if !boundary.contains(&EdgeCondition::Dirichlet) {
            return Err(Error::Validation(
                "at least one edge must be Dirichlet for a well-posed problem".into(),
            ));
        }
        Ok(GridGeometry {
            nx,
            ny,
            lx,
            ly,
            boundary,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn dx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        self.ly / self.ny as f64
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    pub fn center(&self, cell: usize) -> Point {
        let ix = cell % self.nx;
        let iy = cell / self.nx;
        [
            (ix as f64 + 0.5) * self.dx(),
            (iy as f64 + 0.5) * self.dy(),
        ]
    }

    pub fn centers(&self) -> Vec<Point> {
        (0..self.n_cells()).map(|c| self.center(c)).collect()
    }

    /// Quadrature weights for the Mercer eigenproblem: cell areas.
    pub fn cell_areas(&self) -> DVector<f64> {
        DVector::from_element(self.n_cells(), self.dx() * self.dy())
    }

    pub fn edge_condition(&self, edge: Edge) -> EdgeCondition {
        self.boundary[edge_slot(edge)]
    }
}

fn edge_slot(edge: Edge) -> usize {
    match edge {
        Edge::Left => 0,
        Edge::Right => 1,
        Edge::Bottom => 2,
        Edge::Top => 3,
    }
}

/// Constant per-edge boundary data: head on Dirichlet edges, outward flux on
/// Neumann edges.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BvpSpec {
    /// Values indexed as [left, right, bottom, top].
    pub values: [f64; 4],
}

impl BvpSpec {
    pub fn new(values: [f64; 4]) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("boundary values must be finite".into()));
        }
        Ok(BvpSpec { values })
    }

    pub fn value(&self, edge: Edge) -> f64 {
        self.values[edge_slot(edge)]
    }
}

/// Cell indices observed for heads (`X_u`) and for the field itself (`X_y`).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ObservationLayout {
    pub head_cells: Vec<usize>,
    pub field_cells: Vec<usize>,
}

impl ObservationLayout {
    pub fn validate(&self, grid: &GridGeometry) -> Result<()> {
        for (name, list) in [("head", &self.head_cells), ("field", &self.field_cells)] {
            let mut seen = std::collections::HashSet::new();
            for &c in list {
                if c >= grid.n_cells() {
                    return Err(Error::Validation(format!(
                        "{name} observation cell {c} outside the {} cell grid",
                        grid.n_cells()
                    )));
                }
                if !seen.insert(c) {
                    return Err(Error::Validation(format!(
                        "{name} observation cell {c} listed twice"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One face of the FV stencil.
enum Face {
    /// `trans_geo = face_len / center_distance`
    Interior { a: usize, b: usize, trans_geo: f64 },
    /// `trans_geo = face_len / (center_distance / 2)` for the ghost value
    Boundary {
        cell: usize,
        edge: Edge,
        midpoint: Point,
        trans_geo: f64,
        len: f64,
    },
}

fn for_each_face(grid: &GridGeometry, mut visit: impl FnMut(&Face)) {
    let dx = grid.dx();
    let dy = grid.dy();
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let c = grid.index(ix, iy);
            // interior faces: owned by the lower-index side
            if ix + 1 < grid.nx {
                visit(&Face::Interior {
                    a: c,
                    b: grid.index(ix + 1, iy),
                    trans_geo: dy / dx,
                });
            }
            if iy + 1 < grid.ny {
                visit(&Face::Interior {
                    a: c,
                    b: grid.index(ix, iy + 1),
                    trans_geo: dx / dy,
                });
            }
            let y_mid = (iy as f64 + 0.5) * dy;
            let x_mid = (ix as f64 + 0.5) * dx;
            if ix == 0 {
                visit(&Face::Boundary {
                    cell: c,
                    edge: Edge::Left,
                    midpoint: [0.0, y_mid],
                    trans_geo: 2.0 * dy / dx,
                    len: dy,
                });
            }
            if ix + 1 == grid.nx {
                visit(&Face::Boundary {
                    cell: c,
                    edge: Edge::Right,
                    midpoint: [grid.lx, y_mid],
                    trans_geo: 2.0 * dy / dx,
                    len: dy,
                });
            }
            if iy == 0 {
                visit(&Face::Boundary {
                    cell: c,
                    edge: Edge::Bottom,
                    midpoint: [x_mid, 0.0],
                    trans_geo: 2.0 * dx / dy,
                    len: dx,
                });
            }
            if iy + 1 == grid.ny {
                visit(&Face::Boundary {
                    cell: c,
                    edge: Edge::Top,
                    midpoint: [x_mid, grid.ly],
                    trans_geo: 2.0 * dx / dy,
                    len: dx,
                });
            }
        }
    }
}

#[inline]
fn harmonic(ta: f64, tb: f64) -> f64 {
    2.0 * ta * tb / (ta + tb)
}

fn check_field(y: &DVector<f64>, grid: &GridGeometry) -> Result<()> {
    if y.len() != grid.n_cells() {
        return Err(Error::DimensionMismatch {
            context: "log-transmissivity field",
            expected: grid.n_cells(),
            got: y.len(),
        });
    }
    for (i, v) in y.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "log-transmissivity field",
                index: i,
            });
        }
    }
    Ok(())
}

fn assemble(
    grid: &GridGeometry,
    bc: &dyn Fn(Edge, Point) -> f64,
    trans: &DVector<f64>,
) -> (SymBandMatrix, DVector<f64>) {
    let n = grid.n_cells();
    let mut a = SymBandMatrix::zeros(n, grid.nx);
    let mut b = DVector::zeros(n);
    for_each_face(grid, |face| match *face {
        Face::Interior {
            a: ca,
            b: cb,
            trans_geo,
        } => {
            let c = harmonic(trans[ca], trans[cb]) * trans_geo;
            a.add(ca, ca, c);
            a.add(cb, cb, c);
            a.add(ca, cb, -c);
        }
        Face::Boundary {
            cell,
            edge,
            midpoint,
            trans_geo,
            len,
        } => match grid.edge_condition(edge) {
            EdgeCondition::Dirichlet => {
                let c = trans[cell] * trans_geo;
                a.add(cell, cell, c);
                b[cell] += c * bc(edge, midpoint);
            }
            EdgeCondition::Neumann => {
                // outward flux q_N leaves the balance as a source term
                b[cell] -= bc(edge, midpoint) * len;
            }
        },
    });
    (a, b)
}

fn solve_system(a: &SymBandMatrix, b: &DVector<f64>) -> Result<DVector<f64>> {
    let u = match a.cholesky() {
        Ok(factor) => factor.solve(b),
        // iterative fallback at tight relative tolerance
        Err(_) => pcg(a, b, 1e-12, 100 * a.n())?,
    };
    let residual = (a.matvec(&u) - b).norm();
    let scale = b.norm().max(1.0);
    if residual > 1e-10 * scale {
        return Err(Error::LinearSolve(format!(
            "flux balance residual {residual:.3e} exceeds 1e-10 * {scale:.3e}"
        )));
    }
    Ok(u)
}

/// Solves the BVP for the head field given log-transmissivity `y`.
pub fn solve_head(grid: &GridGeometry, bvp: &BvpSpec, y: &DVector<f64>) -> Result<DVector<f64>> {
    solve_head_with(grid, &|edge, _| bvp.value(edge), y)
}

/// Same as [`solve_head`] but with spatially varying boundary data: `bc`
/// returns the Dirichlet head or the outward Neumann flux at a boundary face
/// midpoint, according to the edge tag.
pub fn solve_head_with(
    grid: &GridGeometry,
    bc: &dyn Fn(Edge, Point) -> f64,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_field(y, grid)?;
    let trans = y.map(f64::exp);
    let (a, b) = assemble(grid, bc, &trans);
    solve_system(&a, &b)
}

/// Signed and absolute totals of the discrete boundary fluxes; the signed
/// total vanishes for a conservative solution.
pub fn boundary_flux_audit(
    grid: &GridGeometry,
    bvp: &BvpSpec,
    y: &DVector<f64>,
    u: &DVector<f64>,
) -> (f64, f64) {
    let trans = y.map(f64::exp);
    let mut net = 0.0;
    let mut total = 0.0;
    for_each_face(grid, |face| {
        if let Face::Boundary {
            cell,
            edge,
            midpoint,
            trans_geo,
            len,
        } = *face
        {
            let flux_out = match grid.edge_condition(edge) {
                EdgeCondition::Dirichlet => {
                    trans[cell] * trans_geo * (u[cell] - bvp.value(edge))
                }
                EdgeCondition::Neumann => bvp.value(edge) * len,
            };
            let _ = midpoint;
            net += flux_out;
            total += flux_out.abs();
        }
    });
    (net, total)
}

/// Extracts head observations in layout order.
pub fn observe(u: &DVector<f64>, layout: &ObservationLayout) -> DVector<f64> {
    DVector::from_iterator(
        layout.head_cells.len(),
        layout.head_cells.iter().map(|&c| u[c]),
    )
}

/// The observation function `xi -> g(xi)`: expansion, forward solve, and
/// head extraction composed. Evaluations are pure (nothing is cached) and
/// counted for cost reporting.
pub struct HeadObservable<'a> {
    grid: &'a GridGeometry,
    bvp: &'a BvpSpec,
    basis: &'a FieldBasis,
    layout: &'a ObservationLayout,
    queries: AtomicU64,
}

impl<'a> HeadObservable<'a> {
    pub fn new(
        grid: &'a GridGeometry,
        bvp: &'a BvpSpec,
        basis: &'a FieldBasis,
        layout: &'a ObservationLayout,
    ) -> Result<Self> {
        if basis.n_cells() != grid.n_cells() {
            return Err(Error::DimensionMismatch {
                context: "basis grid size",
                expected: grid.n_cells(),
                got: basis.n_cells(),
            });
        }
        layout.validate(grid)?;
        Ok(HeadObservable {
            grid,
            bvp,
            basis,
            layout,
            queries: AtomicU64::new(0),
        })
    }

    pub fn n_outputs(&self) -> usize {
        self.layout.head_cells.len()
    }

    pub fn n_inputs(&self) -> usize {
        self.basis.n_xi()
    }

    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    pub fn eval(&self, xi: &DVector<f64>) -> Result<DVector<f64>> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        let field = self.basis.expand(xi)?;
        let u = solve_head(self.grid, self.bvp, &field)?;
        Ok(observe(&u, self.layout))
    }

    /// Heads at the observation cells plus the Jacobian d g / d xi computed
    /// with forward sensitivities: one extra banded solve per KLE mode, all
    /// reusing the factorization of the forward system.
    pub fn eval_with_jacobian(&self, xi: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        let field = self.basis.expand(xi)?;
        check_field(&field, self.grid)?;
        let trans = field.map(f64::exp);
        let bc = |edge: Edge, _: Point| self.bvp.value(edge);
        let (a, b) = assemble(self.grid, &bc, &trans);
        let factor: BandCholesky = a.cholesky().map_err(|e| {
            Error::LinearSolve(format!("sensitivity factorization failed: {e}"))
        })?;
        let u = factor.solve(&b);

        let n_obs = self.layout.head_cells.len();
        let n_xi = self.basis.n_xi();
        let cols: Vec<DVector<f64>> = (0..n_xi)
            .into_par_iter()
            .map(|k| {
                let scale = self.basis.eigenvalues[k].sqrt();
                if scale == 0.0 {
                    return DVector::zeros(n_obs);
                }
                // dy/dxi_k over cells
                let v = self.basis.eigenfunctions.column(k) * scale;
                let mut rhs = DVector::zeros(self.grid.n_cells());
                for_each_face(self.grid, |face| match *face {
                    Face::Interior {
                        a: ca,
                        b: cb,
                        trans_geo,
                    } => {
                        let ta = trans[ca];
                        let tb = trans[cb];
                        let denom = (ta + tb) * (ta + tb);
                        // d harmonic / dT_a = 2 T_b^2 / (T_a+T_b)^2, dT/dy = T
                        let dc = trans_geo
                            * (2.0 * tb * tb / denom * ta * v[ca]
                                + 2.0 * ta * ta / denom * tb * v[cb]);
                        let du = u[ca] - u[cb];
                        rhs[ca] -= dc * du;
                        rhs[cb] += dc * du;
                    }
                    Face::Boundary {
                        cell,
                        edge,
                        trans_geo,
                        ..
                    } => {
                        if self.grid.edge_condition(edge) == EdgeCondition::Dirichlet {
                            let dc = trans[cell] * trans_geo * v[cell];
                            rhs[cell] -= dc * (u[cell] - self.bvp.value(edge));
                        }
                    }
                });
                let w = factor.solve(&rhs);
                DVector::from_iterator(
                    n_obs,
                    self.layout.head_cells.iter().map(|&c| w[c]),
                )
            })
            .collect();

        let mut jac = DMatrix::zeros(n_obs, n_xi);
        for (k, col) in cols.into_iter().enumerate() {
            jac.set_column(k, &col);
        }
        Ok((observe(&u, self.layout), jac))
    }
}
