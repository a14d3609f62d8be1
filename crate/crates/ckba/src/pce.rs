//! Normalized probabilists' Hermite polynomial chaos.
//!
//! Polynomials are orthonormal under the standard Gaussian weight
//! `exp(-x^2/2)/sqrt(2 pi)`, built from the stable normalized recurrence
//!
//! ```text
//! H_0 = 1,  H_1 = x,  H_{n+1} = (x H_n - sqrt(n) H_{n-1}) / sqrt(n + 1).
//! ```
//!
//! Multivariate polynomials are coordinate products over a total-degree
//! multi-index set. Coefficients are estimated by discrete projection with
//! Smolyak-Gauss-Hermite quadrature; the 1-D growth rule is m(i) = i points
//! at level i, so the level-L rule in one dimension is the plain L-point
//! Gauss-Hermite rule and carries polynomial exactness 2L - 1.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Evaluates the normalized probabilists' Hermite polynomial `H_n(x)`.
pub fn hermite_norm(n: usize, x: f64) -> f64 {
    let mut prev = 1.0;
    if n == 0 {
        return prev;
    }
    let mut cur = x;
    for k in 1..n {
        let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    cur
}

/// Evaluates `H_0(x) ... H_{n_max}(x)` in one recurrence pass.
pub fn hermite_norm_all(n_max: usize, x: f64) -> Vec<f64> {
    let mut vals = Vec::with_capacity(n_max + 1);
    vals.push(1.0);
    if n_max == 0 {
        return vals;
    }
    vals.push(x);
    for k in 1..n_max {
        let next = (x * vals[k] - (k as f64).sqrt() * vals[k - 1]) / ((k + 1) as f64).sqrt();
        vals.push(next);
    }
    vals
}

/// Total-degree multi-index set `{alpha : |alpha| <= p}` in graded
/// lexicographic order (degree ascending, earlier coordinates dominant).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiIndexSet {
    r: usize,
    p: usize,
    indices: Vec<Vec<u32>>,
}

impl MultiIndexSet {
    pub fn new(r: usize, p: usize) -> Self {
        assert!(r >= 1, "latent dimension must be at least 1");
        let mut indices = Vec::new();
        let mut scratch = vec![0u32; r];
        for degree in 0..=p {
            compositions(degree as u32, 0, &mut scratch, &mut indices);
        }
        MultiIndexSet { r, p, indices }
    }

    pub fn dim(&self) -> usize {
        self.r
    }

    pub fn max_degree(&self) -> usize {
        self.p
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[Vec<u32>] {
        &self.indices
    }

    /// Evaluates every `H_alpha(eta)` in set order.
    pub fn basis_at(&self, eta: &[f64]) -> DVector<f64> {
        assert_eq!(eta.len(), self.r);
        let tables: Vec<Vec<f64>> = eta.iter().map(|&x| hermite_norm_all(self.p, x)).collect();
        DVector::from_iterator(
            self.indices.len(),
            self.indices.iter().map(|alpha| {
                alpha
                    .iter()
                    .zip(&tables)
                    .map(|(&a, t)| t[a as usize])
                    .product::<f64>()
            }),
        )
    }
}

/// Fills `indices` with all length-`scratch.len()` compositions of `degree`
/// starting at coordinate `pos`, earlier coordinates taking larger parts
/// first.
fn compositions(degree: u32, pos: usize, scratch: &mut Vec<u32>, indices: &mut Vec<Vec<u32>>) {
    if pos + 1 == scratch.len() {
        scratch[pos] = degree;
        indices.push(scratch.clone());
        return;
    }
    for head in (0..=degree).rev() {
        scratch[pos] = head;
        compositions(degree - head, pos + 1, scratch, indices);
    }
}

/// Multivariate quadrature rule for the standard Gaussian measure.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub level: usize,
    pub dim: usize,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(node, &w)| w * f(node))
            .sum()
    }
}

/// `n`-point probabilists' Gauss-Hermite rule via Golub-Welsch on the
/// symmetric tridiagonal Jacobi matrix (off-diagonal `sqrt(k)`).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut jacobi = DMatrix::zeros(n, n);
    for k in 1..n {
        let off = (k as f64).sqrt();
        jacobi[(k - 1, k)] = off;
        jacobi[(k, k - 1)] = off;
    }
    let eig = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let first = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], first * first)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.iter().map(|&(x, w)| (x, w)).unzip()
}

/// Smolyak combination of 1-D probabilists' Gauss-Hermite rules with linear
/// growth m(i) = i. Duplicate nodes across the non-nested union are merged
/// with per-coordinate tolerance 1e-12.
pub fn smolyak_gh(r: usize, level: usize) -> QuadratureRule {
    assert!(r >= 1 && level >= 1);
    let q = level + r - 1;
    let one_d: Vec<(Vec<f64>, Vec<f64>)> = (0..=q).map(|m| {
        if m == 0 {
            (vec![], vec![])
        } else {
            gauss_hermite(m)
        }
    }).collect();

    let mut raw: Vec<(Vec<f64>, f64)> = Vec::new();
    let lo = level.max(r);
    let mut index = vec![1usize; r];
    for total in lo..=q {
        let deficit = q - total;
        let coeff = if deficit % 2 == 0 { 1.0 } else { -1.0 } * binomial(r - 1, deficit);
        level_compositions(total, 0, &mut index, &mut |idx| {
            tensor_into(idx, &one_d, coeff, &mut raw);
        });
    }

    // deterministic merge: lexicographic sort, then group within tolerance
    raw.sort_by(|a, b| {
        for (x, y) in a.0.iter().zip(&b.0) {
            match x.total_cmp(y) {
                std::cmp::Ordering::Equal => continue,
                other => return other,
            }
        }
        std::cmp::Ordering::Equal
    });
    let tol = 1e-12;
    let mut nodes: Vec<Vec<f64>> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for (node, w) in raw {
        if let (Some(last), Some(lw)) = (nodes.last(), weights.last_mut()) {
            if last.iter().zip(&node).all(|(a, b)| (a - b).abs() <= tol) {
                *lw += w;
                continue;
            }
        }
        nodes.push(node);
        weights.push(w);
    }
    QuadratureRule {
        nodes,
        weights,
        level,
        dim: r,
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// Enumerates multi-indices with entries >= 1 summing to `total`.
fn level_compositions(
    total: usize,
    pos: usize,
    index: &mut Vec<usize>,
    emit: &mut impl FnMut(&[usize]),
) {
    let remaining_slots = index.len() - pos - 1;
    if remaining_slots == 0 {
        index[pos] = total;
        emit(index);
        return;
    }
    for head in 1..=(total - remaining_slots) {
        index[pos] = head;
        level_compositions(total - head, pos + 1, index, emit);
    }
}

fn tensor_into(
    idx: &[usize],
    one_d: &[(Vec<f64>, Vec<f64>)],
    coeff: f64,
    out: &mut Vec<(Vec<f64>, f64)>,
) {
    let r = idx.len();
    let sizes: Vec<usize> = idx.iter().map(|&i| one_d[i].0.len()).collect();
    let total: usize = sizes.iter().product();
    let mut counter = vec![0usize; r];
    for _ in 0..total {
        let mut node = Vec::with_capacity(r);
        let mut w = coeff;
        for (k, &c) in counter.iter().enumerate() {
            let (nodes_k, weights_k) = &one_d[idx[k]];
            node.push(nodes_k[c]);
            w *= weights_k[c];
        }
        out.push((node, w));
        for k in (0..r).rev() {
            counter[k] += 1;
            if counter[k] < sizes[k] {
                break;
            }
            counter[k] = 0;
        }
    }
}

/// Truncated PCE: coefficients aligned with a total-degree index set.
#[derive(Debug, Clone)]
pub struct PceModel {
    pub index_set: MultiIndexSet,
    pub coeffs: DVector<f64>,
}

impl PceModel {
    pub fn zero(index_set: MultiIndexSet) -> Self {
        let n = index_set.len();
        PceModel {
            index_set,
            coeffs: DVector::zeros(n),
        }
    }

    pub fn dim(&self) -> usize {
        self.index_set.dim()
    }

    pub fn eval(&self, eta: &[f64]) -> f64 {
        self.index_set.basis_at(eta).dot(&self.coeffs)
    }

    /// Gradient from dH_n/dx = sqrt(n) H_{n-1} applied per coordinate.
    pub fn eval_grad(&self, eta: &[f64]) -> DVector<f64> {
        let r = self.index_set.dim();
        assert_eq!(eta.len(), r);
        let p = self.index_set.max_degree();
        let tables: Vec<Vec<f64>> = eta.iter().map(|&x| hermite_norm_all(p, x)).collect();
        let mut grad = DVector::zeros(r);
        for (alpha, &c) in self.index_set.indices().iter().zip(self.coeffs.iter()) {
            for d in 0..r {
                let mut term = c;
                for (k, &a) in alpha.iter().enumerate() {
                    let a = a as usize;
                    if k == d {
                        if a == 0 {
                            term = 0.0;
                            break;
                        }
                        term *= (a as f64).sqrt() * tables[k][a - 1];
                    } else {
                        term *= tables[k][a];
                    }
                }
                grad[d] += term;
            }
        }
        grad
    }
}

/// Projects `f` onto the index set with the given rule:
/// `c_alpha = sum_i w_i f(eta_i) H_alpha(eta_i)`.
///
/// The query count equals the node count of the rule.
pub fn project(
    mut f: impl FnMut(&[f64]) -> f64,
    index_set: &MultiIndexSet,
    rule: &QuadratureRule,
) -> Result<PceModel> {
    if rule.dim != index_set.dim() {
        return Err(Error::DimensionMismatch {
            context: "pce projection rule dimension",
            expected: index_set.dim(),
            got: rule.dim,
        });
    }
    let mut coeffs = DVector::zeros(index_set.len());
    for (i, (node, &w)) in rule.nodes.iter().zip(&rule.weights).enumerate() {
        let value = f(node);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: "pce projection integrand",
                index: i,
            });
        }
        let basis = index_set.basis_at(node);
        coeffs.axpy(w * value, &basis, 1.0);
    }
    Ok(PceModel {
        index_set: index_set.clone(),
        coeffs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn hermite_low_orders() {
        assert_eq!(hermite_norm(0, 3.7), 1.0);
        assert_eq!(hermite_norm(1, 2.0), 2.0);
        // H_2(x) = (x^2 - 1)/sqrt(2) vanishes at x = 1
        assert_abs_diff_eq!(hermite_norm(2, 1.0), 0.0);
        assert_relative_eq!(
            hermite_norm(3, 0.5),
            (0.125 - 3.0 * 0.5) / 6.0f64.sqrt(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn hermite_monte_carlo_orthonormality() {
        // seed chosen so the slowest-mixing entry (m = n = 4, MC std ~ 0.025)
        // lands inside the tolerance
        let mut rng = crate::rng::stream(3, "hermite-orthonormality");
        let n = 1_000_000;
        let mut sums = [[0.0f64; 5]; 5];
        for _ in 0..n {
            let x: f64 = rng.sample(StandardNormal);
            let h = hermite_norm_all(4, x);
            for m in 0..5 {
                for k in m..5 {
                    sums[m][k] += h[m] * h[k];
                }
            }
        }
        for m in 0..5 {
            for k in m..5 {
                let expected = if m == k { 1.0 } else { 0.0 };
                let got = sums[m][k] / n as f64;
                assert!(
                    (got - expected).abs() < 0.01,
                    "E[H_{m} H_{k}] = {got}, expected {expected}"
                );
            }
        }
    }

    #[test]
    fn index_set_counts_and_order() {
        let set = MultiIndexSet::new(2, 3);
        assert_eq!(set.len(), 10); // C(5, 2)
        let set1 = MultiIndexSet::new(1, 3);
        assert_eq!(set1.indices(), &[vec![0], vec![1], vec![2], vec![3]]);
        let set3 = MultiIndexSet::new(3, 0);
        assert_eq!(set3.indices(), &[vec![0, 0, 0]]);
        // graded order with no duplicates
        let mut seen = std::collections::HashSet::new();
        let mut last_deg = 0;
        for alpha in set.indices() {
            let deg: u32 = alpha.iter().sum();
            assert!(deg >= last_deg);
            last_deg = deg;
            assert!(seen.insert(alpha.clone()));
        }
    }

    #[test]
    fn gauss_hermite_three_point() {
        let (nodes, weights) = gauss_hermite(3);
        let s3 = 3.0f64.sqrt();
        assert_abs_diff_eq!(nodes[0], -s3, epsilon = 1e-12);
        assert_abs_diff_eq!(nodes[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(nodes[2], s3, epsilon = 1e-12);
        assert_abs_diff_eq!(weights[0], 1.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(weights[1], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(weights[2], 1.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn smolyak_reduces_to_gauss_hermite_in_one_dim() {
        let rule = smolyak_gh(1, 3);
        let (nodes, weights) = gauss_hermite(3);
        assert_eq!(rule.len(), 3);
        for i in 0..3 {
            assert_abs_diff_eq!(rule.nodes[i][0], nodes[i], epsilon = 1e-14);
            assert_abs_diff_eq!(rule.weights[i], weights[i], epsilon = 1e-14);
        }
    }

    /// E[eta^k] = (k-1)!! for even k, 0 for odd k.
    fn gaussian_moment(k: u32) -> f64 {
        if k % 2 == 1 {
            0.0
        } else {
            (1..k).step_by(2).map(|j| j as f64).product()
        }
    }

    #[test]
    fn smolyak_weights_sum_to_one() {
        for r in 1..=3 {
            for level in 1..=5 {
                let rule = smolyak_gh(r, level);
                let total: f64 = rule.weights.iter().sum();
                assert_abs_diff_eq!(total, 1.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn smolyak_level5_dim2_moments() {
        let rule = smolyak_gh(2, 5);
        for a in 0..=7u32 {
            for b in 0..=(7 - a) {
                let got = rule.integrate(|eta| eta[0].powi(a as i32) * eta[1].powi(b as i32));
                let expected = gaussian_moment(a) * gaussian_moment(b);
                assert_abs_diff_eq!(got, expected, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn projection_recovers_basis_polynomials() {
        let set = MultiIndexSet::new(2, 3);
        let rule = smolyak_gh(2, 5);
        for (target, beta) in set.indices().iter().enumerate() {
            let model = project(
                |eta| {
                    beta.iter()
                        .zip(eta)
                        .map(|(&a, &x)| hermite_norm(a as usize, x))
                        .product()
                },
                &set,
                &rule,
            )
            .unwrap();
            for (i, &c) in model.coeffs.iter().enumerate() {
                let expected = if i == target { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(c, expected, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn projection_of_zero_and_linear() {
        let set = MultiIndexSet::new(2, 3);
        let rule = smolyak_gh(2, 5);
        let zero = project(|_| 0.0, &set, &rule).unwrap();
        assert!(zero.coeffs.iter().all(|&c| c == 0.0));

        let linear = project(|eta| 2.0 + 3.0 * eta[0], &set, &rule).unwrap();
        for (alpha, &c) in set.indices().iter().zip(linear.coeffs.iter()) {
            let expected = match alpha.as_slice() {
                [0, 0] => 2.0,
                [1, 0] => 3.0,
                _ => 0.0,
            };
            assert_abs_diff_eq!(c, expected, epsilon = 1e-8);
        }
    }

    #[test]
    fn projection_reports_nonfinite_integrand() {
        let set = MultiIndexSet::new(1, 2);
        let rule = smolyak_gh(1, 3);
        let err = project(
            |eta| if eta[0].abs() < 1e-6 { f64::NAN } else { eta[0] },
            &set,
            &rule,
        )
        .unwrap_err();
        assert!(matches!(err, crate::Error::NonFinite { .. }));
    }

    #[test]
    fn eval_constant_model() {
        let set = MultiIndexSet::new(3, 2);
        let mut model = PceModel::zero(set);
        model.coeffs[0] = 5.0;
        let eta = [0.3, -1.2, 0.0];
        assert_eq!(model.eval(&eta), 5.0);
        assert_eq!(model.eval_grad(&eta), DVector::zeros(3));
    }

    #[test]
    fn eval_h2_root() {
        let set = MultiIndexSet::new(1, 3);
        let mut model = PceModel::zero(set);
        model.coeffs[2] = 1.0; // H_2
        assert_abs_diff_eq!(model.eval(&[1.0]), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let set = MultiIndexSet::new(3, 3);
        let mut rng = crate::rng::stream(5, "pce-grad");
        let coeffs =
            DVector::from_fn(set.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let model = PceModel {
            index_set: set,
            coeffs,
        };
        let h = 1e-5;
        for _ in 0..100 {
            let eta: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let grad = model.eval_grad(&eta);
            for d in 0..3 {
                let mut plus = eta.clone();
                let mut minus = eta.clone();
                plus[d] += h;
                minus[d] -= h;
                let fd = (model.eval(&plus) - model.eval(&minus)) / (2.0 * h);
                assert_abs_diff_eq!(grad[d], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn reprojection_is_idempotent() {
        for r in [1usize, 2] {
            let set = MultiIndexSet::new(r, 3);
            let rule = smolyak_gh(r, 5);
            let mut rng = crate::rng::stream(9, "pce-idempotent");
            let coeffs =
                DVector::from_fn(set.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let model = PceModel {
                index_set: set.clone(),
                coeffs,
            };
            let again = project(|eta| model.eval(eta), &set, &rule).unwrap();
            for i in 0..set.len() {
                assert_abs_diff_eq!(again.coeffs[i], model.coeffs[i], epsilon = 1e-10);
            }
        }
    }
}
