//! Discrete measures, cost matrices and Gromov-Wasserstein losses.
//!
//! The central quantity is the squared-difference Gromov-Wasserstein loss of
//! a coupling pi between two metric measure spaces given by cost matrices
//! C_X and C_Y:
//!
//!   L(pi) = sum_{i,i',j,j'} (C_X[i,i'] - C_Y[j,j'])^2 pi[i,j] pi[i',j']
//!
//! `gw_loss_naive` evaluates the quadruple sum literally and is kept as an
//! independent oracle for small instances. `gw_loss` expands the square and
//! evaluates the same number in quadratic time,
//!
//!   L(pi) = r' (C_X .^2) r + c' (C_Y .^2) c - 2 <C_X pi C_Y, pi>,
//!
//! where r and c are the row and column sums of pi. Because the expansion
//! uses the marginals of the coupling actually passed in, the two routes
//! agree for any nonnegative matrix, feasible or not.

use crate::autodiff::{Tape, Var};
use crate::error::{GsgwError, Result};
use crate::tensor::Tensor;

/// Points stored row-major: n points of fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    dim: usize,
    data: Vec<f64>,
}

impl PointCloud {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(GsgwError::invalid("point dimension must be positive"));
        }
        if data.is_empty() || data.len() % dim != 0 {
            return Err(GsgwError::shape(format!(
                "buffer of {} values is not a nonempty multiple of dim {dim}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(GsgwError::invalid("point coordinates must be finite"));
        }
        Ok(PointCloud { dim, data })
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(GsgwError::invalid("point cloud must be nonempty"));
        }
        let dim = points[0].len();
        if points.iter().any(|p| p.len() != dim) {
            return Err(GsgwError::shape("points have mixed dimensions"));
        }
        PointCloud::new(dim, points.iter().flatten().copied().collect())
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees at least one point
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.len(), self.dim, self.data.clone()).expect("consistent by invariant")
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// A point cloud with a probability vector over its points.
#[derive(Debug, Clone)]
pub struct DiscreteMeasure {
    support: PointCloud,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(support: PointCloud, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != support.len() {
            return Err(GsgwError::shape(format!(
                "{} weights for {} points",
                weights.len(),
                support.len()
            )));
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(GsgwError::invalid("weights must be finite and >= 0"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(GsgwError::invalid(format!(
                "weights must sum to 1, got {total}"
            )));
        }
        Ok(DiscreteMeasure { support, weights })
    }

    /// Uniform weights 1/n.
    pub fn uniform(support: PointCloud) -> Self {
        let n = support.len();
        DiscreteMeasure {
            support,
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn support(&self) -> &PointCloud {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// True when every weight equals 1/n to the given tolerance.
    pub fn is_uniform(&self, tol: f64) -> bool {
        let n = self.weights.len() as f64;
        self.weights.iter().all(|&w| (w - 1.0 / n).abs() <= tol)
    }
}

/// Whether cost entries are distances or squared distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostConvention {
    Distance,
    SquaredDistance,
}

/// Symmetric nonnegative intra-space cost matrix with zero diagonal.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    mat: Tensor,
    convention: CostConvention,
}

impl CostMatrix {
    pub fn new(mat: Tensor, convention: CostConvention) -> Result<Self> {
        let (n, m) = mat.shape();
        if n != m {
            return Err(GsgwError::shape(format!("cost matrix is {n}x{m}")));
        }
        for i in 0..n {
            if mat.get(i, i).abs() > 1e-12 {
                return Err(GsgwError::invalid(format!(
                    "diagonal entry ({i},{i}) = {} is not zero",
                    mat.get(i, i)
                )));
            }
            for j in (i + 1)..n {
                let (a, b) = (mat.get(i, j), mat.get(j, i));
                if !a.is_finite() || a < 0.0 {
                    return Err(GsgwError::invalid(format!(
                        "cost entry ({i},{j}) = {a} must be finite and >= 0"
                    )));
                }
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(GsgwError::invalid(format!(
                        "cost matrix is not symmetric at ({i},{j}): {a} vs {b}"
                    )));
                }
            }
        }
        Ok(CostMatrix { mat, convention })
    }

    pub fn n(&self) -> usize {
        self.mat.rows()
    }

    pub fn convention(&self) -> CostConvention {
        self.convention
    }

    pub fn tensor(&self) -> &Tensor {
        &self.mat
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.mat.get(i, j)
    }
}

/// Pairwise Euclidean costs of a cloud under the chosen convention.
pub fn build_cost_matrix(cloud: &PointCloud, convention: CostConvention) -> Result<CostMatrix> {
    let n = cloud.len();
    let mut mat = Tensor::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let sq: f64 = cloud
                .point(i)
                .iter()
                .zip(cloud.point(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let c = match convention {
                CostConvention::Distance => sq.sqrt(),
                CostConvention::SquaredDistance => sq,
            };
            mat.set(i, j, c);
            mat.set(j, i, c);
        }
    }
    CostMatrix::new(mat, convention)
}

/// Transport plan with its prescribed marginals.
#[derive(Debug, Clone)]
pub struct Coupling {
    plan: Tensor,
    row_marginal: Vec<f64>,
    col_marginal: Vec<f64>,
}

impl Coupling {
    /// Validates nonnegativity and that the plan's marginals match the
    /// prescribed ones within `tol`. Entries in (-1e-15, 0) are clamped to
    /// zero; anything more negative is rejected.
    pub fn new(mut plan: Tensor, a: Vec<f64>, b: Vec<f64>, tol: f64) -> Result<Self> {
        let (n, m) = plan.shape();
        if a.len() != n || b.len() != m {
            return Err(GsgwError::shape(format!(
                "plan {n}x{m} with marginals of length {} and {}",
                a.len(),
                b.len()
            )));
        }
        for v in plan.data_mut() {
            if !v.is_finite() {
                return Err(GsgwError::numeric("plan contains a non-finite entry"));
            }
            if *v < 0.0 {
                if *v > -1e-15 {
                    *v = 0.0;
                } else {
                    return Err(GsgwError::numeric(format!(
                        "plan entry {v} is negative beyond roundoff"
                    )));
                }
            }
        }
        let rows = plan.row_sums();
        let cols = plan.col_sums();
        let row_dev = rows
            .iter()
            .zip(&a)
            .fold(0.0f64, |d, (s, t)| d.max((s - t).abs()));
        let col_dev = cols
            .iter()
            .zip(&b)
            .fold(0.0f64, |d, (s, t)| d.max((s - t).abs()));
        if row_dev > tol || col_dev > tol {
            return Err(GsgwError::invalid(format!(
                "marginal deviation {:.3e} exceeds tolerance {tol:.3e}",
                row_dev.max(col_dev)
            )));
        }
        Ok(Coupling {
            plan,
            row_marginal: a,
            col_marginal: b,
        })
    }

    /// Uniform-marginal coupling: 1/n rows, 1/m columns.
    pub fn uniform(plan: Tensor, tol: f64) -> Result<Self> {
        let (n, m) = plan.shape();
        let a = vec![1.0 / n as f64; n];
        let b = vec![1.0 / m as f64; m];
        Coupling::new(plan, a, b, tol)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.plan.shape()
    }

    pub fn plan(&self) -> &Tensor {
        &self.plan
    }

    pub fn row_marginal(&self) -> &[f64] {
        &self.row_marginal
    }

    pub fn col_marginal(&self) -> &[f64] {
        &self.col_marginal
    }

    /// Worst absolute deviation of the plan's sums from its marginals.
    pub fn marginal_deviation(&self) -> f64 {
        let rows = self.plan.row_sums();
        let cols = self.plan.col_sums();
        let r = rows
            .iter()
            .zip(&self.row_marginal)
            .fold(0.0f64, |d, (s, t)| d.max((s - t).abs()));
        let c = cols
            .iter()
            .zip(&self.col_marginal)
            .fold(0.0f64, |d, (s, t)| d.max((s - t).abs()));
        r.max(c)
    }

    pub fn transposed(&self) -> Coupling {
        Coupling {
            plan: self.plan.transpose(),
            row_marginal: self.col_marginal.clone(),
            col_marginal: self.row_marginal.clone(),
        }
    }
}

fn check_gw_shapes(cx: &CostMatrix, cy: &CostMatrix, pi: &Coupling) -> Result<()> {
    let (n, m) = pi.shape();
    if cx.n() != n || cy.n() != m {
        return Err(GsgwError::shape(format!(
            "plan {n}x{m} with costs {}x{} and {}x{}",
            cx.n(),
            cx.n(),
            cy.n(),
            cy.n()
        )));
    }
    Ok(())
}

/// Upper bound on plan sizes for the literal quadruple sum.
pub const NAIVE_GW_CELL_LIMIT: usize = 200;

/// Literal quadruple-sum evaluation, O((nm)^2). Guarded to n*m <= 200;
/// kept as an independent check of `gw_loss`.
pub fn gw_loss_naive(cx: &CostMatrix, cy: &CostMatrix, pi: &Coupling) -> Result<f64> {
    check_gw_shapes(cx, cy, pi)?;
    let (n, m) = pi.shape();
    if n * m > NAIVE_GW_CELL_LIMIT {
        return Err(GsgwError::SizeGuard(format!(
            "quadruple sum over {n}x{m} plan exceeds {NAIVE_GW_CELL_LIMIT} cells"
        )));
    }
    let p = pi.plan();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let w = p.get(i, j);
            if w == 0.0 {
                continue;
            }
            for i2 in 0..n {
                for j2 in 0..m {
                    let d = cx.get(i, i2) - cy.get(j, j2);
                    total += d * d * w * p.get(i2, j2);
                }
            }
        }
    }
    Ok(total)
}

/// Quadratic-time GW loss via the expanded square. Agrees with
/// `gw_loss_naive` for any nonnegative plan because the marginal terms use
/// the row/column sums of the plan itself.
pub fn gw_loss(cx: &CostMatrix, cy: &CostMatrix, pi: &Coupling) -> Result<f64> {
    check_gw_shapes(cx, cy, pi)?;
    let p = pi.plan();
    let r = p.row_sums();
    let c = p.col_sums();

    let mut term_x = 0.0;
    for i in 0..cx.n() {
        for i2 in 0..cx.n() {
            let v = cx.get(i, i2);
            term_x += v * v * r[i] * r[i2];
        }
    }
    let mut term_y = 0.0;
    for j in 0..cy.n() {
        for j2 in 0..cy.n() {
            let v = cy.get(j, j2);
            term_y += v * v * c[j] * c[j2];
        }
    }
    let cross = cx.tensor().matmul(p)?.matmul(cy.tensor())?;
    let inner: f64 = cross
        .data()
        .iter()
        .zip(p.data())
        .map(|(&a, &b)| a * b)
        .sum();

    let loss = term_x + term_y - 2.0 * inner;
    if !loss.is_finite() {
        return Err(GsgwError::numeric("GW loss is not finite"));
    }
    // The expansion can dip a hair below zero from cancellation; anything
    // clearly negative means corrupted inputs.
    if loss < -1e-10 {
        return Err(GsgwError::numeric(format!(
            "GW loss {loss} is negative beyond roundoff"
        )));
    }
    Ok(loss.max(0.0))
}

/// Gradient of the GW loss with respect to every plan entry:
///
///   G[i,j] = 2 (C_X.^2 r)[i] + 2 (C_Y.^2 c)[j] - 4 (C_X pi C_Y)[i,j]
///
/// with r, c the row/column sums of pi. Matches central finite differences
/// of `gw_loss` because both treat the plan as a free nonnegative matrix.
pub fn gw_loss_grad_pi(cx: &CostMatrix, cy: &CostMatrix, pi: &Coupling) -> Result<Tensor> {
    check_gw_shapes(cx, cy, pi)?;
    let (n, m) = pi.shape();
    let p = pi.plan();
    let r = p.row_sums();
    let c = p.col_sums();

    let cx2r: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|i2| cx.get(i, i2).powi(2) * r[i2]).sum())
        .collect();
    let cy2c: Vec<f64> = (0..m)
        .map(|j| (0..m).map(|j2| cy.get(j, j2).powi(2) * c[j2]).sum())
        .collect();
    let cross = cx.tensor().matmul(p)?.matmul(cy.tensor())?;

    let mut grad = Tensor::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            grad.set(i, j, 2.0 * cx2r[i] + 2.0 * cy2c[j] - 4.0 * cross.get(i, j));
        }
    }
    Ok(grad)
}

/// Fused GW loss: (1 - lambda) * GW + lambda * sum_ij |fx_i - fy_j|^2 pi_ij.
/// Feature rows must share a dimension; lambda must lie in [0, 1].
pub fn fgw_loss(
    cx: &CostMatrix,
    cy: &CostMatrix,
    pi: &Coupling,
    feat_x: &Tensor,
    feat_y: &Tensor,
    lambda: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(GsgwError::invalid(format!(
            "lambda {lambda} outside [0, 1]"
        )));
    }
    check_gw_shapes(cx, cy, pi)?;
    let (n, m) = pi.shape();
    if feat_x.rows() != n || feat_y.rows() != m || feat_x.cols() != feat_y.cols() {
        return Err(GsgwError::shape(format!(
            "features {}x{} and {}x{} for a {n}x{m} plan",
            feat_x.rows(),
            feat_x.cols(),
            feat_y.rows(),
            feat_y.cols()
        )));
    }
    let structure = gw_loss(cx, cy, pi)?;
    let mut feature = 0.0;
    for i in 0..n {
        for j in 0..m {
            let w = pi.plan().get(i, j);
            if w == 0.0 {
                continue;
            }
            let d2: f64 = feat_x
                .row(i)
                .iter()
                .zip(feat_y.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            feature += d2 * w;
        }
    }
    Ok((1.0 - lambda) * structure + lambda * feature)
}

/// Squared-distance matrix between feature rows, used by the fused loss on
/// the differentiable path where it enters as a constant.
pub fn feature_cost_matrix(feat_x: &Tensor, feat_y: &Tensor) -> Result<Tensor> {
    if feat_x.cols() != feat_y.cols() {
        return Err(GsgwError::shape(format!(
            "feature dims {} vs {}",
            feat_x.cols(),
            feat_y.cols()
        )));
    }
    let (n, m) = (feat_x.rows(), feat_y.rows());
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let d2: f64 = feat_x
                .row(i)
                .iter()
                .zip(feat_y.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            out.set(i, j, d2);
        }
    }
    Ok(out)
}

/// Tape twin of [`gw_loss`]: builds the expanded-square loss as a graph so
/// gradients flow into the plan node. Cost matrices enter as constants.
pub fn gw_loss_graph(tape: &mut Tape, cx: &CostMatrix, cy: &CostMatrix, pi: Var) -> Result<Var> {
    let (n, m) = tape.value(pi).shape();
    if cx.n() != n || cy.n() != m {
        return Err(GsgwError::shape(format!(
            "plan {n}x{m} with costs {}x{} and {}x{}",
            cx.n(),
            cx.n(),
            cy.n(),
            cy.n()
        )));
    }
    let cx2 = tape.constant(cx.tensor().map(|v| v * v));
    let cy2 = tape.constant(cy.tensor().map(|v| v * v));
    let cx_c = tape.constant(cx.tensor().clone());
    let cy_c = tape.constant(cy.tensor().clone());
    let ones_m = tape.constant(Tensor::filled(m, 1, 1.0));
    let ones_n = tape.constant(Tensor::filled(n, 1, 1.0));

    let r = tape.matmul(pi, ones_m)?; // n x 1
    let pit = tape.transpose(pi)?;
    let c = tape.matmul(pit, ones_n)?; // m x 1

    let rt = tape.transpose(r)?;
    let rx = tape.matmul(rt, cx2)?;
    let term_x = tape.matmul(rx, r)?; // 1x1

    let ct = tape.transpose(c)?;
    let cyc = tape.matmul(ct, cy2)?;
    let term_y = tape.matmul(cyc, c)?; // 1x1

    let left = tape.matmul(cx_c, pi)?;
    let cross = tape.matmul(left, cy_c)?;
    let prod = tape.hadamard(cross, pi)?;
    let inner = tape.sum(prod)?;

    let marginal_terms = tape.add(term_x, term_y)?;
    let neg = tape.scalar_mul(inner, -2.0)?;
    tape.add(marginal_terms, neg)
}

/// Tape twin of [`fgw_loss`] with the feature cost entering as a constant.
pub fn fgw_loss_graph(
    tape: &mut Tape,
    cx: &CostMatrix,
    cy: &CostMatrix,
    pi: Var,
    feature_cost: &Tensor,
    lambda: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(GsgwError::invalid(format!(
            "lambda {lambda} outside [0, 1]"
        )));
    }
    if feature_cost.shape() != tape.value(pi).shape() {
        return Err(GsgwError::shape(
            "feature cost shape differs from plan shape",
        ));
    }
    let structure = gw_loss_graph(tape, cx, cy, pi)?;
    let fc = tape.constant(feature_cost.clone());
    let weighted = tape.hadamard(fc, pi)?;
    let feature = tape.sum(weighted)?;
    let s_part = tape.scalar_mul(structure, 1.0 - lambda)?;
    let f_part = tape.scalar_mul(feature, lambda)?;
    tape.add(s_part, f_part)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn cost2(entries: [[f64; 2]; 2]) -> CostMatrix {
        let mat = Tensor::from_rows(&[entries[0].to_vec(), entries[1].to_vec()]).unwrap();
        CostMatrix::new(mat, CostConvention::Distance).unwrap()
    }

    fn random_cost(rng: &mut Rng, n: usize) -> CostMatrix {
        let mut mat = Tensor::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = rng.uniform() * 3.0;
                mat.set(i, j, v);
                mat.set(j, i, v);
            }
        }
        CostMatrix::new(mat, CostConvention::Distance).unwrap()
    }

    fn random_plan(rng: &mut Rng, n: usize, m: usize) -> Coupling {
        // Any nonnegative matrix is a valid argument for the loss; use its
        // own marginals so validation passes.
        let mut plan = Tensor::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                plan.set(i, j, rng.uniform() / (n * m) as f64);
            }
        }
        let a = plan.row_sums();
        let b = plan.col_sums();
        Coupling::new(plan, a, b, 1e-12).unwrap()
    }

    #[test]
    fn two_point_example_matches_hand_value() {
        let cx = cost2([[0.0, 1.0], [1.0, 0.0]]);
        let cy = cost2([[0.0, 2.0], [2.0, 0.0]]);
        let diag = Coupling::uniform(
            Tensor::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap(),
            1e-12,
        )
        .unwrap();
        let anti = Coupling::uniform(
            Tensor::from_rows(&[vec![0.0, 0.5], vec![0.5, 0.0]]).unwrap(),
            1e-12,
        )
        .unwrap();
        assert!((gw_loss(&cx, &cy, &diag).unwrap() - 0.5).abs() < 1e-15);
        assert!((gw_loss(&cx, &cy, &anti).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identical_spaces_have_zero_loss_on_identity_plan() {
        let mut rng = Rng::new(5);
        let cx = random_cost(&mut rng, 6);
        let plan = Tensor::identity(6).scale(1.0 / 6.0);
        let pi = Coupling::uniform(plan, 1e-12).unwrap();
        let loss = gw_loss(&cx, &cx, &pi).unwrap();
        assert!(loss.abs() < 1e-12, "self loss {loss}");
    }

    #[test]
    fn decomposition_agrees_with_quadruple_sum() {
        let mut rng = Rng::new(42);
        for trial in 0..20 {
            let n = 2 + rng.below(4);
            let m = 2 + rng.below(4);
            let cx = random_cost(&mut rng, n);
            let cy = random_cost(&mut rng, m);
            let pi = random_plan(&mut rng, n, m);
            let fast = gw_loss(&cx, &cy, &pi).unwrap();
            let slow = gw_loss_naive(&cx, &cy, &pi).unwrap();
            assert!(
                (fast - slow).abs() <= 1e-10 * (1.0 + slow.abs()),
                "trial {trial}: fast {fast} vs naive {slow}"
            );
        }
    }

    #[test]
    fn naive_route_is_size_guarded() {
        let mut rng = Rng::new(1);
        let cx = random_cost(&mut rng, 20);
        let cy = random_cost(&mut rng, 20);
        let pi = random_plan(&mut rng, 20, 20);
        match gw_loss_naive(&cx, &cy, &pi) {
            Err(GsgwError::SizeGuard(_)) => {}
            other => panic!("expected size guard, got {other:?}"),
        }
    }

    #[test]
    fn loss_is_invariant_under_simultaneous_permutation() {
        let mut rng = Rng::new(9);
        let n = 5;
        let m = 4;
        let cx = random_cost(&mut rng, n);
        let cy = random_cost(&mut rng, m);
        let pi = random_plan(&mut rng, n, m);
        let base = gw_loss(&cx, &cy, &pi).unwrap();

        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let mut cx_p = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                cx_p.set(i, j, cx.get(perm[i], perm[j]));
            }
        }
        let mut plan_p = Tensor::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                plan_p.set(i, j, pi.plan().get(perm[i], j));
            }
        }
        let cx_p = CostMatrix::new(cx_p, CostConvention::Distance).unwrap();
        let a: Vec<f64> = perm.iter().map(|&i| pi.row_marginal()[i]).collect();
        let pi_p = Coupling::new(plan_p, a, pi.col_marginal().to_vec(), 1e-12).unwrap();
        let permuted = gw_loss(&cx_p, &cy, &pi_p).unwrap();
        assert!(
            (base - permuted).abs() <= 1e-12 * (1.0 + base.abs()),
            "permutation changed loss: {base} vs {permuted}"
        );
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = Rng::new(17);
        for &(n, m) in &[(2usize, 2usize), (3, 4), (5, 5)] {
            let cx = random_cost(&mut rng, n);
            let cy = random_cost(&mut rng, m);
            let pi = random_plan(&mut rng, n, m);
            let grad = gw_loss_grad_pi(&cx, &cy, &pi).unwrap();

            let h = 1e-6;
            for i in 0..n {
                for j in 0..m {
                    let eval = |delta: f64| {
                        let mut p = pi.plan().clone();
                        p.set(i, j, p.get(i, j) + delta);
                        let a = p.row_sums();
                        let b = p.col_sums();
                        let c = Coupling::new(p, a, b, 1e-9).unwrap();
                        gw_loss(&cx, &cy, &c).unwrap()
                    };
                    let central = (eval(h) - eval(-h)) / (2.0 * h);
                    let rel = (grad.get(i, j) - central).abs() / (1e-8 + central.abs());
                    assert!(
                        rel <= 1e-4,
                        "({n},{m}) entry ({i},{j}): analytic {} vs fd {central}",
                        grad.get(i, j)
                    );
                }
            }
        }
    }

    #[test]
    fn graph_loss_matches_plain_loss_and_gradient() {
        let mut rng = Rng::new(23);
        let cx = random_cost(&mut rng, 4);
        let cy = random_cost(&mut rng, 3);
        let pi = random_plan(&mut rng, 4, 3);

        let mut tape = Tape::new();
        let p = tape.leaf(pi.plan().clone(), true);
        let loss = gw_loss_graph(&mut tape, &cx, &cy, p).unwrap();
        let value = tape.value(loss).scalar_value().unwrap();
        let plain = gw_loss(&cx, &cy, &pi).unwrap();
        assert!((value - plain).abs() <= 1e-12 * (1.0 + plain.abs()));

        let grads = tape.backward(loss).unwrap();
        let g_tape = grads.get(p).unwrap();
        let g_plain = gw_loss_grad_pi(&cx, &cy, &pi).unwrap();
        assert!(g_tape.max_abs_diff(&g_plain).unwrap() <= 1e-10);
    }

    #[test]
    fn fused_loss_two_point_example() {
        let cx = cost2([[0.0, 1.0], [1.0, 0.0]]);
        let cy = cost2([[0.0, 2.0], [2.0, 0.0]]);
        let pi = Coupling::uniform(
            Tensor::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap(),
            1e-12,
        )
        .unwrap();
        let feat = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let fused = fgw_loss(&cx, &cy, &pi, &feat, &feat, 0.5).unwrap();
        assert!((fused - 0.25).abs() < 1e-15, "fused {fused}");
    }

    #[test]
    fn fused_loss_interpolates_between_terms() {
        let mut rng = Rng::new(31);
        let cx = random_cost(&mut rng, 4);
        let cy = random_cost(&mut rng, 4);
        let pi = random_plan(&mut rng, 4, 4);
        let fx = Tensor::from_vec(4, 2, (0..8).map(|_| rng.normal()).collect()).unwrap();
        let fy = Tensor::from_vec(4, 2, (0..8).map(|_| rng.normal()).collect()).unwrap();

        let at = |l: f64| fgw_loss(&cx, &cy, &pi, &fx, &fy, l).unwrap();
        let gw_only = at(0.0);
        let feat_only = at(1.0);
        let mid = at(0.5);
        assert!((gw_only - gw_loss(&cx, &cy, &pi).unwrap()).abs() < 1e-14);
        assert!((mid - 0.5 * (gw_only + feat_only)).abs() < 1e-12);
        assert!(fgw_loss(&cx, &cy, &pi, &fx, &fy, 1.5).is_err());
    }

    #[test]
    fn cost_matrix_validation_rejects_bad_inputs() {
        // Asymmetric.
        let bad = Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.0]]).unwrap();
        assert!(CostMatrix::new(bad, CostConvention::Distance).is_err());
        // Nonzero diagonal.
        let bad = Tensor::from_rows(&[vec![0.5, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(CostMatrix::new(bad, CostConvention::Distance).is_err());
        // Negative entry.
        let bad = Tensor::from_rows(&[vec![0.0, -1.0], vec![-1.0, 0.0]]).unwrap();
        assert!(CostMatrix::new(bad, CostConvention::Distance).is_err());
    }

    #[test]
    fn coupling_validation_checks_marginals_and_sign() {
        let plan = Tensor::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.25]]).unwrap();
        assert!(Coupling::uniform(plan, 1e-9).is_err());
        let plan = Tensor::from_rows(&[vec![0.5, 0.0], vec![-0.2, 0.5]]).unwrap();
        assert!(Coupling::uniform(plan, 1.0).is_err());
    }

    #[test]
    fn build_cost_matrix_honors_convention() {
        let cloud = PointCloud::from_points(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        let dist = build_cost_matrix(&cloud, CostConvention::Distance).unwrap();
        let sq = build_cost_matrix(&cloud, CostConvention::SquaredDistance).unwrap();
        assert!((dist.get(0, 1) - 5.0).abs() < 1e-15);
        assert!((sq.get(0, 1) - 25.0).abs() < 1e-15);
    }
}
