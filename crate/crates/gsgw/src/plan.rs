//! Monotone transport plans induced by sorting scalar scores.
//!
//! Given scores s in R^n and t in R^m with uniform weights, the induced plan
//! couples the k-th quantile block of sorted s with the overlapping quantile
//! blocks of sorted t. Writing P_s and P_t for the permutation matrices that
//! sort the scores, the plan factors as
//!
//!   pi = P_s' T P_t,
//!
//! where T is the coupling of the uniform histograms on n and m bins: its
//! (i, j) entry is the length of [i/n, (i+1)/n] intersect [j/m, (j+1)/m].
//! T is computed in integer arithmetic over the common denominator n*m, so
//! its marginals are exactly uniform and T equals (1/n) I when n = m.
//!
//! The sparse path produces the at most n+m-1 nonzero entries directly from
//! the two sorted orders in a single merge, so plan extraction costs
//! O(n log n + m log m) time and never materializes the dense matrix.

use crate::error::{GsgwError, Result};
use crate::measures::Coupling;
use crate::tensor::Tensor;

/// Result of a stable argsort: `order[r]` is the original index of the
/// element with rank `r`. Ties keep their original relative order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SortResult {
    order: Vec<usize>,
}

impl SortResult {
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Rank of each original index: the inverse permutation of `order`.
    pub fn ranks(&self) -> Vec<usize> {
        let mut ranks = vec![0; self.order.len()];
        for (rank, &idx) in self.order.iter().enumerate() {
            ranks[idx] = rank;
        }
        ranks
    }

    /// Dense permutation matrix with P[rank][index] = 1, so P v lists the
    /// values in sorted order.
    pub fn perm_matrix(&self) -> Tensor {
        let n = self.order.len();
        let mut p = Tensor::zeros(n, n);
        for (rank, &idx) in self.order.iter().enumerate() {
            p.set(rank, idx, 1.0);
        }
        p
    }
}

/// Stable argsort of finite values: ranks break ties by original index.
pub fn stable_argsort(values: &[f64]) -> Result<SortResult> {
    if values.is_empty() {
        return Err(GsgwError::invalid("cannot sort an empty value list"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(GsgwError::invalid("values contain NaN"));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    // Sorting by (value, index) is a total order, which makes the unstable
    // sort both deterministic and equivalent to a stable sort on values.
    order.sort_unstable_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .expect("NaN excluded above")
            .then(a.cmp(&b))
    });
    Ok(SortResult { order })
}

/// Coupling of uniform histograms with n and m bins, exact over the common
/// denominator n*m.
#[derive(Debug, Clone)]
pub struct MonotoneInterp {
    n: usize,
    m: usize,
    /// Overlap numerators over denominator n*m, row-major n x m.
    numerators: Vec<i64>,
}

impl MonotoneInterp {
    pub fn shape(&self) -> (usize, usize) {
        (self.n, self.m)
    }

    /// Overlap of bin i of the n-histogram and bin j of the m-histogram, in
    /// units of 1/(n*m).
    pub fn numerator(&self, i: usize, j: usize) -> i64 {
        self.numerators[i * self.m + j]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.numerator(i, j) as f64 / (self.n * self.m) as f64
    }

    pub fn to_tensor(&self) -> Tensor {
        let denom = (self.n * self.m) as f64;
        let data = self.numerators.iter().map(|&v| v as f64 / denom).collect();
        Tensor::from_vec(self.n, self.m, data).expect("consistent by construction")
    }
}

/// Build the histogram coupling T for n source bins and m target bins.
pub fn monotone_interp_matrix(n: usize, m: usize) -> Result<MonotoneInterp> {
    if n == 0 || m == 0 {
        return Err(GsgwError::invalid("histogram sizes must be positive"));
    }
    const LIMIT: usize = 1 << 26;
    if n.saturating_mul(m) > LIMIT {
        return Err(GsgwError::SizeGuard(format!(
            "dense {n}x{m} interpolation matrix; use the sparse plan path"
        )));
    }
    // Bin i of the n-histogram covers [i*m, (i+1)*m) in units of 1/(n*m);
    // bin j of the m-histogram covers [j*n, (j+1)*n).
    let mut numerators = vec![0i64; n * m];
    for i in 0..n {
        let (lo_i, hi_i) = ((i * m) as i64, ((i + 1) * m) as i64);
        // Only bins j overlapping [lo_i, hi_i) contribute; find the first.
        let mut j = (lo_i as usize) / n;
        while j < m {
            let (lo_j, hi_j) = ((j * n) as i64, ((j + 1) * n) as i64);
            if lo_j >= hi_i {
                break;
            }
            let overlap = hi_i.min(hi_j) - lo_i.max(lo_j);
            if overlap > 0 {
                numerators[i * m + j] = overlap;
            }
            j += 1;
        }
    }
    Ok(MonotoneInterp { n, m, numerators })
}

/// One nonzero entry of a sparse plan, in original (unsorted) indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanEntry {
    pub i: usize,
    pub j: usize,
    pub mass: f64,
}

/// Sparse monotone plan between uniform measures, at most n+m-1 entries.
#[derive(Debug, Clone)]
pub struct SparsePlan {
    n: usize,
    m: usize,
    entries: Vec<PlanEntry>,
}

impl SparsePlan {
    pub fn shape(&self) -> (usize, usize) {
        (self.n, self.m)
    }

    pub fn entries(&self) -> &[PlanEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_dense(&self) -> Tensor {
        let mut plan = Tensor::zeros(self.n, self.m);
        for e in &self.entries {
            plan.set(e.i, e.j, plan.get(e.i, e.j) + e.mass);
        }
        plan
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n];
        for e in &self.entries {
            sums[e.i] += e.mass;
        }
        sums
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.m];
        for e in &self.entries {
            sums[e.j] += e.mass;
        }
        sums
    }
}

fn check_scores(name: &str, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(GsgwError::invalid(format!("{name} scores are empty")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(GsgwError::invalid(format!(
            "{name} scores contain NaN or Inf"
        )));
    }
    Ok(())
}

/// Monotone plan induced by the scores, sparse form. Masses come from the
/// same integer overlap rule as [`monotone_interp_matrix`], merged along the
/// two sorted orders, so this is the scalable path for large n.
pub fn hard_plan_sparse(s: &[f64], t: &[f64]) -> Result<SparsePlan> {
    check_scores("source", s)?;
    check_scores("target", t)?;
    let n = s.len();
    let m = t.len();
    let order_s = stable_argsort(s)?;
    let order_t = stable_argsort(t)?;

    let denom = (n as i64).checked_mul(m as i64).ok_or_else(|| {
        GsgwError::SizeGuard("plan sizes overflow the integer mass grid".into())
    })? as f64;

    let mut entries = Vec::with_capacity(n + m - 1);
    let (mut k, mut l) = (0usize, 0usize);
    let mut pos: i64 = 0; // current boundary in units of 1/(n*m)
    while k < n && l < m {
        let end_k = ((k + 1) * m) as i64;
        let end_l = ((l + 1) * n) as i64;
        let end = end_k.min(end_l);
        let mass_num = end - pos;
        if mass_num > 0 {
            entries.push(PlanEntry {
                i: order_s.order()[k],
                j: order_t.order()[l],
                mass: mass_num as f64 / denom,
            });
        }
        pos = end;
        if end == end_k {
            k += 1;
        }
        if end == end_l {
            l += 1;
        }
    }
    Ok(SparsePlan { n, m, entries })
}

/// Dense monotone plan as a validated coupling with uniform marginals.
pub fn hard_plan(s: &[f64], t: &[f64]) -> Result<Coupling> {
    let sparse = hard_plan_sparse(s, t)?;
    Coupling::uniform(sparse.to_dense(), 1e-12)
}

/// Piecewise-linear interpolation through sorted (node, value) pairs,
/// constant beyond both ends.
#[derive(Debug, Clone)]
pub struct PiecewiseLinear {
    nodes: Vec<f64>,
    values: Vec<f64>,
}

impl PiecewiseLinear {
    fn new(mut pairs: Vec<(f64, f64)>) -> Self {
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("nodes are finite"));
        PiecewiseLinear {
            nodes: pairs.iter().map(|p| p.0).collect(),
            values: pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.nodes.len();
        if x <= self.nodes[0] {
            return self.values[0];
        }
        if x >= self.nodes[n - 1] {
            return self.values[n - 1];
        }
        let mut hi = self.nodes.partition_point(|&v| v < x);
        if self.nodes[hi] == x {
            return self.values[hi];
        }
        if hi == 0 {
            hi = 1;
        }
        let lo = hi - 1;
        let w = (x - self.nodes[lo]) / (self.nodes[hi] - self.nodes[lo]);
        self.values[lo] + w * (self.values[hi] - self.values[lo])
    }
}

/// A rearrangement map realizing a prescribed matching of two node sets.
///
/// When the node sets {x_i} and {y_j} are disjoint this is one
/// piecewise-linear function; when they collide, the required orderings can
/// be contradictory at shared nodes, so each side gets its own channel with
/// independent strictly increasing values. The induced plan only depends on
/// the node values, so both cases yield the same matching.
#[derive(Debug, Clone)]
pub struct XiMap {
    source: PiecewiseLinear,
    target: PiecewiseLinear,
    single_function: bool,
}

impl XiMap {
    /// Value channel applied to source nodes (and the primary map).
    pub fn eval(&self, x: f64) -> f64 {
        self.source.eval(x)
    }

    pub fn eval_target(&self, y: f64) -> f64 {
        self.target.eval(y)
    }

    /// Whether both channels are literally the same function.
    pub fn is_single_function(&self) -> bool {
        self.single_function
    }

    /// Pushforward scores for both node sets.
    pub fn apply(&self, x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (
            x.iter().map(|&v| self.eval(v)).collect(),
            y.iter().map(|&v| self.eval_target(v)).collect(),
        )
    }
}

/// Build a map xi whose node values are increasing along x and increasing
/// along y in the order prescribed by `sigma`, so the monotone plan between
/// xi(x) and xi(y) matches x_k with y_{sigma[k]}.
///
/// `x` must be strictly increasing; `sigma[k]` is the index of the y node
/// with rank k. Duplicate nodes within either set are rejected because a
/// strict ordering of equal nodes is impossible.
pub fn construct_xi(x: &[f64], sigma: &[usize], y: &[f64]) -> Result<XiMap> {
    let n = x.len();
    if n == 0 {
        return Err(GsgwError::invalid("empty node set"));
    }
    if y.len() != n || sigma.len() != n {
        return Err(GsgwError::shape(format!(
            "x, sigma, y lengths {n}, {}, {}",
            sigma.len(),
            y.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(GsgwError::invalid("nodes must be finite"));
    }
    if x.windows(2).any(|w| w[0] >= w[1]) {
        return Err(GsgwError::invalid(
            "x nodes must be strictly increasing; sort and dedup first",
        ));
    }
    let mut seen = vec![false; n];
    for &idx in sigma {
        if idx >= n || seen[idx] {
            return Err(GsgwError::invalid(format!(
                "sigma is not a permutation of 0..{n}"
            )));
        }
        seen[idx] = true;
    }
    {
        let mut sorted_y = y.to_vec();
        sorted_y.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        if sorted_y.windows(2).any(|w| w[0] == w[1]) {
            return Err(GsgwError::DegenerateInput(
                "duplicate y nodes; perturb before constructing xi".into(),
            ));
        }
    }

    // Ranks 1..n along the x chain, ranks k+1.5 along the y chain: distinct
    // values, each chain strictly increasing in its required order.
    let source_pairs: Vec<(f64, f64)> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| (v, (i + 1) as f64))
        .collect();
    let target_pairs: Vec<(f64, f64)> = sigma
        .iter()
        .enumerate()
        .map(|(rank, &idx)| (y[idx], (rank + 1) as f64 + 0.5))
        .collect();

    let collision = {
        let mut all: Vec<f64> = x.iter().chain(y.iter()).copied().collect();
        all.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        all.windows(2).any(|w| w[0] == w[1])
    };

    if collision {
        // Shared nodes would need two values at once; keep the chains in
        // separate channels instead.
        Ok(XiMap {
            source: PiecewiseLinear::new(source_pairs),
            target: PiecewiseLinear::new(target_pairs),
            single_function: false,
        })
    } else {
        let mut pairs = source_pairs;
        pairs.extend(target_pairs);
        let merged = PiecewiseLinear::new(pairs);
        Ok(XiMap {
            source: merged.clone(),
            target: merged,
            single_function: true,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn argsort_examples() {
        assert_eq!(stable_argsort(&[3.0, 1.0, 2.0]).unwrap().order(), &[1, 2, 0]);
        assert_eq!(stable_argsort(&[5.0, 5.0, 1.0]).unwrap().order(), &[2, 0, 1]);
    }

    #[test]
    fn argsort_rejects_nan_and_empty() {
        assert!(stable_argsort(&[]).is_err());
        assert!(stable_argsort(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn ranks_invert_order() {
        let sorted = stable_argsort(&[0.3, -1.0, 2.0, 0.1]).unwrap();
        let ranks = sorted.ranks();
        for (rank, &idx) in sorted.order().iter().enumerate() {
            assert_eq!(ranks[idx], rank);
        }
    }

    #[test]
    fn perm_matrix_sorts_values() {
        let values = vec![0.3, -1.0, 2.0, 0.1];
        let sorted = stable_argsort(&values).unwrap();
        let p = sorted.perm_matrix();
        let v = Tensor::column(&values);
        let pv = p.matmul(&v).unwrap();
        let mut expect = values.clone();
        expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(pv.data(), expect.as_slice());
    }

    #[test]
    fn interp_matrix_2_3_is_exact() {
        let t = monotone_interp_matrix(2, 3).unwrap().to_tensor();
        let expect = Tensor::from_rows(&[
            vec![1.0 / 3.0, 1.0 / 6.0, 0.0],
            vec![0.0, 1.0 / 6.0, 1.0 / 3.0],
        ])
        .unwrap();
        assert_eq!(t, expect, "entries must match the closed form bitwise");
    }

    #[test]
    fn interp_matrix_equal_sizes_is_scaled_identity() {
        for n in 1..8 {
            let t = monotone_interp_matrix(n, n).unwrap().to_tensor();
            assert_eq!(t, Tensor::identity(n).scale(1.0 / n as f64));
        }
    }

    #[test]
    fn interp_matrix_marginals_are_exactly_uniform_in_integers() {
        let mut rng = Rng::new(2);
        for _ in 0..50 {
            let n = 1 + rng.below(50);
            let m = 1 + rng.below(50);
            let t = monotone_interp_matrix(n, m).unwrap();
            for i in 0..n {
                let row: i64 = (0..m).map(|j| t.numerator(i, j)).sum();
                assert_eq!(row, m as i64, "row {i} of T({n},{m})");
            }
            for j in 0..m {
                let col: i64 = (0..n).map(|i| t.numerator(i, j)).sum();
                assert_eq!(col, n as i64, "col {j} of T({n},{m})");
            }
        }
    }

    #[test]
    fn hard_plan_matches_factored_form() {
        let mut rng = Rng::new(8);
        for _ in 0..20 {
            let n = 1 + rng.below(9);
            let m = 1 + rng.below(9);
            let s: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let t: Vec<f64> = (0..m).map(|_| rng.normal()).collect();

            let dense = hard_plan(&s, &t).unwrap();
            let ps = stable_argsort(&s).unwrap().perm_matrix();
            let pt = stable_argsort(&t).unwrap().perm_matrix();
            let tm = monotone_interp_matrix(n, m).unwrap().to_tensor();
            let factored = ps.transpose().matmul(&tm).unwrap().matmul(&pt).unwrap();
            assert!(
                dense.plan().max_abs_diff(&factored).unwrap() <= 1e-15,
                "sparse merge disagrees with P_s' T P_t for n={n}, m={m}"
            );
        }
    }

    #[test]
    fn hard_plan_example_two_three() {
        let pi = hard_plan(&[0.0, 1.0], &[0.0, 0.5, 1.0]).unwrap();
        let expect = monotone_interp_matrix(2, 3).unwrap().to_tensor();
        assert_eq!(pi.plan(), &expect);
    }

    #[test]
    fn hard_plan_equal_sizes_is_scaled_permutation() {
        let mut rng = Rng::new(12);
        for _ in 0..10 {
            let n = 2 + rng.below(8);
            let s: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let t: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let sparse = hard_plan_sparse(&s, &t).unwrap();
            assert_eq!(sparse.len(), n, "exactly n cells for n = m");
            for e in sparse.entries() {
                assert!((e.mass - 1.0 / n as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hard_plan_marginals_are_tight() {
        let mut rng = Rng::new(77);
        for _ in 0..100 {
            let n = 1 + rng.below(50);
            let m = 1 + rng.below(50);
            let s: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let t: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
            let pi = hard_plan(&s, &t).unwrap();
            assert!(
                pi.marginal_deviation() <= 1e-12,
                "deviation {} for ({n},{m})",
                pi.marginal_deviation()
            );
        }
    }

    #[test]
    fn hard_plan_handles_ties_deterministically() {
        let pi1 = hard_plan(&[1.0, 1.0, 0.0], &[2.0, 2.0, 1.0]).unwrap();
        let pi2 = hard_plan(&[1.0, 1.0, 0.0], &[2.0, 2.0, 1.0]).unwrap();
        assert_eq!(pi1.plan(), pi2.plan());
        // Stable ranks: index 0 precedes index 1 among the tied values, so
        // the tied sources map in index order.
        assert!((pi1.plan().get(2, 2) - 1.0 / 3.0).abs() < 1e-15);
        assert!((pi1.plan().get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((pi1.plan().get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn sparse_plan_rejects_bad_scores() {
        assert!(hard_plan_sparse(&[], &[1.0]).is_err());
        assert!(hard_plan_sparse(&[1.0], &[f64::INFINITY]).is_err());
    }

    #[test]
    fn xi_realizes_every_permutation_on_random_nodes() {
        fn permutations(n: usize) -> Vec<Vec<usize>> {
            if n == 1 {
                return vec![vec![0]];
            }
            let mut out = Vec::new();
            for p in permutations(n - 1) {
                for slot in 0..n {
                    let mut q = p.clone();
                    q.insert(slot, n - 1);
                    out.push(q);
                }
            }
            out
        }

        let mut rng = Rng::new(5);
        for n in 1..=5 {
            let perms = permutations(n);
            for _ in 0..4 {
                let mut x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
                x.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let y: Vec<f64> = (0..n).map(|_| 10.0 + rng.normal()).collect();
                for sigma in &perms {
                    let xi = construct_xi(&x, sigma, &y).unwrap();
                    let (s, t) = xi.apply(&x, &y);
                    // the x chain is strictly increasing under xi
                    assert!(s.windows(2).all(|w| w[0] < w[1]));
                    let pi = hard_plan(&s, &t).unwrap();
                    for (rank, &idx) in sigma.iter().enumerate() {
                        assert!(
                            (pi.plan().get(rank, idx) - 1.0 / n as f64).abs() < 1e-15,
                            "n={n} sigma={sigma:?} missing pair ({rank},{idx})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn xi_handles_shared_nodes_with_split_channels() {
        // x and y coincide; a cyclic sigma is impossible for one function
        // but fine with per-chain channels.
        let x = vec![0.0, 1.0, 2.0];
        let sigma = vec![1, 2, 0];
        let xi = construct_xi(&x, &sigma, &x).unwrap();
        assert!(!xi.is_single_function());
        let (s, t) = xi.apply(&x, &x);
        let pi = hard_plan(&s, &t).unwrap();
        for (rank, &idx) in sigma.iter().enumerate() {
            assert!((pi.plan().get(rank, idx) - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn xi_is_one_function_on_disjoint_nodes() {
        let x = vec![0.0, 1.0, 2.0];
        let y = vec![0.5, 1.5, 2.5];
        let xi = construct_xi(&x, &[2, 0, 1], &y).unwrap();
        assert!(xi.is_single_function());
        for (a, b) in [(0.25, 0.25), (1.75, 1.75)] {
            assert_eq!(xi.eval(a), xi.eval_target(b));
        }
    }

    #[test]
    fn xi_rejects_malformed_inputs() {
        assert!(construct_xi(&[1.0, 0.0], &[0, 1], &[2.0, 3.0]).is_err());
        assert!(construct_xi(&[0.0, 1.0], &[0, 0], &[2.0, 3.0]).is_err());
        match construct_xi(&[0.0, 1.0], &[0, 1], &[2.0, 2.0]) {
            Err(GsgwError::DegenerateInput(_)) => {}
            other => panic!("expected degenerate input, got {other:?}"),
        }
    }
}
