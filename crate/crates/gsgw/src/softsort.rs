//! Differentiable relaxation of sorting and of the monotone plan.
//!
//! Sorting is relaxed in two stages at temperature tau. First, pairwise
//! sigmoid comparisons give fractional ranks
//!
//!   r_i = sum_{k != i} sigmoid((v_i - v_k) / tau),
//!
//! then each score receives a distribution over rank slots,
//!
//!   P[j][i] = softmax_j( -((r_i - j) / (n-1))^2 / tau ),
//!
//! which concentrates on the stable-argsort permutation matrix as tau -> 0.
//! Rank distances are measured in units of the full rank range so that a
//! given tau means the same amount of smoothing at every n; without this the
//! slot kernel's dynamic range grows like exp(n^2/tau) and the
//! renormalization below stops converging for n beyond a dozen.
//! The slot softmax makes columns sum to one; alternating column/row
//! renormalization rounds then push the matrix toward double stochasticity,
//! iterated until both marginals are tight (or progress stalls, which only
//! happens for degenerate ties), ending on a row pass so row sums are exact
//! to roundoff.
//!
//! A soft monotone plan between score vectors s and t is then
//!
//!   pi_tau = P_s' T P_t
//!
//! with T the exact histogram coupling from [`crate::plan`]. Everything here
//! is recorded on a [`Tape`], so gradients flow through both the comparisons
//! and the slot assignment; the plain wrappers just evaluate and discard the
//! tape.
//!
//! Marginals are uniform to well below 1e-6 for tie-free scores at
//! temperatures of 0.1 and above (and again in the near-hard limit, where
//! the matrix starts out a permutation). In the cold-but-not-hard band
//! between, and with exact ties, the balancing stalls early: values and
//! gradients stay finite, but feasibility-sensitive callers should perturb
//! ties away first.

use crate::autodiff::{Tape, Var};
use crate::error::{GsgwError, Result};
use crate::measures::Coupling;
use crate::plan::monotone_interp_matrix;
use crate::tensor::Tensor;

/// Marginal deviation targeted by the renormalization rounds. Kept well
/// below the 1e-6 feasibility contract so that the number of rounds (a
/// discontinuous function of the inputs) cannot disturb finite-difference
/// gradient checks.
pub const BALANCE_TOL: f64 = 1e-12;

/// Hard cap on renormalization rounds; sized with slack over the worst
/// observed requirement (144 rounds at tau = 0.1, n = 50).
pub const MAX_BALANCE_ROUNDS: usize = 400;

/// Guard added to denominators so degenerate all-zero rows or columns scale
/// to zero instead of dividing by zero.
const BALANCE_EPS: f64 = 1e-30;

/// Loose feasibility bound used when wrapping a soft plan as a coupling.
/// Generic (tie-free) scores stay within 1e-6; this catches corruption
/// without rejecting legitimately degenerate inputs outright.
const SOFT_PLAN_VALIDATION_TOL: f64 = 0.5;

/// Smallest supported temperature.
pub const MIN_TAU: f64 = 1e-9;

/// Doubly-stochastic relaxation of a permutation matrix at temperature tau,
/// laid out like [`crate::plan::SortResult::perm_matrix`]: entry [rank][index].
#[derive(Debug, Clone)]
pub struct SoftPermutation {
    matrix: Tensor,
    tau: f64,
}

impl SoftPermutation {
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn n(&self) -> usize {
        self.matrix.rows()
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !tau.is_finite() || tau < MIN_TAU {
        return Err(GsgwError::invalid(format!(
            "temperature {tau} must be finite and >= {MIN_TAU}"
        )));
    }
    Ok(())
}

/// Record the soft permutation of a column of scores on the tape.
/// `scores` must be an n x 1 node; the result is n x n.
pub fn soft_perm_graph(tape: &mut Tape, scores: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let (n, cols) = tape.value(scores).shape();
    if cols != 1 {
        return Err(GsgwError::shape(format!(
            "scores must be a column vector, got {n}x{cols}"
        )));
    }
    let ones_row = tape.constant(Tensor::filled(1, n, 1.0));
    let ones_col = tape.constant(Tensor::filled(n, 1, 1.0));

    // Fractional ranks from pairwise comparisons. The self comparison
    // contributes sigmoid(0) = 1/2, removed by the constant shift.
    let v_cols = tape.matmul(scores, ones_row)?; // [i][k] = v_i
    let v_rows = tape.transpose(v_cols)?; // [i][k] = v_k
    let diffs = tape.sub(v_cols, v_rows)?;
    let scaled = tape.scalar_mul(diffs, 1.0 / tau)?;
    let comparisons = tape.sigmoid(scaled)?;
    let rank_sums = tape.matmul(comparisons, ones_col)?;
    let half = tape.constant(Tensor::filled(n, 1, 0.5));
    let ranks = tape.sub(rank_sums, half)?; // n x 1, values in [0, n-1]

    // Slot assignment: row j of the grid holds the integer rank j. Distances
    // are taken relative to the full rank range so tau is scale-free in n.
    let ranks_row = tape.transpose(ranks)?;
    let rank_grid = tape.matmul(ones_col, ranks_row)?; // [j][i] = r_i
    let mut slots = Tensor::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            slots.set(j, i, j as f64);
        }
    }
    let slot_grid = tape.constant(slots);
    let offsets = tape.sub(rank_grid, slot_grid)?;
    let sq = tape.square(offsets)?;
    let range_sq = if n > 1 { ((n - 1) * (n - 1)) as f64 } else { 1.0 };
    let logits = tape.scalar_mul(sq, -1.0 / (tau * range_sq))?;
    // softmax over slots j for each score i = row softmax of the transpose
    let logits_t = tape.transpose(logits)?;
    let softmax_t = tape.row_softmax(logits_t)?;
    let mut p = tape.transpose(softmax_t)?; // columns sum to one

    // Iterate until both marginals are tight. Exactly tied scores leave some
    // rows permanently starved; each extra round then multiplies their
    // adjoints by 1/BALANCE_EPS, so the loop must bail out as soon as the
    // deviation stops shrinking instead of running a fixed large count.
    let mut last_dev = f64::INFINITY;
    for _ in 0..MAX_BALANCE_ROUNDS {
        // Column pass.
        let pt = tape.transpose(p)?;
        let col_sums = tape.matmul(pt, ones_col)?;
        let guard = tape.constant(Tensor::filled(n, 1, BALANCE_EPS));
        let guarded = tape.add(col_sums, guard)?;
        let inv = tape.recip(guarded)?;
        let inv_row = tape.transpose(inv)?;
        let col_scale = tape.matmul(ones_col, inv_row)?;
        p = tape.hadamard(p, col_scale)?;
        // Row pass.
        let row_sums = tape.matmul(p, ones_col)?;
        let guard = tape.constant(Tensor::filled(n, 1, BALANCE_EPS));
        let guarded = tape.add(row_sums, guard)?;
        let inv = tape.recip(guarded)?;
        let row_scale = tape.matmul(inv, ones_row)?;
        p = tape.hadamard(p, row_scale)?;

        let value = tape.value(p);
        let row_dev = value
            .row_sums()
            .iter()
            .fold(0.0f64, |acc, r| acc.max((r - 1.0).abs()));
        let col_dev = value
            .col_sums()
            .iter()
            .fold(0.0f64, |acc, c| acc.max((c - 1.0).abs()));
        let dev = row_dev.max(col_dev);
        if dev <= BALANCE_TOL || dev >= 0.999 * last_dev {
            break;
        }
        last_dev = dev;
    }
    Ok(p)
}

/// Record the soft monotone plan between two score columns on the tape.
pub fn soft_plan_graph(tape: &mut Tape, s: Var, t: Var, tau: f64) -> Result<Var> {
    let n = tape.value(s).rows();
    let m = tape.value(t).rows();
    let p_s = soft_perm_graph(tape, s, tau)?;
    let p_t = soft_perm_graph(tape, t, tau)?;
    let interp = monotone_interp_matrix(n, m)?.to_tensor();
    let t_const = tape.constant(interp);
    let p_s_t = tape.transpose(p_s)?;
    let left = tape.matmul(p_s_t, t_const)?;
    tape.matmul(left, p_t)
}

/// Evaluate the soft permutation of a score vector.
pub fn soft_perm(values: &[f64], tau: f64) -> Result<SoftPermutation> {
    if values.is_empty() {
        return Err(GsgwError::invalid("cannot soft-sort an empty vector"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(GsgwError::invalid("scores contain NaN or Inf"));
    }
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::column(values));
    let p = soft_perm_graph(&mut tape, v, tau)?;
    Ok(SoftPermutation {
        matrix: tape.value(p).clone(),
        tau,
    })
}

/// Evaluate the soft monotone plan between two score vectors. Marginals are
/// within 1e-6 of uniform for tie-free scores at temperatures of 0.1 and
/// above; see the module notes on colder regimes and ties.
pub fn soft_plan(s: &[f64], t: &[f64], tau: f64) -> Result<Coupling> {
    if s.is_empty() || t.is_empty() {
        return Err(GsgwError::invalid("cannot build a plan on empty scores"));
    }
    if s.iter().chain(t.iter()).any(|v| !v.is_finite()) {
        return Err(GsgwError::invalid("scores contain NaN or Inf"));
    }
    let mut tape = Tape::new();
    let sv = tape.constant(Tensor::column(s));
    let tv = tape.constant(Tensor::column(t));
    let pi = soft_plan_graph(&mut tape, sv, tv, tau)?;
    Coupling::uniform(tape.value(pi).clone(), SOFT_PLAN_VALIDATION_TOL)
}

/// Temperature decay shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnealShape {
    Exponential,
    Linear,
}

/// Temperature schedule from `alpha_start` down to `alpha_end` over `steps`
/// optimizer steps.
#[derive(Debug, Clone, Copy)]
pub struct AnnealSchedule {
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub steps: usize,
    pub shape: AnnealShape,
}

impl AnnealSchedule {
    pub fn new(alpha_start: f64, alpha_end: f64, steps: usize, shape: AnnealShape) -> Result<Self> {
        if steps == 0 {
            return Err(GsgwError::invalid("schedule needs at least one step"));
        }
        if !(alpha_end.is_finite() && alpha_start.is_finite()) || alpha_end <= 0.0 {
            return Err(GsgwError::invalid("temperatures must be finite and > 0"));
        }
        if alpha_end > alpha_start {
            return Err(GsgwError::invalid(format!(
                "schedule must not heat up: end {alpha_end} > start {alpha_start}"
            )));
        }
        Ok(AnnealSchedule {
            alpha_start,
            alpha_end,
            steps,
            shape,
        })
    }

    pub fn constant(tau: f64, steps: usize) -> Result<Self> {
        AnnealSchedule::new(tau, tau, steps, AnnealShape::Exponential)
    }
}

/// Temperature at a given step: `alpha_start` at step 0, `alpha_end` at the
/// final step, geometric or linear in between. A one-step schedule is
/// already at its end.
pub fn anneal(schedule: &AnnealSchedule, step: usize) -> Result<f64> {
    if step >= schedule.steps {
        return Err(GsgwError::invalid(format!(
            "step {step} outside schedule of {} steps",
            schedule.steps
        )));
    }
    if schedule.steps == 1 {
        return Ok(schedule.alpha_end);
    }
    let frac = step as f64 / (schedule.steps - 1) as f64;
    let tau = match schedule.shape {
        AnnealShape::Exponential => {
            schedule.alpha_start * (schedule.alpha_end / schedule.alpha_start).powf(frac)
        }
        AnnealShape::Linear => {
            schedule.alpha_start + (schedule.alpha_end - schedule.alpha_start) * frac
        }
    };
    Ok(tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::plan::{hard_plan, stable_argsort};
    use crate::rng::Rng;

    /// Random scores whose pairwise gaps are at least `gap`.
    fn gapped_scores(rng: &mut Rng, n: usize, gap: f64) -> Vec<f64> {
        let mut base: Vec<f64> = (0..n).map(|i| i as f64 * gap * (1.0 + rng.uniform())).collect();
        rng.shuffle(&mut base);
        base
    }

    #[test]
    fn cold_soft_perm_matches_argsort() {
        let cases: Vec<Vec<f64>> = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.3, -1.0, 2.0, 0.6]];
        for values in cases {
            let soft = soft_perm(&values, 1e-6).unwrap();
            let hard = stable_argsort(&values).unwrap().perm_matrix();
            assert!(
                soft.matrix().max_abs_diff(&hard).unwrap() <= 1e-9,
                "values {values:?}"
            );
        }
    }

    #[test]
    fn warm_soft_plan_approaches_uniform_mixing() {
        // At very high temperature every rank slot looks alike, so the plan
        // between two 2-point spaces tends to the product measure.
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::column(&[0.0, 1.0]));
        let t = tape.constant(Tensor::column(&[2.0, -1.0]));
        let pi = soft_plan_graph(&mut tape, s, t, 1e3).unwrap();
        let value = tape.value(pi);
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (value.get(i, j) - 0.25).abs() < 1e-3,
                    "entry ({i},{j}) = {}",
                    value.get(i, j)
                );
            }
        }
    }

    #[test]
    fn soft_permutation_sums_after_balancing() {
        let mut rng = Rng::new(4);
        for trial in 0..50 {
            let n = 2 + rng.below(12);
            let values: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let tau = [0.1, 0.3, 1.0][trial % 3];
            let soft = soft_perm(&values, tau).unwrap();
            for (i, r) in soft.matrix().row_sums().iter().enumerate() {
                assert!((r - 1.0).abs() <= 1e-8, "row {i} sums to {r} at tau {tau}");
            }
            for (j, c) in soft.matrix().col_sums().iter().enumerate() {
                assert!((c - 1.0).abs() <= 1e-6, "col {j} sums to {c} at tau {tau}");
            }
        }
    }

    #[test]
    fn soft_plan_marginals_near_uniform_across_sizes() {
        let mut rng = Rng::new(21);
        for trial in 0..100 {
            let n = 2 + rng.below(49);
            let m = 2 + rng.below(49);
            let s: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let t: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
            let tau = [0.1, 0.3, 1.0][trial % 3];
            let pi = soft_plan(&s, &t, tau).unwrap();
            assert!(
                pi.marginal_deviation() <= 1e-6,
                "trial {trial} ({n},{m}) tau {tau}: deviation {}",
                pi.marginal_deviation()
            );
        }
    }

    #[test]
    fn soft_plan_converges_to_hard_plan_monotonically() {
        let mut rng = Rng::new(33);
        for _ in 0..10 {
            let n = 3 + rng.below(6);
            let m = 3 + rng.below(6);
            let s = gapped_scores(&mut rng, n, 0.1);
            let t = gapped_scores(&mut rng, m, 0.1);
            let hard = hard_plan(&s, &t).unwrap();

            // Nonincreasing along the grid, up to a 2% relative slack for
            // plateau wiggles at the warm end where the plan is still far
            // from hard.
            let taus = [1.0, 0.3, 0.1, 0.03, 0.01, 0.003, 0.001, 3e-4, 1e-4];
            let mut last = f64::INFINITY;
            for &tau in &taus {
                let soft = soft_plan(&s, &t, tau).unwrap();
                let err = soft.plan().max_abs_diff(hard.plan()).unwrap();
                assert!(
                    err <= 1.02 * last + 1e-12,
                    "error increased at tau {tau}: {err} after {last}"
                );
                last = last.min(err);
            }
            assert!(last <= 1e-4, "cold error {last} too large");
        }
    }

    #[test]
    fn exact_ties_stay_finite_in_value_and_gradient() {
        for &tau in &[1e-3, 1e-2, 0.5] {
            let mut tape = Tape::new();
            let v = tape.leaf(Tensor::column(&[1.0, 1.0, 1.0, 0.0]), true);
            let p = soft_perm_graph(&mut tape, v, tau).unwrap();
            let total = tape.sum(p).unwrap();
            let loss = tape.square(total).unwrap();
            assert!(tape.value(p).all_finite());
            let grads = tape.backward(loss).unwrap();
            assert!(grads.get(v).unwrap().all_finite(), "tau {tau}");
        }
    }

    #[test]
    fn soft_plan_gradients_match_finite_differences() {
        let mut rng = Rng::new(11);
        let n = 4;
        let m = 5;
        let s0: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let t0: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
        let weights = Tensor::from_vec(n, m, (0..n * m).map(|_| rng.normal()).collect()).unwrap();

        for &tau in &[0.1, 1.0] {
            let eval = |theta: &[f64]| -> Result<(f64, Option<Vec<f64>>)> {
                let mut tape = Tape::new();
                let joint = tape.leaf(Tensor::column(theta), true);
                let s = tape.slice_rows(joint, 0, n)?;
                let t = tape.slice_rows(joint, n, m)?;
                let pi = soft_plan_graph(&mut tape, s, t, tau)?;
                let w = tape.constant(weights.clone());
                let prod = tape.hadamard(pi, w)?;
                let loss = tape.sum(prod)?;
                let value = tape.value(loss).scalar_value()?;
                let grads = tape.backward(loss)?;
                Ok((value, grads.get(joint).map(|g| g.data().to_vec())))
            };
            let theta: Vec<f64> = s0.iter().chain(t0.iter()).copied().collect();
            let (_, grad) = eval(&theta).unwrap();
            let analytic = grad.unwrap();
            let err = grad_check(|p| eval(p).map(|(v, _)| v), &theta, &analytic, 1e-5).unwrap();
            assert!(err <= 1e-4, "tau {tau}: gradient error {err}");
        }
    }

    #[test]
    fn anneal_boundaries_and_midpoint() {
        let sched = AnnealSchedule::new(1.0, 0.03, 1000, AnnealShape::Exponential).unwrap();
        assert_eq!(anneal(&sched, 0).unwrap(), 1.0);
        assert_eq!(anneal(&sched, 999).unwrap(), 0.03);
        let mid = anneal(&sched, 500).unwrap();
        assert!((mid - 0.1732).abs() < 5e-4, "midpoint {mid}");
        assert!(anneal(&sched, 1000).is_err());
    }

    #[test]
    fn anneal_linear_midpoint() {
        let sched = AnnealSchedule::new(1.0, 0.2, 11, AnnealShape::Linear).unwrap();
        assert!((anneal(&sched, 5).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn anneal_is_nonincreasing() {
        for shape in [AnnealShape::Exponential, AnnealShape::Linear] {
            let sched = AnnealSchedule::new(2.0, 0.01, 137, shape).unwrap();
            let mut last = f64::INFINITY;
            for step in 0..137 {
                let tau = anneal(&sched, step).unwrap();
                assert!(tau <= last && tau > 0.0);
                last = tau;
            }
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(AnnealSchedule::new(0.5, 1.0, 10, AnnealShape::Linear).is_err());
        assert!(AnnealSchedule::new(1.0, 0.0, 10, AnnealShape::Linear).is_err());
        assert!(AnnealSchedule::new(1.0, 0.1, 0, AnnealShape::Linear).is_err());
        let one = AnnealSchedule::new(1.0, 0.5, 1, AnnealShape::Exponential).unwrap();
        assert_eq!(anneal(&one, 0).unwrap(), 0.5);
    }

    #[test]
    fn rejects_bad_temperatures_and_shapes() {
        assert!(soft_perm(&[1.0, 2.0], 0.0).is_err());
        assert!(soft_perm(&[1.0, 2.0], f64::NAN).is_err());
        assert!(soft_perm(&[], 0.1).is_err());
        assert!(soft_plan(&[1.0], &[f64::NAN], 0.1).is_err());
        let mut tape = Tape::new();
        let bad = tape.constant(Tensor::zeros(2, 2));
        assert!(soft_perm_graph(&mut tape, bad, 0.1).is_err());
    }
}
