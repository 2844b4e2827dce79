//! Exact minimum-cost assignment via shortest augmenting paths.
//!
//! The classic O(n^3) Hungarian method with row/column potentials (Kuhn
//! 1955, in the augmenting-path form of Jonker & Volgenant): rows are
//! inserted one at a time, each insertion runs a Dijkstra-like scan over
//! reduced costs and flips the resulting alternating path. Costs may be
//! negative; only finiteness matters.

use crate::error::{GsgwError, Result};
use crate::tensor::Tensor;

/// Column assigned to each row in a minimum-cost perfect matching of the
/// square cost matrix.
pub fn min_cost_assignment(cost: &Tensor) -> Result<Vec<usize>> {
    let (n, m) = cost.shape();
    if n != m {
        return Err(GsgwError::shape(format!("assignment on {n}x{m} matrix")));
    }
    if n == 0 {
        return Err(GsgwError::invalid("assignment on an empty matrix"));
    }
    if !cost.all_finite() {
        return Err(GsgwError::numeric("assignment cost contains NaN or Inf"));
    }

    // 1-based arrays; p[j] is the row matched to column j, column 0 is the
    // virtual unmatched slot.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![usize::MAX; n];
    for j in 1..=n {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    debug_assert!(assignment.iter().all(|&j| j != usize::MAX));
    Ok(assignment)
}
