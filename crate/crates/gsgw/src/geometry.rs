//! Point-cloud geometry: normalization, graph geodesics, rigid motions,
//! correspondence extraction and scoring, and barycentric interpolation.
//!
//! Geodesic cost matrices are graph geodesics, not exact polyhedral ones:
//! the graph is either the symmetrized k-nearest-neighbor graph of the
//! cloud or the edge graph of a triangle mesh, with Euclidean edge weights
//! and Dijkstra from every source. The result is symmetrized by taking the
//! elementwise minimum of the two directions (both are valid paths of an
//! undirected graph, so the minimum is still a shortest-path length) and
//! optionally divided by its maximum entry so every distance lands in
//! [0,1]. Matching quality is scored by geodesic error: the mean geodesic
//! distance between predicted and ground-truth correspondences on the
//! normalized target matrix.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::error::{GsgwError, Result};
use crate::measures::{CostConvention, CostMatrix, Coupling, PointCloud};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Center a cloud on its mean and scale by the maximum point norm, so the
/// farthest point from the origin ends up at distance exactly 1. Idempotent
/// up to round-off.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<PointCloud> {
    let (n, d) = (cloud.len(), cloud.dim());
    let mut mean = vec![0.0f64; d];
    for p in cloud.iter() {
        for (m, &x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut data = Vec::with_capacity(n * d);
    for p in cloud.iter() {
        for (x, m) in p.iter().zip(&mean) {
            data.push(x - m);
        }
    }
    let max_norm = data
        .chunks_exact(d)
        .map(|p| p.iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0f64, f64::max);
    if max_norm <= 0.0 {
        return Err(GsgwError::DegenerateInput(
            "all points coincide; cannot scale to unit max norm".into(),
        ));
    }
    for x in &mut data {
        *x /= max_norm;
    }
    PointCloud::new(d, data)
}

/// All-pairs graph geodesics with provenance: which graph was used and
/// whether the entries were scaled into [0,1].
#[derive(Debug, Clone)]
pub struct GeodesicMatrix {
    cost: CostMatrix,
    /// Neighbor count of the kNN construction; 0 records a mesh-edge graph.
    graph_k: usize,
    normalized: bool,
}

impl GeodesicMatrix {
    pub fn cost(&self) -> &CostMatrix {
        &self.cost
    }

    pub fn graph_k(&self) -> usize {
        self.graph_k
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn n(&self) -> usize {
        self.cost.n()
    }
}

struct HeapEntry {
    dist: f64,
    node: usize,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.dist == other.dist && self.node == other.node
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    // reversed so the max-heap pops the smallest tentative distance;
    // node index breaks distance ties deterministically
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Shortest paths from every source over an undirected weighted adjacency
/// list, one Dijkstra per source in parallel.
fn all_pairs_dijkstra(adj: &[Vec<(usize, f64)>]) -> Vec<Vec<f64>> {
    let n = adj.len();
    (0..n)
        .into_par_iter()
        .map(|src| {
            let mut dist = vec![f64::INFINITY; n];
            dist[src] = 0.0;
            let mut heap = BinaryHeap::new();
            heap.push(HeapEntry {
                dist: 0.0,
                node: src,
            });
            while let Some(HeapEntry { dist: d, node }) = heap.pop() {
                if d > dist[node] {
                    continue;
                }
                for &(next, w) in &adj[node] {
                    let cand = d + w;
                    if cand < dist[next] {
                        dist[next] = cand;
                        heap.push(HeapEntry {
                            dist: cand,
                            node: next,
                        });
                    }
                }
            }
            dist
        })
        .collect()
}

fn check_connected(dist_rows: &[Vec<f64>], adj: &[Vec<(usize, f64)>]) -> Result<()> {
    if dist_rows[0].iter().all(|d| d.is_finite()) {
        return Ok(());
    }
    // report component sizes via BFS so the error names the split
    let n = adj.len();
    let mut seen = vec![false; n];
    let mut sizes = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut size = 0usize;
        while let Some(u) = stack.pop() {
            size += 1;
            for &(v, _) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        sizes.push(size);
    }
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    Err(GsgwError::Disconnected(sizes))
}

fn geodesics_from_adjacency(
    adj: Vec<Vec<(usize, f64)>>,
    graph_k: usize,
    normalize: bool,
) -> Result<GeodesicMatrix> {
    let n = adj.len();
    let rows = all_pairs_dijkstra(&adj);
    check_connected(&rows, &adj)?;
    let mut mat = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            // min of the two directions: exact symmetry without new rounding
            mat.set(i, j, rows[i][j].min(rows[j][i]));
        }
    }
    if normalize {
        let max = mat.data().iter().cloned().fold(0.0f64, f64::max);
        if max > 0.0 {
            mat = mat.map(|x| x / max);
        }
    }
    let cost = CostMatrix::new(mat, CostConvention::Distance)?;
    Ok(GeodesicMatrix {
        cost,
        graph_k,
        normalized: normalize,
    })
}

/// Geodesics on the symmetrized kNN graph: each point contributes edges to
/// its k nearest neighbors (ties broken by index) and the union is treated
/// as undirected. A disconnected graph is a hard error naming the component
/// sizes rather than an infinite distance.
pub fn geodesic_matrix(cloud: &PointCloud, k: usize, normalize: bool) -> Result<GeodesicMatrix> {
    let n = cloud.len();
    if k == 0 {
        return Err(GsgwError::invalid("kNN graph needs k >= 1"));
    }
    if n < 2 {
        return Err(GsgwError::DegenerateInput(
            "geodesics need at least two points".into(),
        ));
    }
    let k = k.min(n - 1);
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for i in 0..n {
        let mut dists: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (euclid(cloud.point(i), cloud.point(j)), j))
            .collect();
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        for &(w, j) in &dists[..k] {
            adj[i].push((j, w));
            adj[j].push((i, w));
        }
    }
    for list in &mut adj {
        list.sort_by(|a, b| a.0.cmp(&b.0));
        list.dedup_by_key(|e| e.0);
    }
    geodesics_from_adjacency(adj, k, normalize)
}

/// Geodesics on an explicit undirected edge list (the face graph of a
/// mesh), Euclidean edge weights.
pub fn geodesic_matrix_from_edges(
    cloud: &PointCloud,
    edges: &[(usize, usize)],
    normalize: bool,
) -> Result<GeodesicMatrix> {
    let n = cloud.len();
    if edges.is_empty() {
        return Err(GsgwError::invalid("edge graph without edges"));
    }
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for &(a, b) in edges {
        if a >= n || b >= n {
            return Err(GsgwError::invalid(format!(
                "edge ({a}, {b}) out of range for {n} vertices"
            )));
        }
        if a == b {
            continue;
        }
        let w = euclid(cloud.point(a), cloud.point(b));
        adj[a].push((b, w));
        adj[b].push((a, w));
    }
    for list in &mut adj {
        list.sort_by(|a, b| a.0.cmp(&b.0));
        list.dedup_by_key(|e| e.0);
    }
    geodesics_from_adjacency(adj, 0, normalize)
}

/// Mean geodesic distance between predicted and ground-truth target
/// indices, measured on the target geodesic matrix. Unnormalized matrices
/// are divided by their maximum entry on the fly, so the score is always
/// the fraction of the target diameter.
pub fn geodesic_error(
    predicted: &[usize],
    ground_truth: &[usize],
    geo: &GeodesicMatrix,
) -> Result<f64> {
    if predicted.len() != ground_truth.len() {
        return Err(GsgwError::shape(format!(
            "{} predictions for {} ground-truth targets",
            predicted.len(),
            ground_truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(GsgwError::invalid("no correspondences to score"));
    }
    let n = geo.n();
    let scale = if geo.is_normalized() {
        1.0
    } else {
        let max = geo
            .cost()
            .tensor()
            .data()
            .iter()
            .cloned()
            .fold(0.0f64, f64::max);
        if max > 0.0 {
            max
        } else {
            1.0
        }
    };
    let mut total = 0.0;
    for (&p, &t) in predicted.iter().zip(ground_truth) {
        if p >= n || t >= n {
            return Err(GsgwError::invalid(format!(
                "correspondence index ({p}, {t}) out of range for {n} target points"
            )));
        }
        total += geo.cost().get(p, t) / scale;
    }
    Ok(total / predicted.len() as f64)
}

/// Hard correspondence from a coupling: row-wise argmax, ties to the
/// smallest column.
pub fn plan_to_correspondence(pi: &Coupling) -> Result<Vec<usize>> {
    let (n, m) = pi.shape();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut best = 0usize;
        let mut best_mass = f64::NEG_INFINITY;
        for j in 0..m {
            let mass = pi.plan().get(i, j);
            if mass > best_mass {
                best_mass = mass;
                best = j;
            }
        }
        if best_mass <= 0.0 {
            return Err(GsgwError::invalid(format!(
                "row {i} of the plan carries no mass"
            )));
        }
        out.push(best);
    }
    Ok(out)
}

/// Displacement interpolation through a coupling: each source point moves
/// toward the barycenter of its transported mass, z_i(t) = (1-t) x_i +
/// t (sum_j pi_ij y_j) / (sum_j pi_ij). Endpoints are exact.
pub fn barycentric_interpolate(
    x: &PointCloud,
    y: &PointCloud,
    pi: &Coupling,
    t: f64,
) -> Result<PointCloud> {
    if x.dim() != y.dim() {
        return Err(GsgwError::shape(format!(
            "interpolation needs equal ambient dims, got {} and {}",
            x.dim(),
            y.dim()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(GsgwError::invalid(format!("t = {t} outside [0, 1]")));
    }
    let (n, m) = pi.shape();
    if n != x.len() || m != y.len() {
        return Err(GsgwError::shape(format!(
            "plan {n}x{m} for clouds of {} and {} points",
            x.len(),
            y.len()
        )));
    }
    let d = x.dim();
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let mass: f64 = (0..m).map(|j| pi.plan().get(i, j)).sum();
        if mass <= 0.0 {
            return Err(GsgwError::invalid(format!(
                "row {i} of the plan carries no mass"
            )));
        }
        let mut target = vec![0.0f64; d];
        for j in 0..m {
            let w = pi.plan().get(i, j);
            if w == 0.0 {
                continue;
            }
            for (tg, &yc) in target.iter_mut().zip(y.point(j)) {
                *tg += w * yc;
            }
        }
        for (tg, &xc) in target.iter_mut().zip(x.point(i)) {
            data.push((1.0 - t) * xc + t * (*tg / mass));
        }
    }
    PointCloud::new(d, data)
}

/// A proper rigid motion x -> R x + t (R orthogonal; det +1 unless
/// reflections were requested at sampling time).
#[derive(Debug, Clone)]
pub struct RigidTransform {
    rotation: Tensor,
    translation: Vec<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Tensor, translation: Vec<f64>) -> Result<Self> {
        let (d, d2) = rotation.shape();
        if d != d2 || d != translation.len() {
            return Err(GsgwError::shape(format!(
                "rotation {d}x{d2} with translation of length {}",
                translation.len()
            )));
        }
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = (0..d).map(|k| rotation.get(k, i) * rotation.get(k, j)).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-12 {
                    return Err(GsgwError::invalid(format!(
                        "matrix is not orthogonal: column dot ({i},{j}) = {dot}"
                    )));
                }
            }
        }
        Ok(RigidTransform {
            rotation,
            translation,
        })
    }

    pub fn dim(&self) -> usize {
        self.translation.len()
    }

    pub fn rotation(&self) -> &Tensor {
        &self.rotation
    }

    pub fn translation(&self) -> &[f64] {
        &self.translation
    }

    pub fn apply(&self, cloud: &PointCloud) -> Result<PointCloud> {
        let d = self.dim();
        if cloud.dim() != d {
            return Err(GsgwError::shape(format!(
                "transform in dim {d} applied to points of dim {}",
                cloud.dim()
            )));
        }
        let mut data = Vec::with_capacity(cloud.len() * d);
        for p in cloud.iter() {
            for i in 0..d {
                let mut v = self.translation[i];
                for (j, &x) in p.iter().enumerate() {
                    v += self.rotation.get(i, j) * x;
                }
                data.push(v);
            }
        }
        PointCloud::new(d, data)
    }

    /// The group inverse: x -> R^T (x - t).
    pub fn inverse(&self) -> RigidTransform {
        let d = self.dim();
        let mut rot_t = Tensor::zeros(d, d);
        let mut trans = vec![0.0f64; d];
        for i in 0..d {
            for j in 0..d {
                rot_t.set(i, j, self.rotation.get(j, i));
            }
        }
        for (i, tr) in trans.iter_mut().enumerate() {
            *tr = -(0..d)
                .map(|j| self.rotation.get(j, i) * self.translation[j])
                .sum::<f64>();
        }
        RigidTransform {
            rotation: rot_t,
            translation: trans,
        }
    }
}

fn determinant(mat: &Tensor) -> f64 {
    // LU with partial pivoting; d stays tiny so this is plenty
    let (d, _) = mat.shape();
    let mut a: Vec<Vec<f64>> = (0..d).map(|i| mat.row(i).to_vec()).collect();
    let mut det = 1.0f64;
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))
            .unwrap();
        if a[pivot][col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            a.swap(pivot, col);
            det = -det;
        }
        det *= a[col][col];
        for row in col + 1..d {
            let f = a[row][col] / a[col][col];
            for k in col..d {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    det
}

/// Draw a random rigid motion: a Gaussian matrix orthonormalized by
/// Gram-Schmidt (redrawn on near-degeneracy), determinant corrected to +1
/// unless reflections are allowed, and a standard normal translation.
pub fn sample_rigid(d: usize, seed: u64, allow_reflection: bool) -> Result<RigidTransform> {
    if d == 0 {
        return Err(GsgwError::invalid("rigid transforms need dim >= 1"));
    }
    let mut rng = Rng::new(seed);
    let rotation = loop {
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
        let mut ok = true;
        for _ in 0..d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                for (vi, ci) in v.iter_mut().zip(c) {
                    *vi -= dot * ci;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-9 {
                ok = false;
                break;
            }
            for vi in &mut v {
                *vi /= norm;
            }
            cols.push(v);
        }
        if !ok {
            continue;
        }
        let mut rot = Tensor::zeros(d, d);
        for (j, col) in cols.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                rot.set(i, j, v);
            }
        }
        if !allow_reflection && determinant(&rot) < 0.0 {
            for i in 0..d {
                rot.set(i, d - 1, -rot.get(i, d - 1));
            }
        }
        break rot;
    };
    let translation: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    RigidTransform::new(rotation, translation)
}

/// Greedy farthest-point sampling: a random start, then repeatedly the
/// point maximizing the distance to the chosen set (ties to the smallest
/// index). The classic 2-approximation of the k-center cover.
pub fn farthest_point_sample(cloud: &PointCloud, count: usize, seed: u64) -> Result<Vec<usize>> {
    let n = cloud.len();
    if count == 0 || count > n {
        return Err(GsgwError::invalid(format!(
            "cannot sample {count} landmarks from {n} points"
        )));
    }
    let mut rng = Rng::new(seed);
    let first = rng.below(n);
    let mut chosen = vec![first];
    let mut dist: Vec<f64> = (0..n)
        .map(|i| euclid(cloud.point(i), cloud.point(first)))
        .collect();
    while chosen.len() < count {
        let mut best = 0usize;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &di) in dist.iter().enumerate() {
            if di > best_d {
                best_d = di;
                best = i;
            }
        }
        chosen.push(best);
        for i in 0..n {
            let d = euclid(cloud.point(i), cloud.point(best));
            if d < dist[i] {
                dist[i] = d;
            }
        }
    }
    Ok(chosen)
}

/// Eigen-decomposition of a small symmetric matrix by cyclic Jacobi
/// rotations; returns (eigenvalues, eigenvector columns) sorted by
/// decreasing eigenvalue.
fn symmetric_eigen(mat: &Tensor) -> (Vec<f64>, Tensor) {
    let (d, _) = mat.shape();
    let mut a = mat.clone();
    let mut v = Tensor::zeros(d, d);
    for i in 0..d {
        v.set(i, i, 1.0);
    }
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for i in 0..d {
            for j in i + 1..d {
                off += a.get(i, j) * a.get(i, j);
            }
        }
        if off <= 1e-28 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a.get(p, q);
                if apq.abs() <= 1e-30 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..d {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..d {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)));
    let vals: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vecs = Tensor::zeros(d, d);
    for (new_col, &old_col) in order.iter().enumerate() {
        for i in 0..d {
            vecs.set(i, new_col, v.get(i, old_col));
        }
    }
    (vals, vecs)
}

/// Rotate a centered cloud onto its principal axes with a deterministic
/// sign convention: each axis is flipped so the point with the largest
/// absolute projection projects positively (ties to the smallest point
/// index). Projections are preserved by rigid motions, so rigidly moved
/// copies of a cloud with distinct principal values canonicalize to the
/// same coordinates up to round-off; shapes with symmetric spectra or
/// mirror symmetries keep a genuine sign ambiguity.
pub fn pca_canonicalize(cloud: &PointCloud) -> Result<PointCloud> {
    let (n, d) = (cloud.len(), cloud.dim());
    if n < 2 {
        return Err(GsgwError::DegenerateInput(
            "principal axes need at least two points".into(),
        ));
    }
    let mut mean = vec![0.0f64; d];
    for p in cloud.iter() {
        for (m, &x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = Tensor::zeros(d, d);
    for p in cloud.iter() {
        for i in 0..d {
            for j in 0..d {
                cov.set(
                    i,
                    j,
                    cov.get(i, j) + (p[i] - mean[i]) * (p[j] - mean[j]),
                );
            }
        }
    }
    let cov = cov.map(|x| x / n as f64);
    let (_, axes) = symmetric_eigen(&cov);
    let mut data = vec![0.0f64; n * d];
    for (r, p) in cloud.iter().enumerate() {
        for col in 0..d {
            let mut v = 0.0;
            for i in 0..d {
                v += (p[i] - mean[i]) * axes.get(i, col);
            }
            data[r * d + col] = v;
        }
    }
    for col in 0..d {
        let mut lead = 0usize;
        for r in 1..n {
            if data[r * d + col].abs() > data[lead * d + col].abs() {
                lead = r;
            }
        }
        if data[lead * d + col] < 0.0 {
            for r in 0..n {
                data[r * d + col] = -data[r * d + col];
            }
        }
    }
    PointCloud::new(d, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::build_cost_matrix;

    fn line_cloud(xs: &[f64]) -> PointCloud {
        PointCloud::new(2, xs.iter().flat_map(|&x| [x, 0.0]).collect()).unwrap()
    }

    fn random_cloud(rng: &mut Rng, n: usize, d: usize) -> PointCloud {
        PointCloud::new(d, (0..n * d).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn normalization_centers_and_scales() {
        let cloud = line_cloud(&[2.0, 0.0]);
        let normed = normalize_cloud(&cloud).unwrap();
        assert_eq!(normed.point(0), &[1.0, 0.0]);
        assert_eq!(normed.point(1), &[-1.0, 0.0]);
    }

    #[test]
    fn normalization_is_idempotent() {
        let mut rng = Rng::new(3);
        let cloud = random_cloud(&mut rng, 12, 3);
        let once = normalize_cloud(&cloud).unwrap();
        let twice = normalize_cloud(&once).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn normalization_rejects_coincident_points() {
        let cloud = PointCloud::new(2, vec![1.0, 2.0, 1.0, 2.0]).unwrap();
        assert!(matches!(
            normalize_cloud(&cloud).unwrap_err(),
            GsgwError::DegenerateInput(_)
        ));
    }

    #[test]
    fn path_graph_geodesics() {
        let cloud = line_cloud(&[0.0, 1.0, 2.0]);
        let geo = geodesic_matrix(&cloud, 1, false).unwrap();
        let want = [[0.0, 1.0, 2.0], [1.0, 0.0, 1.0], [2.0, 1.0, 0.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(geo.cost().get(i, j), want[i][j]);
            }
        }
        let normed = geodesic_matrix(&cloud, 1, true).unwrap();
        assert_eq!(normed.cost().get(0, 2), 1.0);
        assert_eq!(normed.cost().get(0, 1), 0.5);
        assert!(normed.is_normalized());
    }

    #[test]
    fn complete_graph_matches_straight_lines() {
        let mut rng = Rng::new(5);
        let cloud = random_cloud(&mut rng, 10, 3);
        let geo = geodesic_matrix(&cloud, 9, false).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let direct = euclid(cloud.point(i), cloud.point(j));
                assert!((geo.cost().get(i, j) - direct).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn disconnected_graph_reports_component_sizes() {
        // two tight pairs far apart; k=1 keeps them separate
        let cloud = line_cloud(&[0.0, 0.1, 100.0, 100.1]);
        match geodesic_matrix(&cloud, 1, false).unwrap_err() {
            GsgwError::Disconnected(sizes) => assert_eq!(sizes, vec![2, 2]),
            other => panic!("expected disconnected error, got {other:?}"),
        }
    }

    #[test]
    fn triangle_inequality_on_random_triples() {
        let mut rng = Rng::new(7);
        let cloud = random_cloud(&mut rng, 30, 3);
        let geo = geodesic_matrix(&cloud, 4, false).unwrap();
        for _ in 0..20 {
            let (a, b, c) = (rng.below(30), rng.below(30), rng.below(30));
            assert!(geo.cost().get(a, c) <= geo.cost().get(a, b) + geo.cost().get(b, c) + 1e-9);
        }
    }

    #[test]
    fn mesh_edge_graph_geodesics() {
        let cloud = line_cloud(&[0.0, 1.0, 2.0]);
        let geo = geodesic_matrix_from_edges(&cloud, &[(0, 1), (1, 2)], false).unwrap();
        assert_eq!(geo.cost().get(0, 2), 2.0);
        assert_eq!(geo.graph_k(), 0);
    }

    #[test]
    fn geodesic_error_cases() {
        let cloud = line_cloud(&[0.0, 1.0, 2.0]);
        let geo = geodesic_matrix(&cloud, 1, true).unwrap();
        let truth = [0usize, 1, 2];
        assert_eq!(geodesic_error(&truth, &truth, &geo).unwrap(), 0.0);
        // every prediction one full diameter away from its target
        assert_eq!(geodesic_error(&[2, 1, 0], &[0, 1, 2], &geo).unwrap(), 2.0 / 3.0);
        assert!(geodesic_error(&[0, 1, 3], &truth, &geo).is_err());
        // unnormalized matrices are scaled by their max on the fly
        let raw = geodesic_matrix(&cloud, 1, false).unwrap();
        let e_raw = geodesic_error(&[1, 2, 2], &truth, &raw).unwrap();
        let e_norm = geodesic_error(&[1, 2, 2], &truth, &geo).unwrap();
        assert!((e_raw - e_norm).abs() <= 1e-15);
    }

    #[test]
    fn correspondence_extraction() {
        let plan = Tensor::from_rows(&[
            vec![1.0 / 3.0, 1.0 / 6.0, 0.0],
            vec![0.0, 1.0 / 6.0, 1.0 / 3.0],
        ])
        .unwrap();
        let pi = Coupling::new(plan, vec![0.5, 0.5], vec![1.0 / 3.0; 3], 1e-12).unwrap();
        assert_eq!(plan_to_correspondence(&pi).unwrap(), vec![0, 2]);

        let tie = Tensor::from_rows(&[vec![0.25, 0.25], vec![0.25, 0.25]]).unwrap();
        let pi = Coupling::uniform(tie, 1e-12).unwrap();
        assert_eq!(plan_to_correspondence(&pi).unwrap(), vec![0, 0]);
    }

    #[test]
    fn barycentric_endpoints_are_exact() {
        let x = PointCloud::new(1, vec![0.0, 1.0, 2.0]).unwrap();
        let y = PointCloud::new(1, vec![5.0, 3.0, 4.0]).unwrap();
        // permutation plan x0->y1, x1->y2, x2->y0
        let third = 1.0 / 3.0;
        let plan = Tensor::from_rows(&[
            vec![0.0, third, 0.0],
            vec![0.0, 0.0, third],
            vec![third, 0.0, 0.0],
        ])
        .unwrap();
        let pi = Coupling::uniform(plan, 1e-12).unwrap();
        let at0 = barycentric_interpolate(&x, &y, &pi, 0.0).unwrap();
        assert_eq!(at0.data(), x.data());
        let at1 = barycentric_interpolate(&x, &y, &pi, 1.0).unwrap();
        assert_eq!(at1.data(), &[3.0, 4.0, 5.0]);
        let mid = barycentric_interpolate(&x, &y, &pi, 0.5).unwrap();
        assert_eq!(mid.data(), &[1.5, 2.5, 3.5]);
    }

    #[test]
    fn rigid_transforms_are_orthogonal_and_invertible() {
        for seed in 0..20u64 {
            for d in [2usize, 3] {
                let g = sample_rigid(d, seed, false).unwrap();
                // constructor already enforces orthogonality to 1e-12
                assert!(determinant(g.rotation()) > 0.0);
                let mut rng = Rng::with_stream(seed, 1);
                let cloud = random_cloud(&mut rng, 15, d);
                let moved = g.apply(&cloud).unwrap();
                let back = g.inverse().apply(&moved).unwrap();
                for (a, b) in cloud.data().iter().zip(back.data()) {
                    assert!((a - b).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn reflections_only_when_asked() {
        let mut saw_reflection = false;
        for seed in 0..40u64 {
            let g = sample_rigid(3, seed, true).unwrap();
            if determinant(g.rotation()) < 0.0 {
                saw_reflection = true;
            }
            let g = sample_rigid(3, seed, false).unwrap();
            assert!(determinant(g.rotation()) > 0.0);
        }
        assert!(saw_reflection, "40 draws produced no reflection");
    }

    #[test]
    fn rigid_motion_preserves_cost_matrices() {
        let mut rng = Rng::new(11);
        let cloud = random_cloud(&mut rng, 12, 3);
        let before = build_cost_matrix(&cloud, CostConvention::SquaredDistance).unwrap();
        for seed in 0..20u64 {
            let g = sample_rigid(3, seed, false).unwrap();
            let after =
                build_cost_matrix(&g.apply(&cloud).unwrap(), CostConvention::SquaredDistance)
                    .unwrap();
            for i in 0..12 {
                for j in 0..12 {
                    assert!((before.get(i, j) - after.get(i, j)).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn farthest_point_sampling_reaches_extremes() {
        let cloud = line_cloud(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        for seed in 0..5u64 {
            let picks = farthest_point_sample(&cloud, 3, seed).unwrap();
            assert!(picks.contains(&0) || picks.contains(&9));
            let mut sorted = picks.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 3, "duplicate landmark in {picks:?}");
        }
        assert!(farthest_point_sample(&cloud, 11, 0).is_err());
    }

    #[test]
    fn pca_canonicalization_undoes_rigid_motion() {
        let mut rng = Rng::new(13);
        // anisotropic cloud: distinct principal values with high probability
        let mut data = Vec::new();
        for _ in 0..40 {
            data.extend([3.0 * rng.normal(), 1.5 * rng.normal(), 0.5 * rng.normal()]);
        }
        let cloud = PointCloud::new(3, data).unwrap();
        let canon = pca_canonicalize(&cloud).unwrap();
        for seed in 0..10u64 {
            let g = sample_rigid(3, seed, false).unwrap();
            let moved = g.apply(&cloud).unwrap();
            let canon_moved = pca_canonicalize(&moved).unwrap();
            for (a, b) in canon.data().iter().zip(canon_moved.data()) {
                assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
            }
        }
    }
}
