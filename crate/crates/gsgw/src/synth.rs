//! Procedural fixtures: toy planar-to-spatial pairs, labeled two- and
//! three-part shapes for the amortized matcher, a bumpy ellipsoid mesh, and
//! plain Gaussian clouds.
//!
//! Every generator is a pure function of its seed, so fixtures are
//! reproduced bitwise across runs. The toy pairs come index-aligned: point
//! i of the source corresponds to point i of the target by construction,
//! which gives matching experiments a free ground truth. The labeled
//! shapes carry part labels balanced as evenly as the point count allows,
//! so the random-assignment baseline of a label-transfer experiment is
//! known analytically from the part proportions.

use std::f64::consts::PI;

use crate::error::{GsgwError, Result};
use crate::measures::PointCloud;
use crate::rng::Rng;

/// n points drawn i.i.d. standard normal in d dimensions.
pub fn gaussian_cloud(n: usize, d: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 || d == 0 {
        return Err(GsgwError::invalid("cloud needs n >= 1 and d >= 1"));
    }
    let mut rng = Rng::new(seed);
    PointCloud::new(d, (0..n * d).map(|_| rng.normal()).collect())
}

/// The four qualitative planar-to-spatial correspondence fixtures. Sources
/// live in the plane, targets in three dimensions; the target is a smooth
/// deformation of the source parametrized by the same index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyPair {
    CircleToHelix,
    SCurveToSpiral,
    GridToSaddle,
    SegmentToArc,
}

impl ToyPair {
    pub const ALL: [ToyPair; 4] = [
        ToyPair::CircleToHelix,
        ToyPair::SCurveToSpiral,
        ToyPair::GridToSaddle,
        ToyPair::SegmentToArc,
    ];
}

/// Build one toy pair with n points per side and a pinch of seeded jitter
/// (1% of scale) so distinct seeds give distinct instances. Ground truth is
/// the identity correspondence.
pub fn toy_pair(kind: ToyPair, n: usize, seed: u64) -> Result<(PointCloud, PointCloud)> {
    if n < 4 {
        return Err(GsgwError::invalid("toy pairs need at least 4 points"));
    }
    let mut rng = Rng::new(seed);
    let mut src = Vec::with_capacity(n * 2);
    let mut dst = Vec::with_capacity(n * 3);
    let mut jitter = |scale: f64, out: &mut Vec<f64>, coords: &[f64]| {
        for &c in coords {
            out.push(c + scale * rng.normal());
        }
    };
    match kind {
        ToyPair::CircleToHelix => {
            for i in 0..n {
                let t = 2.0 * PI * i as f64 / n as f64;
                jitter(0.01, &mut src, &[t.cos(), t.sin()]);
                jitter(0.01, &mut dst, &[t.cos(), t.sin(), t / PI - 1.0]);
            }
        }
        ToyPair::SCurveToSpiral => {
            for i in 0..n {
                let u = 2.0 * (i as f64 / (n - 1) as f64) - 1.0; // [-1, 1]
                jitter(0.01, &mut src, &[u, (1.5 * PI * u).sin() * 0.5]);
                let t = 1.5 * PI * u;
                let r = 0.4 + 0.6 * (u + 1.0) / 2.0;
                jitter(0.01, &mut dst, &[r * t.cos(), r * t.sin(), 0.5 * u]);
            }
        }
        ToyPair::GridToSaddle => {
            let side = (n as f64).sqrt().ceil() as usize;
            for i in 0..n {
                let (r, c) = (i / side, i % side);
                let u = 2.0 * (r as f64 / (side - 1) as f64) - 1.0;
                let v = 2.0 * (c as f64 / (side - 1).max(1) as f64) - 1.0;
                jitter(0.01, &mut src, &[u, v]);
                jitter(0.01, &mut dst, &[u, v, 0.5 * (u * u - v * v)]);
            }
        }
        ToyPair::SegmentToArc => {
            for i in 0..n {
                let u = i as f64 / (n - 1) as f64;
                jitter(0.005, &mut src, &[2.0 * u - 1.0, 0.0]);
                let t = PI * u;
                jitter(0.005, &mut dst, &[t.cos(), t.sin(), 0.3 * (2.0 * u - 1.0)]);
            }
        }
    }
    Ok((PointCloud::new(2, src)?, PointCloud::new(3, dst)?))
}

/// A point cloud with one part label per point.
#[derive(Debug, Clone)]
pub struct LabeledCloud {
    pub cloud: PointCloud,
    pub labels: Vec<usize>,
}

impl LabeledCloud {
    /// Fraction of points in the largest part: the accuracy of always
    /// guessing that part, the floor any learned matcher must beat.
    pub fn majority_fraction(&self) -> f64 {
        let parts = self.labels.iter().max().map(|&m| m + 1).unwrap_or(0);
        let mut counts = vec![0usize; parts];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts.into_iter().max().unwrap_or(0) as f64 / self.labels.len() as f64
    }
}

/// The three procedurally labeled shape families. Each family's parts
/// differ in size, never only in pose: congruent parts would be swappable
/// by a rotation, and label transfer through any rigid-invariant matcher
/// would be capped at chance level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    /// A tight and a loose Gaussian ball at opposite poles; labels 0/1,
    /// split evenly.
    Dumbbell,
    /// A long and a short orthogonal slab meeting at a corner; labels 0/1,
    /// split evenly.
    LShape,
    /// Three legs of decreasing length at 120 degrees; labels 0/1/2, split
    /// as evenly as n allows.
    Tripod,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Dumbbell, ShapeKind::LShape, ShapeKind::Tripod];

    pub fn num_parts(&self) -> usize {
        match self {
            ShapeKind::Tripod => 3,
            _ => 2,
        }
    }
}

/// Sample one labeled shape in canonical pose. Points of a part are
/// contiguous and the split is deterministic, so two shapes of the same
/// kind and size have identical label vectors.
pub fn labeled_shape(kind: ShapeKind, n: usize, seed: u64) -> Result<LabeledCloud> {
    if n < 2 * kind.num_parts() {
        return Err(GsgwError::invalid(format!(
            "{n} points cannot cover {} parts",
            kind.num_parts()
        )));
    }
    let mut rng = Rng::new(seed);
    let mut data = Vec::with_capacity(n * 3);
    let mut labels = Vec::with_capacity(n);
    match kind {
        ShapeKind::Dumbbell => {
            // The parts of every shape differ in size on purpose: congruent
            // parts would be swappable by a rotation, and no rigid-invariant
            // matcher could transfer their labels better than chance.
            let half = n / 2;
            for i in 0..n {
                let (center, label, radius) = if i < half {
                    (-1.0, 0, 0.2)
                } else {
                    (1.0, 1, 0.45)
                };
                data.extend([
                    center + radius * rng.normal(),
                    radius * rng.normal(),
                    radius * rng.normal(),
                ]);
                labels.push(label);
            }
        }
        ShapeKind::LShape => {
            let half = n / 2;
            for i in 0..n {
                if i < half {
                    // long horizontal arm along +x
                    data.extend([
                        1.4 * rng.uniform(),
                        0.25 * rng.uniform(),
                        0.25 * rng.uniform(),
                    ]);
                    labels.push(0);
                } else {
                    // short, denser vertical arm along +z
                    data.extend([
                        0.25 * rng.uniform(),
                        0.25 * rng.uniform(),
                        0.8 * rng.uniform(),
                    ]);
                    labels.push(1);
                }
            }
        }
        ShapeKind::Tripod => {
            let third = n / 3;
            for i in 0..n {
                let leg = (i / third).min(2);
                let angle = 2.0 * PI * leg as f64 / 3.0;
                let r = (0.15 + 0.95 * rng.uniform()) * [1.0, 0.7, 0.45][leg];
                data.extend([
                    r * angle.cos() + 0.05 * rng.normal(),
                    r * angle.sin() + 0.05 * rng.normal(),
                    0.25 * r + 0.05 * rng.normal(),
                ]);
                labels.push(leg);
            }
        }
    }
    Ok(LabeledCloud {
        cloud: PointCloud::new(3, data)?,
        labels,
    })
}

/// A deterministic triangulated ellipsoid with asymmetric radial bumps.
/// Distinct semi-axes give it well-separated principal values, and the
/// bump phases break every mirror symmetry, so principal-axis
/// canonicalization of a rigidly moved copy recovers the original
/// coordinates. Returns (vertices, triangles); the edge graph is connected
/// for rings >= 2 and segments >= 3.
pub fn bumpy_ellipsoid(rings: usize, segments: usize) -> Result<(PointCloud, Vec<[usize; 3]>)> {
    if rings < 2 || segments < 3 {
        return Err(GsgwError::invalid(
            "ellipsoid needs rings >= 2 and segments >= 3",
        ));
    }
    let (ax, ay, az) = (1.0, 0.78, 0.55);
    let radius = |theta: f64, phi: f64| {
        1.0 + 0.12 * (3.0 * phi + 0.7).sin() * (2.0 * theta + 0.4).sin()
            + 0.07 * (5.0 * phi + 1.3).cos() * (theta + 0.2).sin()
    };
    let mut data = Vec::new();
    // north pole, ring vertices, south pole
    data.extend([0.0, 0.0, az * radius(0.0, 0.0)]);
    for r in 1..=rings {
        let theta = PI * r as f64 / (rings + 1) as f64;
        for s in 0..segments {
            let phi = 2.0 * PI * s as f64 / segments as f64;
            let rho = radius(theta, phi);
            data.extend([
                ax * rho * theta.sin() * phi.cos(),
                ay * rho * theta.sin() * phi.sin(),
                az * rho * theta.cos(),
            ]);
        }
    }
    let south = 1 + rings * segments;
    data.extend([0.0, 0.0, -az * radius(PI, 0.0)]);
    let vertex = |r: usize, s: usize| 1 + (r - 1) * segments + (s % segments);
    let mut faces = Vec::new();
    for s in 0..segments {
        faces.push([0, vertex(1, s), vertex(1, s + 1)]);
        faces.push([south, vertex(rings, s + 1), vertex(rings, s)]);
    }
    for r in 1..rings {
        for s in 0..segments {
            let (a, b) = (vertex(r, s), vertex(r, s + 1));
            let (c, d) = (vertex(r + 1, s), vertex(r + 1, s + 1));
            faces.push([a, c, d]);
            faces.push([a, d, b]);
        }
    }
    Ok((PointCloud::new(3, data)?, faces))
}
