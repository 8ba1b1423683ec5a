//! PCA normal estimation and the normal-consistency regularizer.
//!
//! Each point's normal is the smallest-eigenvalue eigenvector of the
//! covariance of its `k_normal` nearest neighbors (the point itself
//! included). Normals are sign-canonicalized so that their largest-magnitude
//! component is non-negative.
//!
//! The per-point consistency `nc(p_i)` measures how much the normal
//! similarities inside a neighborhood spread around their mean. Similarities
//! are taken between normals oriented to agree with the center normal, i.e.
//! `s_ij = |v_i . v_j|`, so the score is independent of the arbitrary sign an
//! eigen-solver (or the canonicalization rule) assigns to each normal.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, SymmetricEigen};

use crate::distances::GradientField;
use crate::error::{Error, Result};
use crate::geometry::{knn, Point, PointCloud};

/// Relative eigen-gap under which the two smallest eigenvalues count as equal.
const EIGEN_TIE_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalFlag {
    Regular,
    /// All neighbors coincide; the normal defaults to +z.
    Degenerate,
    /// The smallest eigenvalue is not simple (e.g. collinear neighbors).
    EigenTie,
}

/// Unit normals aligned with cloud indices.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalField {
    pub normals: Vec<Point>,
    pub k_normal: usize,
    pub flags: Vec<NormalFlag>,
}

impl NormalField {
    pub fn len(&self) -> usize {
        self.normals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }

    pub fn flagged_count(&self) -> usize {
        self.flags.iter().filter(|f| **f != NormalFlag::Regular).count()
    }
}

/// How a neighborhood's similarities are reduced to one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NccVariant {
    /// Root of the summed squared deviation from the mean similarity.
    #[default]
    Variance,
    /// One minus the mean similarity.
    Mean,
    /// One minus the smallest similarity.
    Min,
}

impl fmt::Display for NccVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NccVariant::Variance => "variance",
            NccVariant::Mean => "mean",
            NccVariant::Min => "min",
        })
    }
}

impl FromStr for NccVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variance" => Ok(NccVariant::Variance),
            "mean" => Ok(NccVariant::Mean),
            "min" => Ok(NccVariant::Min),
            other => Err(Error::InvalidParameter(format!(
                "unknown NCC variant `{other}` (expected variance, mean or min)"
            ))),
        }
    }
}

/// Gradient strategy for the NCC term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NccGradMode {
    /// Central differences (step 1e-5) with the neighbor graph held fixed.
    #[default]
    FiniteDiff,
    /// Normals treated as constants. The surrogate then no longer depends on
    /// coordinates, so this gradient is the zero field.
    FrozenNormals,
    /// Exact derivative through the eigenvector, neighbor graph held fixed.
    Analytic,
}

impl fmt::Display for NccGradMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NccGradMode::FiniteDiff => "finite-diff",
            NccGradMode::FrozenNormals => "frozen-normals",
            NccGradMode::Analytic => "analytic",
        })
    }
}

impl FromStr for NccGradMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finite-diff" => Ok(NccGradMode::FiniteDiff),
            "frozen-normals" => Ok(NccGradMode::FrozenNormals),
            "analytic" => Ok(NccGradMode::Analytic),
            other => Err(Error::InvalidParameter(format!(
                "unknown NCC gradient mode `{other}` (expected finite-diff, frozen-normals or analytic)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NccReport {
    pub per_point: Vec<f64>,
    pub aggregate: f64,
    pub variant: NccVariant,
}

/// Fixed k-NN lists of a cloud within itself.
#[derive(Debug, Clone)]
pub(crate) struct NeighborGraph {
    pub lists: Vec<Vec<usize>>,
}

impl NeighborGraph {
    pub fn build(cloud: &PointCloud, k: usize) -> Result<Self> {
        Ok(NeighborGraph {
            lists: knn(cloud, cloud, k)?
                .into_iter()
                .map(|n| n.neighbor_indices)
                .collect(),
        })
    }

    /// `members[p]` lists every `i` whose neighborhood contains `p`.
    fn reverse(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.lists.len()];
        for (i, list) in self.lists.iter().enumerate() {
            for &p in list {
                members[p].push(i);
            }
        }
        members
    }
}

/// Everything the analytic gradient needs about one neighborhood's PCA.
#[derive(Debug, Clone)]
struct LocalFrame {
    normal: Point,
    flag: NormalFlag,
    /// Eigenvectors sorted by ascending eigenvalue.
    axes: [Point; 3],
    values: [f64; 3],
    /// `normal = sign * axes[0]` for regular frames.
    sign: f64,
    centroid: Point,
}

fn canonicalize(v: Point) -> Point {
    let mut idx = 0;
    for a in 1..3 {
        if v[a].abs() > v[idx].abs() {
            idx = a;
        }
    }
    if v[idx] < 0.0 {
        -v
    } else {
        v
    }
}

fn local_frame(points: &[Point], neighbors: &[usize]) -> LocalFrame {
    let k = neighbors.len() as f64;
    let first = points[neighbors[0]];
    let mut centroid = Point::zeros();
    for &j in neighbors {
        centroid += points[j];
    }
    centroid /= k;

    if neighbors.iter().all(|&j| points[j] == first) {
        return LocalFrame {
            normal: Point::z(),
            flag: NormalFlag::Degenerate,
            axes: [Point::x(), Point::y(), Point::z()],
            values: [0.0; 3],
            sign: 1.0,
            centroid,
        };
    }

    let mut cov = Matrix3::zeros();
    for &j in neighbors {
        let d = points[j] - centroid;
        cov += d * d.transpose();
    }
    cov /= k;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.map(|c| eig.eigenvalues[c]);
    let axes = order.map(|c| eig.eigenvectors.column(c).into_owned().normalize());

    if values[1] - values[0] <= EIGEN_TIE_RTOL * values[2].abs() {
        // Any direction orthogonal to the dominant axis fits equally well; take
        // the one built from the coordinate axis least aligned with it.
        let dominant = axes[2];
        let mut least = 0;
        for a in 1..3 {
            if dominant[a].abs() < dominant[least].abs() {
                least = a;
            }
        }
        let mut e = Point::zeros();
        e[least] = 1.0;
        return LocalFrame {
            normal: canonicalize(dominant.cross(&e).normalize()),
            flag: NormalFlag::EigenTie,
            axes,
            values,
            sign: 1.0,
            centroid,
        };
    }

    let normal = canonicalize(axes[0]);
    let sign = if normal.dot(&axes[0]) < 0.0 { -1.0 } else { 1.0 };
    LocalFrame {
        normal,
        flag: NormalFlag::Regular,
        axes,
        values,
        sign,
        centroid,
    }
}

impl LocalFrame {
    /// Pulls `upstream` (dL/dnormal) back onto the neighborhood coordinates,
    /// accumulating into `grad`. Flagged frames carry no gradient.
    fn backprop(&self, points: &[Point], neighbors: &[usize], upstream: &Point, grad: &mut [Point]) {
        if self.flag != NormalFlag::Regular {
            return;
        }
        let k = neighbors.len() as f64;
        let u0 = self.axes[0];
        let g = self.sign * upstream;
        let mut coeffs = [0.0; 2];
        for l in 1..3 {
            let gap = self.values[0] - self.values[l];
            coeffs[l - 1] = g.dot(&self.axes[l]) / (k * gap);
        }
        for &m in neighbors {
            let d = points[m] - self.centroid;
            let along = d.dot(&u0);
            for l in 1..3 {
                let ul = self.axes[l];
                grad[m] += coeffs[l - 1] * (along * ul + ul.dot(&d) * u0);
            }
        }
    }
}

fn check_k(cloud: &PointCloud, k_normal: usize) -> Result<()> {
    if k_normal < 3 {
        return Err(Error::UnderdeterminedPlane(k_normal));
    }
    if cloud.len() < k_normal {
        return Err(Error::CloudTooSmall {
            what: "normal estimation",
            needed: k_normal,
            available: cloud.len(),
        });
    }
    Ok(())
}

fn frames(points: &[Point], graph: &NeighborGraph) -> Vec<LocalFrame> {
    graph.lists.iter().map(|list| local_frame(points, list)).collect()
}

/// PCA normals from each point's `k_normal` nearest neighbors.
pub fn estimate_normals(cloud: &PointCloud, k_normal: usize) -> Result<NormalField> {
    check_k(cloud, k_normal)?;
    let graph = NeighborGraph::build(cloud, k_normal)?;
    let frames = frames(cloud.points(), &graph);
    Ok(NormalField {
        normals: frames.iter().map(|f| f.normal).collect(),
        k_normal,
        flags: frames.iter().map(|f| f.flag).collect(),
    })
}

#[inline]
fn similarity(a: &Point, b: &Point) -> f64 {
    a.dot(b).abs()
}

fn score(variant: NccVariant, sims: &[f64]) -> f64 {
    let k = sims.len() as f64;
    match variant {
        NccVariant::Variance => {
            let mu = sims.iter().sum::<f64>() / k;
            sims.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>().sqrt()
        }
        NccVariant::Mean => 1.0 - sims.iter().sum::<f64>() / k,
        NccVariant::Min => 1.0 - sims.iter().copied().fold(f64::INFINITY, f64::min),
    }
}

/// d score / d s_j, written into `out`.
fn score_grad(variant: NccVariant, sims: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let k = sims.len() as f64;
    match variant {
        NccVariant::Variance => {
            let mu = sims.iter().sum::<f64>() / k;
            let root = sims.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>().sqrt();
            if root > 0.0 {
                out.extend(sims.iter().map(|s| (s - mu) / root));
            } else {
                out.resize(sims.len(), 0.0);
            }
        }
        NccVariant::Mean => out.resize(sims.len(), -1.0 / k),
        NccVariant::Min => {
            out.resize(sims.len(), 0.0);
            let mut arg = 0;
            for (j, s) in sims.iter().enumerate() {
                if *s < sims[arg] {
                    arg = j;
                }
            }
            out[arg] = -1.0;
        }
    }
}

fn point_score(normals: &[Point], list: &[usize], center: usize, variant: NccVariant, sims: &mut Vec<f64>) -> f64 {
    sims.clear();
    let vi = normals[center];
    sims.extend(list.iter().map(|&j| similarity(&vi, &normals[j])));
    score(variant, sims)
}

fn scores(normals: &[Point], graph: &NeighborGraph, variant: NccVariant) -> Vec<f64> {
    let mut sims = Vec::new();
    graph
        .lists
        .iter()
        .enumerate()
        .map(|(i, list)| point_score(normals, list, i, variant, &mut sims))
        .collect()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Variance-form consistency of one point: root of the summed squared
/// deviation of neighbor similarities from their mean.
pub fn normal_consistency(
    cloud: &PointCloud,
    normals: &NormalField,
    point_index: usize,
    k_normal: usize,
) -> Result<f64> {
    check_k(cloud, k_normal)?;
    if point_index >= cloud.len() {
        return Err(Error::IndexOutOfBounds {
            index: point_index,
            len: cloud.len(),
        });
    }
    if normals.len() != cloud.len() {
        return Err(Error::DimensionMismatch(normals.len(), cloud.len()));
    }
    let query = PointCloud::from_points_unchecked(vec![cloud[point_index]]);
    let list = &knn(&query, cloud, k_normal)?[0].neighbor_indices;
    let mut sims = Vec::new();
    Ok(point_score(&normals.normals, list, point_index, NccVariant::Variance, &mut sims))
}

/// Mean per-point score over the whole cloud.
pub fn ncc(cloud: &PointCloud, k_normal: usize, variant: NccVariant) -> Result<NccReport> {
    check_k(cloud, k_normal)?;
    let graph = NeighborGraph::build(cloud, k_normal)?;
    let frames = frames(cloud.points(), &graph);
    let normals: Vec<Point> = frames.iter().map(|f| f.normal).collect();
    let per_point = scores(&normals, &graph, variant);
    Ok(NccReport {
        aggregate: mean(&per_point),
        per_point,
        variant,
    })
}

/// NCC evaluated with externally supplied (frozen) normals. Neighborhoods are
/// still searched on `cloud`.
pub fn ncc_with_frozen_normals(cloud: &PointCloud, normals: &NormalField, variant: NccVariant) -> Result<f64> {
    check_k(cloud, normals.k_normal)?;
    if normals.len() != cloud.len() {
        return Err(Error::DimensionMismatch(normals.len(), cloud.len()));
    }
    let graph = NeighborGraph::build(cloud, normals.k_normal)?;
    Ok(mean(&scores(&normals.normals, &graph, variant)))
}

/// NCC with its gradient w.r.t. the cloud coordinates.
pub fn grad_ncc(
    cloud: &PointCloud,
    k_normal: usize,
    variant: NccVariant,
    mode: NccGradMode,
) -> Result<(f64, GradientField)> {
    check_k(cloud, k_normal)?;
    let graph = NeighborGraph::build(cloud, k_normal)?;
    let points = cloud.points();
    let frames = frames(points, &graph);
    let normals: Vec<Point> = frames.iter().map(|f| f.normal).collect();
    let per_point = scores(&normals, &graph, variant);
    let value = mean(&per_point);
    let grad = match mode {
        NccGradMode::FrozenNormals => GradientField::zeros(cloud.len()),
        NccGradMode::Analytic => analytic_grad(points, &graph, &frames, variant),
        NccGradMode::FiniteDiff => {
            finite_diff_grad(points, &graph, &normals, &per_point, variant, FD_STEP)
        }
    };
    Ok((value, grad))
}

/// Probe step for the finite-difference NCC gradient.
pub const FD_STEP: f64 = 1e-5;

fn analytic_grad(
    points: &[Point],
    graph: &NeighborGraph,
    frames: &[LocalFrame],
    variant: NccVariant,
) -> GradientField {
    let n = points.len();
    let inv_n = 1.0 / n as f64;
    let normals: Vec<Point> = frames.iter().map(|f| f.normal).collect();
    let mut upstream = vec![Point::zeros(); n];
    let mut sims = Vec::new();
    let mut dscore = Vec::new();
    for (i, list) in graph.lists.iter().enumerate() {
        let vi = normals[i];
        sims.clear();
        sims.extend(list.iter().map(|&j| similarity(&vi, &normals[j])));
        score_grad(variant, &sims, &mut dscore);
        for (&j, &ds) in list.iter().zip(&dscore) {
            if j == i || ds == 0.0 {
                continue;
            }
            let vj = normals[j];
            let sigma = if vi.dot(&vj) < 0.0 { -1.0 } else { 1.0 };
            let w = ds * sigma * inv_n;
            upstream[i] += w * vj;
            upstream[j] += w * vi;
        }
    }
    let mut grad = vec![Point::zeros(); n];
    for (i, list) in graph.lists.iter().enumerate() {
        frames[i].backprop(points, list, &upstream[i], &mut grad);
    }
    GradientField::from_rows(grad)
}

fn finite_diff_grad(
    points: &[Point],
    graph: &NeighborGraph,
    normals: &[Point],
    base_scores: &[f64],
    variant: NccVariant,
    step: f64,
) -> GradientField {
    let n = points.len();
    let members = graph.reverse();
    let mut work_points = points.to_vec();
    let mut work_normals = normals.to_vec();
    let mut sims = Vec::new();
    let mut affected_scores: Vec<usize> = Vec::new();
    let mut grad = vec![Point::zeros(); n];

    for p in 0..n {
        // Moving p changes the normals of every neighborhood containing p, and
        // those normals feed the scores of every neighborhood containing them.
        let changed_normals = &members[p];
        affected_scores.clear();
        for &i in changed_normals {
            affected_scores.extend_from_slice(&members[i]);
        }
        affected_scores.sort_unstable();
        affected_scores.dedup();

        for axis in 0..3 {
            let mut deltas = [0.0; 2];
            for (slot, dir) in [1.0, -1.0].into_iter().enumerate() {
                work_points[p][axis] = points[p][axis] + dir * step;
                for &i in changed_normals {
                    work_normals[i] = local_frame(&work_points, &graph.lists[i]).normal;
                }
                let mut delta = 0.0;
                for &j in &affected_scores {
                    delta += point_score(&work_normals, &graph.lists[j], j, variant, &mut sims) - base_scores[j];
                }
                deltas[slot] = delta;
                for &i in changed_normals {
                    work_normals[i] = normals[i];
                }
            }
            work_points[p][axis] = points[p][axis];
            grad[p][axis] = (deltas[0] - deltas[1]) / (2.0 * step * n as f64);
        }
    }
    GradientField::from_rows(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(nx: usize, ny: usize, f: impl Fn(f64, f64) -> Point) -> PointCloud {
        let mut pts = Vec::new();
        for i in 0..nx {
            for j in 0..ny {
                // Slight shear keeps neighborhoods from being exactly symmetric.
                let u = i as f64 * 0.1 + j as f64 * 0.013;
                let v = j as f64 * 0.1 + i as f64 * 0.007;
                pts.push(f(u, v));
            }
        }
        PointCloud::new(pts).unwrap()
    }

    #[test]
    fn plane_z0_normals_point_up() {
        let c = grid(6, 6, |u, v| Point::new(u, v, 0.0));
        let nf = estimate_normals(&c, 8).unwrap();
        for n in &nf.normals {
            assert!((n - Point::z()).norm() < 1e-12, "{n:?}");
        }
    }

    #[test]
    fn plane_x5_normals_point_along_x() {
        let c = grid(6, 6, |u, v| Point::new(5.0, u, v));
        let nf = estimate_normals(&c, 8).unwrap();
        for n in &nf.normals {
            assert!((n - Point::x()).norm() < 1e-12, "{n:?}");
        }
    }

    #[test]
    fn normals_are_unit_and_canonical() {
        let c = grid(7, 7, |u, v| Point::new(u, v, (u * 3.0).sin() * 0.2 - v * v));
        let nf = estimate_normals(&c, 8).unwrap();
        for n in &nf.normals {
            assert!((n.norm() - 1.0).abs() < 1e-9);
            let mut idx = 0;
            for a in 1..3 {
                if n[a].abs() > n[idx].abs() {
                    idx = a;
                }
            }
            assert!(n[idx] >= 0.0);
        }
    }

    #[test]
    fn underdetermined_plane_error() {
        let c = grid(3, 3, |u, v| Point::new(u, v, 0.0));
        let err = estimate_normals(&c, 2).unwrap_err();
        assert!(err.to_string().starts_with("underdetermined plane"));
    }

    #[test]
    fn coincident_neighborhood_is_flagged() {
        let c = PointCloud::from_arrays(&[[1.0, 1.0, 1.0]; 5]).unwrap();
        let nf = estimate_normals(&c, 4).unwrap();
        assert!(nf.flags.iter().all(|f| *f == NormalFlag::Degenerate));
        assert!(nf.normals.iter().all(|n| *n == Point::z()));
        let r = ncc(&c, 4, NccVariant::Variance).unwrap();
        assert!(r.aggregate.is_finite());
    }

    #[test]
    fn collinear_neighborhood_is_flagged() {
        let c = PointCloud::new((0..6).map(|i| Point::new(i as f64, 0.0, 0.0)).collect()).unwrap();
        let nf = estimate_normals(&c, 3).unwrap();
        assert!(nf.flags.iter().all(|f| *f == NormalFlag::EigenTie));
        for n in &nf.normals {
            assert!(n.x.abs() < 1e-12);
            assert!((n.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn plane_scores_vanish() {
        let c = grid(6, 6, |u, v| Point::new(u, v, 0.0));
        for variant in [NccVariant::Variance, NccVariant::Mean, NccVariant::Min] {
            assert!(ncc(&c, 8, variant).unwrap().aggregate < 1e-12);
        }
        let nf = estimate_normals(&c, 8).unwrap();
        assert!(normal_consistency(&c, &nf, 7, 8).unwrap() < 1e-12);
    }

    #[test]
    fn variance_score_of_two_direction_neighborhood() {
        // similarities {1, 1, 0, 0}: mean 0.5, summed squared deviation 1
        let sims = [1.0, 1.0, 0.0, 0.0];
        assert!((score(NccVariant::Variance, &sims) - 1.0).abs() < 1e-12);
        assert!((score(NccVariant::Mean, &sims) - 0.5).abs() < 1e-12);
        assert!((score(NccVariant::Min, &sims) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normal_consistency_index_error() {
        let c = grid(4, 4, |u, v| Point::new(u, v, 0.0));
        let nf = estimate_normals(&c, 4).unwrap();
        assert!(matches!(
            normal_consistency(&c, &nf, 99, 4),
            Err(Error::IndexOutOfBounds { index: 99, .. })
        ));
    }

    #[test]
    fn frozen_normals_gradient_is_zero_field() {
        let c = grid(5, 5, |u, v| Point::new(u, v, u * v));
        let (_, g) = grad_ncc(&c, 6, NccVariant::Variance, NccGradMode::FrozenNormals).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert_eq!(g.len(), c.len());
    }

    #[test]
    fn variant_and_mode_parse() {
        for v in [NccVariant::Variance, NccVariant::Mean, NccVariant::Min] {
            assert_eq!(v.to_string().parse::<NccVariant>().unwrap(), v);
        }
        for m in [NccGradMode::FiniteDiff, NccGradMode::FrozenNormals, NccGradMode::Analytic] {
            assert_eq!(m.to_string().parse::<NccGradMode>().unwrap(), m);
        }
    }
}
