//! Point-cloud substrate: the cloud type, exact k-nearest-neighbor search and
//! farthest point sampling.
//!
//! Every search here is brute force over squared Euclidean distances in `f64`.
//! Orderings are total: distances first, then ascending index, so results do
//! not depend on the sort algorithm or on platform float quirks.

use std::cmp::Ordering;
use std::ops::Index;

use nalgebra::{DMatrix, Vector3};

use crate::error::{Error, Result};

/// A 3D point (or a 3-vector attached to one).
pub type Point = Vector3<f64>;

/// Ordered list of finite 3D points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    /// Builds a cloud, rejecting NaN and infinite coordinates.
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { points })
    }

    pub fn from_arrays(points: &[[f64; 3]]) -> Result<Self> {
        Self::new(points.iter().map(|p| Point::new(p[0], p[1], p[2])).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point> {
        self.points.iter()
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    /// Gathers the points at `indices`, in that order (duplicates kept).
    pub fn gather(&self, indices: &[usize]) -> Result<PointCloud> {
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            out.push(*self.points.get(i).ok_or(Error::IndexOutOfBounds {
                index: i,
                len: self.len(),
            })?);
        }
        Ok(PointCloud { points: out })
    }

    /// Concatenates two clouds.
    pub fn concat(&self, other: &PointCloud) -> PointCloud {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        PointCloud { points }
    }

    /// Coordinates flattened as `[x0, y0, z0, x1, ...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }

    /// Inverse of [`PointCloud::to_flat`]. Panics if the length is not a multiple of 3.
    pub fn from_flat(flat: &[f64]) -> Result<PointCloud> {
        assert_eq!(flat.len() % 3, 0, "flat coordinate buffer must have length 3n");
        PointCloud::new(
            flat.chunks_exact(3)
                .map(|c| Point::new(c[0], c[1], c[2]))
                .collect(),
        )
    }

    pub(crate) fn points_mut(&mut self) -> &mut [Point] {
        &mut self.points
    }

    pub(crate) fn from_points_unchecked(points: Vec<Point>) -> PointCloud {
        PointCloud { points }
    }
}

impl Index<usize> for PointCloud {
    type Output = Point;

    fn index(&self, i: usize) -> &Point {
        &self.points[i]
    }
}

impl<'a> IntoIterator for &'a PointCloud {
    type Item = &'a Point;
    type IntoIter = std::slice::Iter<'a, Point>;

    fn into_iter(self) -> Self::IntoIter {
        self.points.iter()
    }
}

/// The k nearest target points of one query point.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub center_index: usize,
    /// Ascending by distance, ties by ascending index.
    pub neighbor_indices: Vec<usize>,
    /// Squared distances aligned with `neighbor_indices`.
    pub sq_distances: Vec<f64>,
}

/// Indices chosen by farthest point sampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSet {
    pub indices: Vec<usize>,
    pub seed_index: usize,
}

#[inline]
pub fn sq_dist(a: &Point, b: &Point) -> f64 {
    let d = a - b;
    d.x * d.x + d.y * d.y + d.z * d.z
}

#[inline]
fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Exact k-nearest neighbors of every query point within `target`.
///
/// When `target` has fewer than `k` points, every target point is returned.
pub fn knn(query: &PointCloud, target: &PointCloud, k: usize) -> Result<Vec<NeighborList>> {
    if k == 0 {
        return Err(Error::InvalidK(k));
    }
    if target.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let k = k.min(target.len());
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(target.len());
    Ok(query
        .iter()
        .enumerate()
        .map(|(qi, q)| {
            scratch.clear();
            scratch.extend(target.iter().enumerate().map(|(j, t)| (sq_dist(q, t), j)));
            if k < scratch.len() {
                scratch.select_nth_unstable_by(k - 1, by_distance_then_index);
                scratch.truncate(k);
            }
            scratch.sort_unstable_by(by_distance_then_index);
            NeighborList {
                center_index: qi,
                neighbor_indices: scratch.iter().map(|&(_, j)| j).collect(),
                sq_distances: scratch.iter().map(|&(d, _)| d).collect(),
            }
        })
        .collect())
}

/// Index and squared distance of the nearest target point (lowest index on ties).
#[inline]
pub fn nearest(query: &Point, target: &PointCloud) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, t) in target.iter().enumerate() {
        let d = sq_dist(query, t);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Greedy max-min subset selection starting from `seed_index`.
///
/// Each step picks the unselected point whose distance to the selected set is
/// largest, lowest index first on ties.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize, seed_index: usize) -> Result<SampleSet> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if m == 0 {
        return Err(Error::InvalidK(m));
    }
    if m > cloud.len() {
        return Err(Error::SampleTooLarge {
            requested: m,
            available: cloud.len(),
        });
    }
    if seed_index >= cloud.len() {
        return Err(Error::IndexOutOfBounds {
            index: seed_index,
            len: cloud.len(),
        });
    }

    let n = cloud.len();
    let mut min_dist = vec![f64::INFINITY; n];
    let mut selected = vec![false; n];
    let mut indices = Vec::with_capacity(m);
    let mut current = seed_index;
    loop {
        indices.push(current);
        selected[current] = true;
        if indices.len() == m {
            break;
        }
        let c = cloud[current];
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if selected[j] {
                continue;
            }
            let d = sq_dist(&cloud[j], &c);
            if d < min_dist[j] {
                min_dist[j] = d;
            }
            if best.is_none_or(|(_, bd)| min_dist[j] > bd) {
                best = Some((j, min_dist[j]));
            }
        }
        current = best.expect("m <= n leaves an unselected point").0;
    }
    Ok(SampleSet {
        indices,
        seed_index,
    })
}

/// Dense matrix of squared distances, entry `(i, j)` = `|a[i] - b[j]|^2`.
pub fn pairwise_sq_dist(a: &PointCloud, b: &PointCloud) -> Result<DMatrix<f64>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| sq_dist(&a[i], &b[j])))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(p: &[[f64; 3]]) -> PointCloud {
        PointCloud::from_arrays(p).unwrap()
    }

    #[test]
    fn knn_sorted_by_distance() {
        let q = cloud(&[[0.0, 0.0, 0.0]]);
        let t = cloud(&[[3.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let nn = knn(&q, &t, 2).unwrap();
        assert_eq!(nn[0].neighbor_indices, vec![1, 2]);
    }

    #[test]
    fn knn_self_is_nearest() {
        let p = cloud(&[[0.3, -1.2, 4.0]]);
        let nn = knn(&p, &p, 1).unwrap();
        assert_eq!(nn[0].neighbor_indices, vec![0]);
        assert_eq!(nn[0].sq_distances, vec![0.0]);
    }

    #[test]
    fn knn_tie_goes_to_lower_index() {
        let q = cloud(&[[0.0, 0.0, 0.0]]);
        let t = cloud(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
        assert_eq!(knn(&q, &t, 1).unwrap()[0].neighbor_indices, vec![0]);
    }

    #[test]
    fn knn_clamps_k_to_target_size() {
        let q = cloud(&[[0.0, 0.0, 0.0]]);
        let t = cloud(&[[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert_eq!(knn(&q, &t, 5).unwrap()[0].neighbor_indices, vec![0, 1]);
    }

    #[test]
    fn knn_errors() {
        let q = cloud(&[[0.0, 0.0, 0.0]]);
        let empty = PointCloud::default();
        assert_eq!(knn(&q, &empty, 1).unwrap_err().to_string(), "empty target cloud");
        assert!(knn(&q, &q, 0).unwrap_err().to_string().starts_with("invalid k"));
    }

    #[test]
    fn fps_picks_farthest_first() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [10.0, 0.0, 0.0]]);
        assert_eq!(farthest_point_sample(&c, 2, 0).unwrap().indices, vec![0, 3]);
    }

    #[test]
    fn fps_greedy_order() {
        let c = cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let s = farthest_point_sample(&c, 3, 0).unwrap();
        assert_eq!(s.indices, vec![0, 1, 2]);
        assert_eq!(s.seed_index, 0);
    }

    #[test]
    fn fps_full_sample_is_permutation() {
        let c = cloud(&[[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.5, 0.2, 0.1]]);
        let mut s = farthest_point_sample(&c, 4, 2).unwrap().indices;
        assert_eq!(s[0], 2);
        s.sort();
        assert_eq!(s, vec![0, 1, 2, 3]);
    }

    #[test]
    fn fps_rejects_oversized_sample() {
        let c = cloud(&[[0.0, 0.0, 0.0]]);
        let err = farthest_point_sample(&c, 2, 0).unwrap_err();
        assert!(err.to_string().starts_with("sample larger than cloud"));
    }

    #[test]
    fn pairwise_values() {
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[3.0, 4.0, 0.0]]);
        assert_eq!(pairwise_sq_dist(&a, &b).unwrap()[(0, 0)], 25.0);
        let c = cloud(&[[1.0, 0.0, 0.0]]);
        assert_eq!(pairwise_sq_dist(&c, &c).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn pairwise_self_is_symmetric_with_zero_diagonal() {
        let a = cloud(&[[0.1, 0.2, 0.3], [-1.0, 2.0, 0.5], [4.0, 4.0, 4.0]]);
        let d = pairwise_sq_dist(&a, &a).unwrap();
        for i in 0..3 {
            assert_eq!(d[(i, i)], 0.0);
            for j in 0..3 {
                assert_eq!(d[(i, j)], d[(j, i)]);
            }
        }
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            PointCloud::from_arrays(&[[0.0, 0.0, 0.0], [f64::NAN, 0.0, 0.0]]),
            Err(Error::NonFinite(1))
        ));
    }
}
