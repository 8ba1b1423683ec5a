//! Point-set distances: unidirectional and bidirectional Chamfer, directed
//! Hausdorff, region-aware Chamfer and minimal matching distance, with
//! analytic gradients.
//!
//! Gradients hold nearest-neighbor assignments and region memberships fixed,
//! so they are exact wherever those assignments are stable. Nearest-neighbor
//! ties resolve to the lower target index, matching [`crate::geometry::knn`].
//! Scalars are accumulated sequentially in index order so that repeated calls
//! and composed calls (`cd` vs. two `ucd`s) agree bit for bit.

use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, knn, nearest, Point, PointCloud, SampleSet};

/// Which per-pair distance enters a Chamfer mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Norm {
    /// `|x - y|`, the form used for losses.
    #[default]
    L2,
    /// `|x - y|^2`, the form used for reported metrics.
    SquaredL2,
}

impl Norm {
    pub const LOSS_DEFAULT: Norm = Norm::L2;
    pub const METRIC_DEFAULT: Norm = Norm::SquaredL2;

    #[inline]
    pub fn of_sq(self, d2: f64) -> f64 {
        match self {
            Norm::L2 => d2.sqrt(),
            Norm::SquaredL2 => d2,
        }
    }

    /// Gradient of the pair distance w.r.t. `x`, given `diff = x - y`.
    /// At coincidence the L2 branch uses the zero subgradient.
    #[inline]
    pub fn grad(self, diff: &Point, d2: f64) -> Point {
        match self {
            Norm::L2 if d2 > 0.0 => diff / d2.sqrt(),
            Norm::L2 => Point::zeros(),
            Norm::SquaredL2 => 2.0 * diff,
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::L2 => "l2",
            Norm::SquaredL2 => "sq-l2",
        })
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(Norm::L2),
            "sq-l2" | "squared-l2" | "l2sq" => Ok(Norm::SquaredL2),
            other => Err(Error::InvalidParameter(format!(
                "unknown norm `{other}` (expected l2 or sq-l2)"
            ))),
        }
    }
}

/// Per-point gradient of a scalar w.r.t. the coordinates of one cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField(Vec<Point>);

impl GradientField {
    pub fn zeros(n: usize) -> Self {
        GradientField(vec![Point::zeros(); n])
    }

    pub fn from_rows(rows: Vec<Point>) -> Self {
        GradientField(rows)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn rows(&self) -> &[Point] {
        &self.0
    }

    pub fn into_rows(self) -> Vec<Point> {
        self.0
    }

    /// `self += weight * other`.
    pub fn add_scaled(&mut self, other: &GradientField, weight: f64) {
        assert_eq!(self.len(), other.len(), "gradient fields differ in length");
        if weight == 0.0 {
            return;
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += weight * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.0 {
            *a *= factor;
        }
    }

    /// Largest absolute coordinate.
    pub fn max_abs(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|r| r.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_all_finite(&self) -> bool {
        self.0.iter().all(|r| r.iter().all(|v| v.is_finite()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.0.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }
}

impl Index<usize> for GradientField {
    type Output = Point;

    fn index(&self, i: usize) -> &Point {
        &self.0[i]
    }
}

impl IndexMut<usize> for GradientField {
    fn index_mut(&mut self, i: usize) -> &mut Point {
        &mut self.0[i]
    }
}

fn check_nonempty(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if b.is_empty() {
        return Err(Error::EmptyTarget);
    }
    Ok(())
}

/// Unidirectional Chamfer distance: mean over `source` of the distance to the
/// nearest `target` point.
pub fn ucd(source: &PointCloud, target: &PointCloud, norm: Norm) -> Result<f64> {
    check_nonempty(source, target)?;
    let mut sum = 0.0;
    for p in source {
        sum += norm.of_sq(nearest(p, target).1);
    }
    Ok(sum / source.len() as f64)
}

/// `ucd(a, b) + ucd(b, a)`.
pub fn cd(a: &PointCloud, b: &PointCloud, norm: Norm) -> Result<f64> {
    Ok(ucd(a, b, norm)? + ucd(b, a, norm)?)
}

/// Directed Hausdorff distance: the largest nearest-neighbor L2 distance from
/// `source` into `target`.
pub fn uhd(source: &PointCloud, target: &PointCloud) -> Result<f64> {
    check_nonempty(source, target)?;
    Ok(source
        .iter()
        .map(|p| nearest(p, target).1)
        .fold(0.0_f64, f64::max)
        .sqrt())
}

/// Smallest `cd(prediction, example)` over the example set.
pub fn mmd(prediction: &PointCloud, examples: &[PointCloud], norm: Norm) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyExampleSet);
    }
    let mut best = f64::INFINITY;
    for ex in examples {
        best = best.min(cd(prediction, ex, norm)?);
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UcdGradient {
    pub value: f64,
    pub wrt_source: GradientField,
    pub wrt_target: GradientField,
}

/// UCD value together with its gradient w.r.t. both clouds.
pub fn grad_ucd(source: &PointCloud, target: &PointCloud, norm: Norm) -> Result<UcdGradient> {
    check_nonempty(source, target)?;
    let inv_n = 1.0 / source.len() as f64;
    let mut sum = 0.0;
    let mut wrt_source = GradientField::zeros(source.len());
    let mut wrt_target = GradientField::zeros(target.len());
    for (i, p) in source.iter().enumerate() {
        let (j, d2) = nearest(p, target);
        sum += norm.of_sq(d2);
        let g = norm.grad(&(p - target[j]), d2) * inv_n;
        wrt_source[i] += g;
        wrt_target[j] -= g;
    }
    Ok(UcdGradient {
        value: sum / source.len() as f64,
        wrt_source,
        wrt_target,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdGradient {
    pub value: f64,
    pub wrt_a: GradientField,
    pub wrt_b: GradientField,
}

pub fn grad_cd(a: &PointCloud, b: &PointCloud, norm: Norm) -> Result<CdGradient> {
    let ab = grad_ucd(a, b, norm)?;
    let ba = grad_ucd(b, a, norm)?;
    let mut wrt_a = ab.wrt_source;
    wrt_a.add_scaled(&ba.wrt_target, 1.0);
    let mut wrt_b = ab.wrt_target;
    wrt_b.add_scaled(&ba.wrt_source, 1.0);
    Ok(CdGradient {
        value: ab.value + ba.value,
        wrt_a,
        wrt_b,
    })
}

/// Skeleton points sampled from the partial cloud and the matched regions
/// around them in both clouds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionSet {
    pub skeleton: SampleSet,
    /// Sorted, deduplicated indices into the partial cloud.
    pub region_p: Vec<usize>,
    /// Sorted, deduplicated indices into the prediction.
    pub region_c: Vec<usize>,
    pub k_region: usize,
}

/// Region-aware Chamfer settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RcdParams {
    /// Number of skeleton points.
    pub m: usize,
    /// Neighbors gathered around each skeleton point, in each cloud.
    pub k_region: usize,
    pub seed_index: usize,
    pub norm: Norm,
}

impl Default for RcdParams {
    fn default() -> Self {
        RcdParams {
            m: 64,
            k_region: 32,
            seed_index: 0,
            norm: Norm::LOSS_DEFAULT,
        }
    }
}

fn union_of(lists: impl IntoIterator<Item = Vec<usize>>) -> Vec<usize> {
    let mut all: Vec<usize> = lists.into_iter().flatten().collect();
    all.sort_unstable();
    all.dedup();
    all
}

/// Samples `m` skeleton points from `partial` by FPS and gathers the union of
/// their `k_region` nearest neighbors in `partial` and in `prediction`.
pub fn build_regions(
    partial: &PointCloud,
    prediction: &PointCloud,
    m: usize,
    k_region: usize,
    seed_index: usize,
) -> Result<RegionSet> {
    if k_region == 0 {
        return Err(Error::EmptyRegion);
    }
    if prediction.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let skeleton = farthest_point_sample(partial, m, seed_index)?;
    let centers = partial.gather(&skeleton.indices)?;
    let region_p = union_of(
        knn(&centers, partial, k_region)?
            .into_iter()
            .map(|n| n.neighbor_indices),
    );
    let region_c = union_of(
        knn(&centers, prediction, k_region)?
            .into_iter()
            .map(|n| n.neighbor_indices),
    );
    Ok(RegionSet {
        skeleton,
        region_p,
        region_c,
        k_region,
    })
}

fn check_regions(partial: &PointCloud, prediction: &PointCloud, regions: &RegionSet) -> Result<()> {
    if regions.k_region == 0 || regions.region_p.is_empty() || regions.region_c.is_empty() {
        return Err(Error::EmptyRegion);
    }
    if regions.region_p.iter().any(|&i| i >= partial.len()) {
        return Err(Error::RegionMismatch("region_p indexes past the partial cloud".into()));
    }
    if regions.region_c.iter().any(|&i| i >= prediction.len()) {
        return Err(Error::RegionMismatch("region_c indexes past the prediction".into()));
    }
    Ok(())
}

/// Region-aware Chamfer distance: Chamfer distance between the gathered
/// regions. Prediction points outside `region_c` do not contribute.
pub fn rcd(
    partial: &PointCloud,
    prediction: &PointCloud,
    regions: &RegionSet,
    norm: Norm,
) -> Result<f64> {
    check_regions(partial, prediction, regions)?;
    let rp = partial.gather(&regions.region_p)?;
    let rc = prediction.gather(&regions.region_c)?;
    cd(&rp, &rc, norm)
}

/// RCD value and its gradient w.r.t. the prediction. Rows outside `region_c`
/// are exactly zero.
pub fn grad_rcd(
    partial: &PointCloud,
    prediction: &PointCloud,
    regions: &RegionSet,
    norm: Norm,
) -> Result<(f64, GradientField)> {
    check_regions(partial, prediction, regions)?;
    let rp = partial.gather(&regions.region_p)?;
    let rc = prediction.gather(&regions.region_c)?;
    let g = grad_cd(&rp, &rc, norm)?;
    let mut field = GradientField::zeros(prediction.len());
    for (local, &global) in regions.region_c.iter().enumerate() {
        field[global] = g.wrt_b[local];
    }
    Ok((g.value, field))
}

/// Builds regions from `params` and evaluates RCD.
pub fn rcd_with(partial: &PointCloud, prediction: &PointCloud, params: &RcdParams) -> Result<f64> {
    let regions = build_regions(partial, prediction, params.m, params.k_region, params.seed_index)?;
    rcd(partial, prediction, &regions, params.norm)
}

/// Builds regions from `params` and returns RCD with its prediction gradient.
pub fn grad_rcd_with(
    partial: &PointCloud,
    prediction: &PointCloud,
    params: &RcdParams,
) -> Result<(f64, GradientField)> {
    let regions = build_regions(partial, prediction, params.m, params.k_region, params.seed_index)?;
    grad_rcd(partial, prediction, &regions, params.norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(p: &[[f64; 3]]) -> PointCloud {
        PointCloud::from_arrays(p).unwrap()
    }

    #[test]
    fn ucd_hand_values() {
        let s = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let t = cloud(&[[0.0, 0.0, 0.0]]);
        assert_eq!(ucd(&s, &t, Norm::L2).unwrap(), 0.5);
        assert_eq!(ucd(&s, &t, Norm::SquaredL2).unwrap(), 0.5);
        assert_eq!(ucd(&s, &s, Norm::L2).unwrap(), 0.0);
    }

    #[test]
    fn cd_hand_value() {
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[1.0, 0.0, 0.0]]);
        assert_eq!(cd(&a, &b, Norm::L2).unwrap(), 2.0);
        assert_eq!(cd(&a, &a, Norm::L2).unwrap(), 0.0);
    }

    #[test]
    fn uhd_hand_value() {
        let s = cloud(&[[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]]);
        let t = cloud(&[[0.0, 0.0, 0.0]]);
        assert_eq!(uhd(&s, &t).unwrap(), 5.0);
        assert_eq!(uhd(&s, &s).unwrap(), 0.0);
    }

    #[test]
    fn empty_inputs_are_errors() {
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let e = PointCloud::default();
        assert!(ucd(&e, &a, Norm::L2).is_err());
        assert!(ucd(&a, &e, Norm::L2).is_err());
        assert!(uhd(&a, &e).is_err());
        assert!(matches!(mmd(&a, &[], Norm::L2), Err(Error::EmptyExampleSet)));
    }

    #[test]
    fn mmd_singleton_and_verbatim() {
        let p = cloud(&[[0.0, 0.0, 0.0], [1.0, 1.0, 0.0]]);
        let a = cloud(&[[0.2, 0.0, 0.0]]);
        assert_eq!(mmd(&p, &[a.clone()], Norm::L2).unwrap(), cd(&p, &a, Norm::L2).unwrap());
        assert_eq!(mmd(&p, &[a, p.clone()], Norm::L2).unwrap(), 0.0);
    }

    #[test]
    fn regions_pick_nearest_in_each_cloud() {
        let partial = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let pred = cloud(&[[0.0, 0.0, 0.0], [9.0, 9.0, 9.0]]);
        let r = build_regions(&partial, &pred, 1, 1, 0).unwrap();
        assert_eq!(r.region_p, vec![0]);
        assert_eq!(r.region_c, vec![0]);
    }

    #[test]
    fn full_regions_cover_everything() {
        let partial = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 1.0]]);
        let r = build_regions(&partial, &partial, 3, 3, 0).unwrap();
        assert_eq!(r.region_p, vec![0, 1, 2]);
        assert_eq!(r.region_c, vec![0, 1, 2]);
        assert_eq!(rcd(&partial, &partial, &r, Norm::L2).unwrap(), 0.0);
    }

    #[test]
    fn rcd_ignores_far_prediction_point() {
        let partial = cloud(&[[0.0, 0.0, 0.0]]);
        let pred = cloud(&[[0.0, 0.0, 0.0], [100.0, 0.0, 0.0]]);
        let r = build_regions(&partial, &pred, 1, 1, 0).unwrap();
        assert_eq!(rcd(&partial, &pred, &r, Norm::L2).unwrap(), 0.0);
        let (_, g) = grad_rcd(&partial, &pred, &r, Norm::L2).unwrap();
        assert_eq!(g[1], Point::zeros());
    }

    #[test]
    fn rcd_single_pair() {
        let partial = cloud(&[[0.0, 0.0, 0.0]]);
        let pred = cloud(&[[0.5, 0.0, 0.0]]);
        let r = build_regions(&partial, &pred, 1, 1, 0).unwrap();
        assert_eq!(rcd(&partial, &pred, &r, Norm::L2).unwrap(), 1.0);
    }

    #[test]
    fn rcd_rejects_zero_k() {
        let partial = cloud(&[[0.0, 0.0, 0.0]]);
        assert!(matches!(build_regions(&partial, &partial, 1, 0, 0), Err(Error::EmptyRegion)));
    }

    #[test]
    fn squared_ucd_gradient_single_point() {
        let source = cloud(&[[0.0, 0.0, 0.0]]);
        let pred = cloud(&[[1.0, 0.0, 0.0]]);
        let g = grad_ucd(&source, &pred, Norm::SquaredL2).unwrap();
        assert_eq!(g.wrt_target[0], Point::new(2.0, 0.0, 0.0));
    }

    #[test]
    fn coincident_gradient_is_zero() {
        let p = cloud(&[[0.0, 0.1, 0.0], [1.0, 0.0, 0.3]]);
        for norm in [Norm::L2, Norm::SquaredL2] {
            let g = grad_ucd(&p, &p, norm).unwrap();
            assert_eq!(g.wrt_target.max_abs(), 0.0);
            assert_eq!(g.wrt_source.max_abs(), 0.0);
        }
    }

    #[test]
    fn grad_cd_value_matches_forward() {
        let a = cloud(&[[0.0, 0.0, 0.0], [0.3, 0.2, 0.1]]);
        let b = cloud(&[[1.0, 0.0, 0.0], [0.2, 0.5, -0.4], [0.0, 0.0, 2.0]]);
        for norm in [Norm::L2, Norm::SquaredL2] {
            assert_eq!(grad_cd(&a, &b, norm).unwrap().value, cd(&a, &b, norm).unwrap());
        }
    }

    #[test]
    fn norm_round_trips_through_text() {
        for n in [Norm::L2, Norm::SquaredL2] {
            assert_eq!(n.to_string().parse::<Norm>().unwrap(), n);
        }
        assert!("l1".parse::<Norm>().is_err());
    }
}
