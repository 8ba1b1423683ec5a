//! Synthetic shapes sampled on analytic surfaces, and simulated occlusion.
//!
//! Shapes are built directly in normalized coordinates: every primitive fits
//! the cube `[-0.5, 0.5]^3` with its largest extent equal to 1.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

/// Fewest points an occluded cloud may keep.
pub const MIN_PARTIAL_POINTS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    /// Unit square in the `z = 0` plane.
    Plane,
    /// Radius 0.5 at the origin.
    Sphere,
    /// Radius 0.25, height 1, axis along z, capped.
    Cylinder,
    /// Closed box of size 1 x 0.6 x 0.4.
    Box,
    /// Table top on four legs; surface of the union of five boxes.
    Table,
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Primitive::Plane => "plane",
            Primitive::Sphere => "sphere",
            Primitive::Cylinder => "cylinder",
            Primitive::Box => "box",
            Primitive::Table => "table",
        })
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plane" => Ok(Primitive::Plane),
            "sphere" => Ok(Primitive::Sphere),
            "cylinder" => Ok(Primitive::Cylinder),
            "box" => Ok(Primitive::Box),
            "table" => Ok(Primitive::Table),
            other => Err(Error::InvalidParameter(format!("unknown primitive `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeSpec {
    pub primitive: Primitive,
    pub n_points: usize,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: Point,
    hi: Point,
}

impl Aabb {
    fn new(lo: [f64; 3], hi: [f64; 3]) -> Self {
        Aabb {
            lo: Point::from(lo),
            hi: Point::from(hi),
        }
    }

    fn contains_closed(&self, p: &Point) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] <= self.hi[a])
    }

    /// `(fixed axis, fixed value, area)` for each of the six faces.
    fn faces(&self) -> [(usize, f64, f64); 6] {
        let e = self.hi - self.lo;
        let mut out = [(0, 0.0, 0.0); 6];
        for a in 0..3 {
            let area = e[(a + 1) % 3] * e[(a + 2) % 3];
            out[2 * a] = (a, self.lo[a], area);
            out[2 * a + 1] = (a, self.hi[a], area);
        }
        out
    }
}

/// `n` stratified samples in the unit square: one per randomly chosen cell
/// of a `g x g` grid, jittered inside the cell.
fn stratified_square(n: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    if n == 0 {
        return Vec::new();
    }
    let g = (n as f64).sqrt().ceil() as usize;
    let mut cells: Vec<usize> = (0..g * g).collect();
    cells.shuffle(rng);
    cells.truncate(n);
    cells.sort_unstable();
    let inv = 1.0 / g as f64;
    cells
        .into_iter()
        .map(|c| {
            let (i, j) = (c / g, c % g);
            ((i as f64 + rng.random::<f64>()) * inv, (j as f64 + rng.random::<f64>()) * inv)
        })
        .collect()
}

/// Splits `n` into integer counts proportional to `weights` (largest remainder).
fn allocate(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..weights.len()).collect();
    rest.sort_by(|&a, &b| {
        let fa = exact[a] - counts[a] as f64;
        let fb = exact[b] - counts[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let missing = n - counts.iter().sum::<usize>();
    for &i in rest.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

fn sample_boxes(boxes: &[Aabb], n: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let faces: Vec<(usize, usize, f64, f64)> = boxes
        .iter()
        .enumerate()
        .flat_map(|(b, bx)| bx.faces().map(|(a, v, area)| (b, a, v, area)))
        .collect();
    let areas: Vec<f64> = faces.iter().map(|f| f.3).collect();
    let mut budget = n;
    loop {
        let counts = allocate(budget, &areas);
        let mut pts = Vec::with_capacity(budget);
        for (&(b, axis, value, _), &count) in faces.iter().zip(&counts) {
            let bx = &boxes[b];
            let (u_ax, v_ax) = ((axis + 1) % 3, (axis + 2) % 3);
            for (u, v) in stratified_square(count, rng) {
                let mut p = Point::zeros();
                p[axis] = value;
                p[u_ax] = bx.lo[u_ax] + u * (bx.hi[u_ax] - bx.lo[u_ax]);
                p[v_ax] = bx.lo[v_ax] + v * (bx.hi[v_ax] - bx.lo[v_ax]);
                let hidden = boxes
                    .iter()
                    .enumerate()
                    .any(|(o, other)| o != b && other.contains_closed(&p));
                if !hidden {
                    pts.push(p);
                }
            }
        }
        if pts.len() >= n {
            // Drop a random surplus, keeping the original order of the rest.
            let mut keep: Vec<usize> = (0..pts.len()).collect();
            keep.shuffle(rng);
            keep.truncate(n);
            keep.sort_unstable();
            return keep.into_iter().map(|i| pts[i]).collect();
        }
        budget = budget * 5 / 4 + 1;
    }
}

const TABLE_TOP: ([f64; 3], [f64; 3]) = ([-0.5, -0.3, 0.19], [0.5, 0.3, 0.25]);
const TABLE_LEG: ([f64; 2], [f64; 2]) = ([0.40, 0.20], [0.46, 0.26]);

fn table_boxes() -> Vec<Aabb> {
    let mut boxes = vec![Aabb::new(TABLE_TOP.0, TABLE_TOP.1)];
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            let (xa, xb) = (sx * TABLE_LEG.0[0], sx * TABLE_LEG.1[0]);
            let (ya, yb) = (sy * TABLE_LEG.0[1], sy * TABLE_LEG.1[1]);
            boxes.push(Aabb::new(
                [xa.min(xb), ya.min(yb), -0.25],
                [xa.max(xb), ya.max(yb), TABLE_TOP.0[2]],
            ));
        }
    }
    boxes
}

/// Deterministic, roughly uniform surface sample of a primitive.
pub fn generate_shape(spec: &ShapeSpec) -> Result<PointCloud> {
    if spec.n_points < 8 {
        return Err(Error::InvalidParameter(format!(
            "shape needs at least 8 points, got {}",
            spec.n_points
        )));
    }
    let n = spec.n_points;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let points = match spec.primitive {
        Primitive::Plane => stratified_square(n, &mut rng)
            .into_iter()
            .map(|(u, v)| Point::new(u - 0.5, v - 0.5, 0.0))
            .collect(),
        Primitive::Sphere => {
            // Uniform in z is uniform in area; stratify z, randomize azimuth.
            (0..n)
                .map(|i| {
                    let z = -1.0 + 2.0 * (i as f64 + rng.random::<f64>()) / n as f64;
                    let phi = std::f64::consts::TAU * rng.random::<f64>();
                    let r = (1.0 - z * z).max(0.0).sqrt();
                    0.5 * Point::new(r * phi.cos(), r * phi.sin(), z)
                })
                .collect()
        }
        Primitive::Cylinder => {
            let (radius, half_h) = (0.25, 0.5);
            let lateral = std::f64::consts::TAU * radius * 2.0 * half_h;
            let cap = std::f64::consts::PI * radius * radius;
            let counts = allocate(n, &[lateral, cap, cap]);
            let mut pts = Vec::with_capacity(n);
            for (u, v) in stratified_square(counts[0], &mut rng) {
                let phi = std::f64::consts::TAU * u;
                pts.push(Point::new(radius * phi.cos(), radius * phi.sin(), -half_h + 2.0 * half_h * v));
            }
            for (cap_idx, z) in [(1, -half_h), (2, half_h)] {
                for (u, v) in stratified_square(counts[cap_idx], &mut rng) {
                    let (r, phi) = (radius * u.sqrt(), std::f64::consts::TAU * v);
                    pts.push(Point::new(r * phi.cos(), r * phi.sin(), z));
                }
            }
            pts
        }
        Primitive::Box => sample_boxes(&[Aabb::new([-0.5, -0.3, -0.2], [0.5, 0.3, 0.2])], n, &mut rng),
        Primitive::Table => sample_boxes(&table_boxes(), n, &mut rng),
    };
    PointCloud::new(points)
}

/// Signed distance-like residual of `p` from the primitive's surface; zero on
/// the surface. Used by tests and diagnostics.
pub fn surface_residual(primitive: Primitive, p: &Point) -> f64 {
    fn box_residual(b: &Aabb, p: &Point) -> f64 {
        // Distance to the nearest face plane for points inside or on the box,
        // distance to the box otherwise.
        let mut outside = Point::zeros();
        let mut inside = f64::INFINITY;
        for a in 0..3 {
            outside[a] = (b.lo[a] - p[a]).max(p[a] - b.hi[a]).max(0.0);
            inside = inside.min((p[a] - b.lo[a]).abs()).min((b.hi[a] - p[a]).abs());
        }
        if outside.norm() > 0.0 {
            outside.norm()
        } else {
            inside
        }
    }
    match primitive {
        Primitive::Plane => p.z.abs(),
        Primitive::Sphere => (p.norm() - 0.5).abs(),
        Primitive::Cylinder => {
            let rho = (p.x * p.x + p.y * p.y).sqrt();
            let side = (rho - 0.25).abs().max((p.z.abs() - 0.5).max(0.0));
            let cap = (p.z.abs() - 0.5).abs().max((rho - 0.25).max(0.0));
            side.min(cap)
        }
        Primitive::Box => box_residual(&Aabb::new([-0.5, -0.3, -0.2], [0.5, 0.3, 0.2]), p),
        Primitive::Table => table_boxes()
            .iter()
            .map(|b| box_residual(b, p))
            .fold(f64::INFINITY, f64::min),
    }
}

/// Region removed by an occluder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OcclusionRegion {
    /// Removes points with `normal . p > offset`.
    HalfSpace { normal: Point, offset: f64 },
    /// Removes points with `|p - center| < radius`.
    Hole { center: Point, radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcclusionSpec {
    pub region: OcclusionRegion,
    /// When set, the offset or radius is recalibrated so that exactly
    /// `round(fraction * n)` points are removed (deepest first, ties by index).
    pub removal_fraction: Option<f64>,
}

/// Kept and removed indices of an occluded cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Occluded {
    pub partial: PointCloud,
    pub kept: Vec<usize>,
    pub removed: Vec<usize>,
}

/// Removes the occluded points. Both index lists stay in original order.
pub fn occlude_split(cloud: &PointCloud, spec: &OcclusionSpec) -> Result<Occluded> {
    let n = cloud.len();
    // Larger depth means deeper inside the removed region.
    let depth: Vec<f64> = match spec.region {
        OcclusionRegion::HalfSpace { normal, offset } => {
            let unit = normal.try_normalize(0.0).ok_or_else(|| {
                Error::InvalidParameter("half-space normal must be nonzero".into())
            })?;
            let scale = normal.norm();
            cloud.iter().map(|p| unit.dot(p) - offset / scale).collect()
        }
        OcclusionRegion::Hole { center, radius } => cloud.iter().map(|p| radius - (p - center).norm()).collect(),
    };
    let mut removed_mask = vec![false; n];
    match spec.removal_fraction {
        Some(f) => {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidParameter(format!("removal fraction {f} outside [0, 1]")));
            }
            let count = (f * n as f64).round() as usize;
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| depth[b].total_cmp(&depth[a]).then(a.cmp(&b)));
            for &i in order.iter().take(count) {
                removed_mask[i] = true;
            }
        }
        None => {
            for (m, d) in removed_mask.iter_mut().zip(&depth) {
                *m = *d > 0.0;
            }
        }
    }
    let (removed, kept): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| removed_mask[i]);
    if kept.len() < MIN_PARTIAL_POINTS {
        return Err(Error::OverOccluded {
            remaining: kept.len(),
            minimum: MIN_PARTIAL_POINTS,
        });
    }
    Ok(Occluded {
        partial: cloud.gather(&kept)?,
        kept,
        removed,
    })
}

pub fn occlude(cloud: &PointCloud, spec: &OcclusionSpec) -> Result<PointCloud> {
    Ok(occlude_split(cloud, spec)?.partial)
}
