//! Independent reference implementations and fixtures shared by the
//! integration tests.

#![allow(dead_code)]

use pccomp::{Point, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform points in `[-1, 1]^3`.
pub fn uniform_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| Point::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect(),
    )
    .unwrap()
}

/// Points on a coarse integer lattice, so distance ties and duplicates are common.
pub fn lattice_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| {
                Point::new(
                    rng.random_range(-3..=3) as f64,
                    rng.random_range(-3..=3) as f64,
                    rng.random_range(-3..=3) as f64,
                )
            })
            .collect(),
    )
    .unwrap()
}

/// Smooth height field `z = a x^2 + b y^2 + c xy` over the unit square.
pub fn quadric_patch(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    let (a, b, c) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    PointCloud::new(
        (0..n)
            .map(|_| {
                let (x, y) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
                Point::new(x, y, a * x * x + b * y * y + c * x * y)
            })
            .collect(),
    )
    .unwrap()
}

pub fn sq(a: &Point, b: &Point) -> f64 {
    (a - b).norm_squared()
}

/// Full sort of every target by (squared distance, index); first k kept.
pub fn knn_oracle(query: &PointCloud, target: &PointCloud, k: usize) -> Vec<Vec<usize>> {
    query
        .iter()
        .map(|q| {
            let mut all: Vec<(f64, usize)> = target.iter().enumerate().map(|(j, t)| (sq(q, t), j)).collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            all.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// Greedy max-min selection recomputing every distance to the selected set.
pub fn fps_oracle(cloud: &PointCloud, m: usize, seed: usize) -> Vec<usize> {
    let mut chosen = vec![seed];
    while chosen.len() < m {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..cloud.len() {
            if chosen.contains(&j) {
                continue;
            }
            let d = chosen.iter().map(|&c| sq(&cloud[j], &cloud[c])).fold(f64::INFINITY, f64::min);
            match best {
                Some((_, bd)) if d <= bd => {}
                _ => best = Some((j, d)),
            }
        }
        chosen.push(best.unwrap().0);
    }
    chosen
}

/// Mean nearest-neighbor distance from `a` into `b` via the pairwise matrix.
pub fn ucd_oracle(a: &PointCloud, b: &PointCloud, squared: bool) -> f64 {
    let mut sum = 0.0;
    for p in a {
        let d = b.iter().map(|q| sq(p, q)).fold(f64::INFINITY, f64::min);
        sum += if squared { d } else { d.sqrt() };
    }
    sum / a.len() as f64
}

/// Random proper rotation from a normalized quaternion.
pub fn random_rotation(rng: &mut ChaCha8Rng) -> nalgebra::Rotation3<f64> {
    let q = nalgebra::Quaternion::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    nalgebra::UnitQuaternion::from_quaternion(q).to_rotation_matrix()
}
