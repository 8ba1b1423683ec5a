//! Finite-difference verification of every analytic gradient in the crate.
//!
//! Distances are checked against surrogates that hold nearest-neighbor
//! assignments and region memberships at their base-point values, so a probe
//! can never flip a discrete choice. Terms whose discrete structure is too
//! rich to freeze by hand (latent term, composite, NCC) are differenced
//! through the real forward op; coordinates whose forward and backward
//! one-sided slopes disagree are treated as straddling an assignment switch
//! and are excluded (and counted).
//!
//! Error measure: `max_i |analytic_i - numeric_i| / max(|analytic|_inf, |numeric|_inf)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::distances::{build_regions, grad_cd, grad_rcd, grad_ucd, GradientField, Norm, RegionSet};
use crate::error::Result;
use crate::geometry::{nearest, Point, PointCloud};
use crate::losses::{composite_loss, composite_loss_value, FrozenEncoder, LossParams, LossWeights};
use crate::distances::RcdParams;
use crate::normals::{estimate_normals, grad_ncc, ncc, ncc_with_frozen_normals, NccGradMode, NccVariant};
use crate::patch::{partition, patchify, Ratio};

/// Central-difference probe step.
pub const FD_STEP: f64 = 1e-6;
/// Pass threshold on the relative error.
pub const TOLERANCE: f64 = 1e-5;
/// One-sided slope disagreement (relative to the gradient scale) above which
/// a probe is considered to have crossed an assignment switch.
const SWITCH_SCREEN: f64 = 1e-3;
/// A term fails if more than this share of probed coordinates is screened out.
pub const MAX_SCREENED_SHARE: f64 = 0.01;

pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let plus = f(&probe);
            probe[i] = x[i] - h;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Central differences plus, per coordinate, whether the one-sided slopes
/// agree to within `SWITCH_SCREEN * scale`.
pub fn screened_central_difference(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    h: f64,
    scale: f64,
) -> (Vec<f64>, Vec<bool>) {
    let base = f(x);
    let mut probe = x.to_vec();
    let mut numeric = Vec::with_capacity(x.len());
    let mut stable = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe);
        probe[i] = x[i] - h;
        let minus = f(&probe);
        probe[i] = x[i];
        let forward = (plus - base) / h;
        let backward = (base - minus) / h;
        numeric.push((plus - minus) / (2.0 * h));
        stable.push((forward - backward).abs() <= SWITCH_SCREEN * scale.max(f64::MIN_POSITIVE));
    }
    (numeric, stable)
}

/// Scale-relative max error over the coordinates selected by `mask`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], mask: Option<&[bool]>) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for i in (0..analytic.len()).filter(|&i| keep(i)) {
        worst = worst.max((analytic[i] - numeric[i]).abs());
        scale = scale.max(analytic[i].abs()).max(numeric[i].abs());
    }
    if worst == 0.0 {
        0.0
    } else {
        worst / scale
    }
}

/// Outcome of one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Check {
    pub rel_error: f64,
    pub probed: usize,
    pub screened: usize,
}

/// Aggregate over all instances of one term.
#[derive(Debug, Clone, PartialEq)]
pub struct TermReport {
    pub term: String,
    pub instances: usize,
    pub max_rel_error: f64,
    /// Seed of the instance that produced `max_rel_error`.
    pub worst_seed: u64,
    pub probed: usize,
    pub screened: usize,
}

impl TermReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE && (self.screened as f64) <= MAX_SCREENED_SHARE * self.probed as f64
    }
}

/// Terms covered by [`run_suite`].
pub const TERMS: [&str; 9] = [
    "ucd",
    "cd",
    "rcd",
    "latent",
    "composite",
    "ncc-frozen-normals",
    "ncc-analytic",
    "ncc-finite-diff",
    "ncc-modes-agree",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    pub instances: usize,
    pub base_seed: u64,
    /// Test hook: scales the analytic gradient of the named term.
    pub corrupt: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            instances: 100,
            base_seed: 0,
            corrupt: None,
        }
    }
}

fn uniform_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| Point::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()))
            .collect(),
    )
    .expect("finite")
}

/// Noisy samples of a random quadric height field over the unit square.
fn surface_cloud(rng: &mut ChaCha8Rng, n: usize, noise: f64) -> PointCloud {
    let (a, b, c) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5));
    let jitter = Normal::new(0.0, noise).expect("valid sigma");
    PointCloud::new(
        (0..n)
            .map(|_| {
                let (x, y) = (rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
                Point::new(x, y, a * x * x + b * y * y + c * x * y + jitter.sample(rng))
            })
            .collect(),
    )
    .expect("finite")
}

fn corrupted(mut g: Vec<f64>, term: &str, opts: &SuiteOptions) -> Vec<f64> {
    if opts.corrupt.as_deref() == Some(term) {
        for v in &mut g {
            *v *= 1.5;
        }
    }
    g
}

fn frozen_ucd(source: &[Point], target: &[Point], assignment: &[usize], norm: Norm) -> f64 {
    let mut sum = 0.0;
    for (p, &j) in source.iter().zip(assignment) {
        let d = p - target[j];
        sum += norm.of_sq(d.dot(&d));
    }
    sum / source.len() as f64
}

fn assignment(source: &PointCloud, target: &PointCloud) -> Vec<usize> {
    source.iter().map(|p| nearest(p, target).0).collect()
}

fn points_of(flat: &[f64]) -> Vec<Point> {
    flat.chunks_exact(3).map(|c| Point::new(c[0], c[1], c[2])).collect()
}

fn norm_for(seed: u64) -> Norm {
    if seed % 2 == 0 {
        Norm::L2
    } else {
        Norm::SquaredL2
    }
}

fn check_ucd(seed: u64, opts: &SuiteOptions) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = uniform_cloud(&mut rng, 40);
    let target = uniform_cloud(&mut rng, 50);
    let norm = norm_for(seed);
    let assign = assignment(&source, &target);
    let g = grad_ucd(&source, &target, norm)?;
    // Both sides at once: [source coords, target coords].
    let mut analytic = g.wrt_source.to_flat();
    analytic.extend(g.wrt_target.to_flat());
    let analytic = corrupted(analytic, "ucd", opts);
    let mut x = source.to_flat();
    x.extend(target.to_flat());
    let split = source.len() * 3;
    let numeric = central_difference(
        |v| frozen_ucd(&points_of(&v[..split]), &points_of(&v[split..]), &assign, norm),
        &x,
        FD_STEP,
    );
    Ok(Check {
        rel_error: max_relative_error(&analytic, &numeric, None),
        probed: x.len(),
        screened: 0,
    })
}

fn check_cd(seed: u64, opts: &SuiteOptions) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = uniform_cloud(&mut rng, 35);
    let b = uniform_cloud(&mut rng, 45);
    let norm = norm_for(seed);
    let (ab, ba) = (assignment(&a, &b), assignment(&b, &a));
    let g = grad_cd(&a, &b, norm)?;
    let analytic = corrupted(g.wrt_b.to_flat(), "cd", opts);
    let numeric = central_difference(
        |v| {
            let bp = points_of(v);
            frozen_ucd(a.points(), &bp, &ab, norm) + frozen_ucd(&bp, a.points(), &ba, norm)
        },
        &b.to_flat(),
        FD_STEP,
    );
    Ok(Check {
        rel_error: max_relative_error(&analytic, &numeric, None),
        probed: numeric.len(),
        screened: 0,
    })
}

fn frozen_rcd(partial: &PointCloud, prediction: &[Point], regions: &RegionSet, pc: &[usize], cp: &[usize], norm: Norm) -> f64 {
    let rp: Vec<Point> = regions.region_p.iter().map(|&i| partial[i]).collect();
    let rc: Vec<Point> = regions.region_c.iter().map(|&i| prediction[i]).collect();
    frozen_ucd(&rp, &rc, pc, norm) + frozen_ucd(&rc, &rp, cp, norm)
}

fn check_rcd(seed: u64, opts: &SuiteOptions) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let partial = uniform_cloud(&mut rng, 60);
    let prediction = uniform_cloud(&mut rng, 80);
    let norm = norm_for(seed);
    let regions = build_regions(&partial, &prediction, 6, 8, rng.random_range(0..partial.len()))?;
    let rp = partial.gather(&regions.region_p)?;
    let rc = prediction.gather(&regions.region_c)?;
    let (pc, cp) = (assignment(&rp, &rc), assignment(&rc, &rp));
    let (_, g) = grad_rcd(&partial, &prediction, &regions, norm)?;
    let analytic = corrupted(g.to_flat(), "rcd", opts);
    let numeric = central_difference(
        |v| frozen_rcd(&partial, &points_of(v), &regions, &pc, &cp, norm),
        &prediction.to_flat(),
        FD_STEP,
    );
    Ok(Check {
        rel_error: max_relative_error(&analytic, &numeric, None),
        probed: numeric.len(),
        screened: 0,
    })
}

struct CompositeCase {
    partial: PointCloud,
    prediction: PointCloud,
    split: crate::patch::PatchPartition,
    params: LossParams,
    encoder: FrozenEncoder,
}

fn composite_case(seed: u64) -> Result<CompositeCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let partial = surface_cloud(&mut rng, 96, 0.01);
    let noise = Normal::new(0.0, 0.03).expect("valid sigma");
    let mut pred: Vec<Point> = partial
        .iter()
        .map(|p| p + Point::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)))
        .collect();
    pred.extend(surface_cloud(&mut rng, 24, 0.05).into_points());
    let prediction = PointCloud::new(pred)?;
    let patches = patchify(&partial, 8, 12, rng.random_range(0..partial.len()))?;
    let split = partition(patches, Ratio(3, 4, 1), rng.random())?;
    let params = LossParams {
        rcd: RcdParams {
            m: 8,
            k_region: 8,
            seed_index: rng.random_range(0..1000),
            norm: norm_for(seed),
        },
        k_normal: 8,
        ncc_grad: if seed % 2 == 0 {
            NccGradMode::FiniteDiff
        } else {
            NccGradMode::Analytic
        },
        ..LossParams::default()
    };
    let encoder = FrozenEncoder::new(32, seed)?;
    Ok(CompositeCase {
        partial,
        prediction,
        split,
        params,
        encoder,
    })
}

fn check_composite(seed: u64, weights: LossWeights, term: &str, opts: &SuiteOptions) -> Result<Check> {
    let case = composite_case(seed)?;
    let report = composite_loss(&case.partial, &case.prediction, &case.split, &weights, &case.params, &case.encoder)?;
    let analytic = corrupted(report.gradient.to_flat(), term, opts);
    let scale = analytic.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let (numeric, stable) = screened_central_difference(
        |v| {
            let pred = PointCloud::from_flat(v).expect("finite probe");
            composite_loss_value(&case.partial, &pred, &case.split, &weights, &case.params, &case.encoder)
                .expect("probe evaluates")
                .total
        },
        &case.prediction.to_flat(),
        FD_STEP,
        scale,
    );
    Ok(Check {
        rel_error: max_relative_error(&analytic, &numeric, Some(&stable)),
        probed: numeric.len(),
        screened: stable.iter().filter(|s| !**s).count(),
    })
}

fn ncc_cloud(seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    surface_cloud(&mut rng, 64, 0.02)
}

fn variant_for(seed: u64) -> NccVariant {
    match seed % 3 {
        0 => NccVariant::Variance,
        1 => NccVariant::Mean,
        _ => NccVariant::Min,
    }
}

fn check_ncc_frozen(seed: u64, opts: &SuiteOptions) -> Result<Check> {
    let cloud = ncc_cloud(seed);
    let k = 8;
    let frozen = estimate_normals(&cloud, k)?;
    let (_, g) = grad_ncc(&cloud, k, NccVariant::Variance, NccGradMode::FrozenNormals)?;
    let mut analytic = corrupted(g.to_flat(), "ncc-frozen-normals", opts);
    if opts.corrupt.as_deref() == Some("ncc-frozen-normals") {
        // Scaling a zero field changes nothing; shift it instead.
        analytic.iter_mut().for_each(|v| *v += 1.0);
    }
    let numeric = central_difference(
        |v| {
            let c = PointCloud::from_flat(v).expect("finite probe");
            ncc_with_frozen_normals(&c, &frozen, NccVariant::Variance).expect("probe evaluates")
        },
        &cloud.to_flat(),
        FD_STEP,
    );
    Ok(Check {
        rel_error: max_relative_error(&analytic, &numeric, None),
        probed: numeric.len(),
        screened: 0,
    })
}

fn check_ncc_mode(seed: u64, mode: NccGradMode, term: &str, opts: &SuiteOptions) -> Result<Check> {
    let cloud = ncc_cloud(seed);
    let (k, variant) = (8, variant_for(seed));
    let (_, g) = grad_ncc(&cloud, k, variant, mode)?;
    let analytic = corrupted(g.to_flat(), term, opts);
    let scale = analytic.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let (numeric, stable) = screened_central_difference(
        |v| {
            let c = PointCloud::from_flat(v).expect("finite probe");
            ncc(&c, k, variant).expect("probe evaluates").aggregate
        },
        &cloud.to_flat(),
        FD_STEP,
        scale,
    );
    Ok(Check {
        rel_error: max_relative_error(&analytic, &numeric, Some(&stable)),
        probed: numeric.len(),
        screened: stable.iter().filter(|s| !**s).count(),
    })
}

/// The finite-difference and analytic NCC modes compute the same quantity by
/// independent routes.
fn check_ncc_modes_agree(seed: u64, opts: &SuiteOptions) -> Result<Check> {
    let cloud = ncc_cloud(seed);
    let (k, variant) = (8, variant_for(seed));
    let (_, fd) = grad_ncc(&cloud, k, variant, NccGradMode::FiniteDiff)?;
    let (_, an) = grad_ncc(&cloud, k, variant, NccGradMode::Analytic)?;
    let analytic = corrupted(an.to_flat(), "ncc-modes-agree", opts);
    Ok(Check {
        rel_error: max_relative_error(&analytic, &fd.to_flat(), None),
        probed: analytic.len(),
        screened: 0,
    })
}

/// Runs one term over `opts.instances` seeded instances.
pub fn run_term(term: &str, opts: &SuiteOptions) -> Result<TermReport> {
    let mut report = TermReport {
        term: term.to_string(),
        instances: opts.instances,
        max_rel_error: 0.0,
        worst_seed: opts.base_seed,
        probed: 0,
        screened: 0,
    };
    for i in 0..opts.instances as u64 {
        let seed = opts.base_seed.wrapping_add(i);
        let check = match term {
            "ucd" => check_ucd(seed, opts)?,
            "cd" => check_cd(seed, opts)?,
            "rcd" => check_rcd(seed, opts)?,
            "latent" => check_composite(seed, LossWeights::new(0.0, 0.0, 1.0, 0.0)?, term, opts)?,
            "composite" => check_composite(seed, LossWeights::new(1.0, 1.0, 0.5, 0.3)?, term, opts)?,
            "ncc-frozen-normals" => check_ncc_frozen(seed, opts)?,
            "ncc-analytic" => check_ncc_mode(seed, NccGradMode::Analytic, term, opts)?,
            "ncc-finite-diff" => check_ncc_mode(seed, NccGradMode::FiniteDiff, term, opts)?,
            "ncc-modes-agree" => check_ncc_modes_agree(seed, opts)?,
            other => {
                return Err(crate::error::Error::InvalidParameter(format!("unknown gradcheck term `{other}`")))
            }
        };
        if check.rel_error > report.max_rel_error {
            report.max_rel_error = check.rel_error;
            report.worst_seed = seed;
        }
        report.probed += check.probed;
        report.screened += check.screened;
    }
    Ok(report)
}

/// Every term in [`TERMS`].
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<TermReport>> {
    TERMS.iter().map(|t| run_term(t, opts)).collect()
}

/// Convenience for callers that only hold a gradient field.
pub fn field_relative_error(analytic: &GradientField, numeric: &[f64]) -> f64 {
    max_relative_error(&analytic.to_flat(), numeric, None)
}
