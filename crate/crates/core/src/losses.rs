//! Self-supervised completion losses: reconstruction and completion distances
//! against the visible and masked patch groups, a latent consistency term
//! through a frozen encoder, the NCC regularizer, and their weighted sum.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::distances::{grad_cd, grad_rcd_with, grad_ucd, GradientField, RcdParams};
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, Point, PointCloud};
use crate::normals::{grad_ncc, ncc, NccGradMode, NccVariant};
use crate::patch::{gather_group, resample_latent, Group, PatchPartition};

/// Non-negative weights of the four loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub rec: f64,
    pub com: f64,
    pub latent: f64,
    pub ncc: f64,
}

impl LossWeights {
    pub fn new(rec: f64, com: f64, latent: f64, ncc: f64) -> Result<Self> {
        let w = LossWeights { rec, com, latent, ncc };
        if w.as_array().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "loss weights must be finite and non-negative, got {w}"
            )));
        }
        Ok(w)
    }

    pub fn zero() -> Self {
        LossWeights {
            rec: 0.0,
            com: 0.0,
            latent: 0.0,
            ncc: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.rec, self.com, self.latent, self.ncc]
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rec: 1.0,
            com: 1.0,
            latent: 0.1,
            ncc: 0.1,
        }
    }
}

impl fmt::Display for LossWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.rec, self.com, self.latent, self.ncc)
    }
}

impl FromStr for LossWeights {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::InvalidParameter(format!(
                "weights need four comma-separated values, got `{s}`"
            )));
        }
        let mut v = [0.0; 4];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .parse()
                .map_err(|_| Error::InvalidParameter(format!("bad weight `{p}`")))?;
        }
        LossWeights::new(v[0], v[1], v[2], v[3])
    }
}

/// Which point-set distance the reconstruction and completion terms use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceKind {
    #[default]
    Rcd,
    Cd,
    /// Partial group to prediction only.
    Ucd,
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistanceKind::Rcd => "rcd",
            DistanceKind::Cd => "cd",
            DistanceKind::Ucd => "ucd",
        })
    }
}

impl FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rcd" => Ok(DistanceKind::Rcd),
            "cd" => Ok(DistanceKind::Cd),
            "ucd" => Ok(DistanceKind::Ucd),
            other => Err(Error::InvalidParameter(format!(
                "unknown distance `{other}` (expected rcd, cd or ucd)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Fixed random point-wise affine map with rectification, max-pooled over
/// points. Stands in for a learned encoder when evaluating the latent term.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    weights: Vec<Point>,
    bias: Vec<f64>,
    seed: u64,
}

impl FrozenEncoder {
    pub const DEFAULT_DIM: usize = 256;

    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("feature dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        let weights = (0..dim)
            .map(|_| Point::new(unit.sample(&mut rng), unit.sample(&mut rng), unit.sample(&mut rng)))
            .collect();
        let bias = (0..dim).map(|_| 0.1 * unit.sample(&mut rng)).collect();
        Ok(FrozenEncoder { weights, bias, seed })
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn encode(&self, cloud: &PointCloud) -> Result<FeatureVector> {
        Ok(self.encode_with_argmax(cloud)?.0)
    }

    /// Features plus, per feature, the point that attains the max (`None`
    /// when the feature is rectified to zero). Ties go to the lowest index.
    pub fn encode_with_argmax(&self, cloud: &PointCloud) -> Result<(FeatureVector, Vec<Option<usize>>)> {
        if cloud.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let mut values = Vec::with_capacity(self.dim());
        let mut argmax = Vec::with_capacity(self.dim());
        for (w, b) in self.weights.iter().zip(&self.bias) {
            let mut best = (0, f64::NEG_INFINITY);
            for (i, p) in cloud.iter().enumerate() {
                let a = w.dot(p) + b;
                if a > best.1 {
                    best = (i, a);
                }
            }
            if best.1 > 0.0 {
                values.push(best.1);
                argmax.push(Some(best.0));
            } else {
                values.push(0.0);
                argmax.push(None);
            }
        }
        Ok((FeatureVector(values), argmax))
    }

    pub(crate) fn weight(&self, j: usize) -> &Point {
        &self.weights[j]
    }
}

/// Quadratic within `delta`, linear beyond, C1 at the seam.
pub fn huber(x: f64, delta: f64) -> f64 {
    let a = x.abs();
    if a <= delta {
        0.5 * x * x
    } else {
        delta * (a - 0.5 * delta)
    }
}

pub fn huber_grad(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        x
    } else {
        delta * x.signum()
    }
}

/// Mean Huber penalty over feature coordinates.
pub fn loss_latent(f: &FeatureVector, f_prime: &FeatureVector, delta: f64) -> Result<f64> {
    if f.dim() != f_prime.dim() {
        return Err(Error::DimensionMismatch(f.dim(), f_prime.dim()));
    }
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter(format!("huber delta must be positive, got {delta}")));
    }
    let sum: f64 = f.0.iter().zip(&f_prime.0).map(|(a, b)| huber(a - b, delta)).sum();
    Ok(sum / f.dim() as f64)
}

/// Reconstruction loss: RCD from the visible group to the prediction.
pub fn loss_rec(g_rec: &PointCloud, prediction: &PointCloud, params: &RcdParams) -> Result<f64> {
    crate::distances::rcd_with(g_rec, prediction, params)
}

/// Completion loss: RCD from the masked group to the prediction.
pub fn loss_com(g_com: &PointCloud, prediction: &PointCloud, params: &RcdParams) -> Result<f64> {
    crate::distances::rcd_with(g_com, prediction, params)
}

/// Settings for every composite-loss term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    pub distance: DistanceKind,
    /// Skeleton and region settings; `norm` applies to all distance kinds.
    pub rcd: RcdParams,
    pub huber_delta: f64,
    pub k_normal: usize,
    pub ncc_variant: NccVariant,
    pub ncc_grad: NccGradMode,
    /// NCC is evaluated on an FPS subsample of this many prediction points;
    /// 0 uses the whole prediction.
    pub ncc_subsample: usize,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            distance: DistanceKind::Rcd,
            rcd: RcdParams::default(),
            huber_delta: 1.0,
            k_normal: 8,
            ncc_variant: NccVariant::Variance,
            ncc_grad: NccGradMode::FiniteDiff,
            ncc_subsample: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub l_rec: f64,
    pub l_com: f64,
    pub l_latent: f64,
    pub l_ncc: f64,
    pub total: f64,
    pub gradient: GradientField,
}

fn distance_term(
    group: &PointCloud,
    prediction: &PointCloud,
    params: &LossParams,
    need_grad: bool,
) -> Result<(f64, Option<GradientField>)> {
    let norm = params.rcd.norm;
    match params.distance {
        DistanceKind::Rcd => {
            let mut rcd = params.rcd;
            rcd.seed_index %= group.len().max(1);
            let (v, g) = grad_rcd_with(group, prediction, &rcd)?;
            Ok((v, need_grad.then_some(g)))
        }
        DistanceKind::Cd => {
            let g = grad_cd(group, prediction, norm)?;
            Ok((g.value, need_grad.then_some(g.wrt_b)))
        }
        DistanceKind::Ucd => {
            let g = grad_ucd(group, prediction, norm)?;
            Ok((g.value, need_grad.then_some(g.wrt_target)))
        }
    }
}

fn latent_term(
    partial: &PointCloud,
    prediction: &PointCloud,
    partition: &PatchPartition,
    encoder: &FrozenEncoder,
    delta: f64,
    need_grad: bool,
) -> Result<(f64, Option<GradientField>)> {
    let rec = gather_group(partial, partition, Group::Rec)?;
    let f = encoder.encode(&rec)?;
    let resampled = resample_latent(prediction, partition, partition.patches.k_patch)?;
    let indices = resampled.indices();
    let latent = prediction.gather(&indices)?;
    let (f_prime, argmax) = encoder.encode_with_argmax(&latent)?;
    let value = loss_latent(&f, &f_prime, delta)?;
    if !need_grad {
        return Ok((value, None));
    }
    let mut grad = GradientField::zeros(prediction.len());
    let inv_d = 1.0 / f.dim() as f64;
    for (j, arg) in argmax.iter().enumerate() {
        if let Some(local) = arg {
            let upstream = -huber_grad(f.0[j] - f_prime.0[j], delta) * inv_d;
            grad[indices[*local]] += upstream * encoder.weight(j);
        }
    }
    Ok((value, Some(grad)))
}

fn ncc_term(prediction: &PointCloud, params: &LossParams, need_grad: bool) -> Result<(f64, Option<GradientField>)> {
    let n = prediction.len();
    let subset = (params.ncc_subsample > 0 && params.ncc_subsample < n)
        .then(|| farthest_point_sample(prediction, params.ncc_subsample, params.rcd.seed_index % n))
        .transpose()?;
    let cloud = match &subset {
        Some(s) => prediction.gather(&s.indices)?,
        None => prediction.clone(),
    };
    if !need_grad {
        return Ok((ncc(&cloud, params.k_normal, params.ncc_variant)?.aggregate, None));
    }
    let (v, g) = grad_ncc(&cloud, params.k_normal, params.ncc_variant, params.ncc_grad)?;
    let g = match &subset {
        Some(s) => {
            let mut full = GradientField::zeros(n);
            for (row, &i) in s.indices.iter().enumerate() {
                full[i] = g[row];
            }
            full
        }
        None => g,
    };
    Ok((v, Some(g)))
}

fn composite(
    partial: &PointCloud,
    prediction: &PointCloud,
    partition: &PatchPartition,
    weights: &LossWeights,
    params: &LossParams,
    encoder: &FrozenEncoder,
    need_grad: bool,
) -> Result<LossReport> {
    if prediction.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let g_rec = gather_group(partial, partition, Group::Rec)?;
    let g_com = gather_group(partial, partition, Group::Com)?;

    let (l_rec, g_rec_grad) = distance_term(&g_rec, prediction, params, need_grad && weights.rec != 0.0)?;
    let (l_com, g_com_grad) = distance_term(&g_com, prediction, params, need_grad && weights.com != 0.0)?;
    let (l_latent, g_latent) = latent_term(
        partial,
        prediction,
        partition,
        encoder,
        params.huber_delta,
        need_grad && weights.latent != 0.0,
    )?;
    let (l_ncc, g_ncc) = ncc_term(prediction, params, need_grad && weights.ncc != 0.0)?;

    let total = weights.rec * l_rec + weights.com * l_com + weights.latent * l_latent + weights.ncc * l_ncc;
    let mut gradient = GradientField::zeros(prediction.len());
    for (g, w) in [
        (g_rec_grad, weights.rec),
        (g_com_grad, weights.com),
        (g_latent, weights.latent),
        (g_ncc, weights.ncc),
    ] {
        if let Some(g) = g {
            gradient.add_scaled(&g, w);
        }
    }
    Ok(LossReport {
        l_rec,
        l_com,
        l_latent,
        l_ncc,
        total,
        gradient,
    })
}

/// All four terms, their weighted total, and the gradient of the total
/// w.r.t. the prediction.
pub fn composite_loss(
    partial: &PointCloud,
    prediction: &PointCloud,
    partition: &PatchPartition,
    weights: &LossWeights,
    params: &LossParams,
    encoder: &FrozenEncoder,
) -> Result<LossReport> {
    composite(partial, prediction, partition, weights, params, encoder, true)
}

/// Like [`composite_loss`] but skips every gradient; the returned gradient is zero.
pub fn composite_loss_value(
    partial: &PointCloud,
    prediction: &PointCloud,
    partition: &PatchPartition,
    weights: &LossWeights,
    params: &LossParams,
    encoder: &FrozenEncoder,
) -> Result<LossReport> {
    composite(partial, prediction, partition, weights, params, encoder, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn huber_branches() {
        assert_eq!(huber(0.0, 1.0), 0.0);
        assert_eq!(huber(0.5, 1.0), 0.125);
        assert_eq!(huber(2.0, 1.0), 1.5);
        assert_eq!(huber(-2.0, 1.0), 1.5);
        // continuous value and slope at the seam
        assert!((huber(1.0 + 1e-12, 1.0) - huber(1.0, 1.0)).abs() < 1e-11);
        assert_eq!(huber_grad(1.0, 1.0), 1.0);
        assert_eq!(huber_grad(3.0, 1.0), 1.0);
        assert_eq!(huber_grad(-3.0, 1.0), -1.0);
    }

    #[test]
    fn latent_loss_values() {
        let f = FeatureVector(vec![1.0, 0.0]);
        let g = FeatureVector(vec![0.0, 0.0]);
        assert_eq!(loss_latent(&f, &g, 1.0).unwrap(), 0.25);
        assert_eq!(loss_latent(&g, &f, 1.0).unwrap(), 0.25);
        assert_eq!(loss_latent(&f, &f, 1.0).unwrap(), 0.0);
        assert!(matches!(
            loss_latent(&f, &FeatureVector(vec![0.0]), 1.0),
            Err(Error::DimensionMismatch(2, 1))
        ));
    }

    #[test]
    fn weights_parse_and_validate() {
        let w: LossWeights = "1,1,0.1,0.1".parse().unwrap();
        assert_eq!(w, LossWeights::default());
        assert!("1,1,0.1".parse::<LossWeights>().is_err());
        assert!("1,-1,0,0".parse::<LossWeights>().is_err());
        assert!(LossWeights::new(f64::NAN, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn encoder_is_seeded() {
        let a = FrozenEncoder::new(16, 3).unwrap();
        let b = FrozenEncoder::new(16, 3).unwrap();
        let c = FrozenEncoder::new(16, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn encoder_is_permutation_invariant() {
        let enc = FrozenEncoder::new(32, 9).unwrap();
        let a = PointCloud::from_arrays(&[[0.1, 0.2, 0.3], [-0.4, 0.5, 0.0], [0.3, -0.3, 0.2]]).unwrap();
        let b = PointCloud::from_arrays(&[[0.3, -0.3, 0.2], [0.1, 0.2, 0.3], [-0.4, 0.5, 0.0]]).unwrap();
        assert_eq!(enc.encode(&a).unwrap(), enc.encode(&b).unwrap());
    }

    #[test]
    fn single_point_rec_loss() {
        let g = PointCloud::from_arrays(&[[0.0, 0.0, 0.0]]).unwrap();
        let p = PointCloud::from_arrays(&[[0.5, 0.0, 0.0]]).unwrap();
        let params = RcdParams {
            m: 1,
            k_region: 1,
            ..RcdParams::default()
        };
        assert_eq!(loss_rec(&g, &p, &params).unwrap(), 1.0);
        assert_eq!(loss_com(&g, &p, &params).unwrap(), 1.0);
    }
}
