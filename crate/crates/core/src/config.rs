//! Flat `key = value` run configuration covering every tunable.
//!
//! Lines starting with `#` and blank lines are ignored. Unknown keys and
//! malformed values are errors naming the line; missing keys keep their
//! defaults. [`RunConfig::to_text`] writes every key, so the echoed file
//! reproduces the run on its own.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::optimize::{CompletionConfig, Instance};
use crate::synth::{generate_shape, OcclusionRegion, OcclusionSpec, Primitive, ShapeSpec};

/// Environment variable overriding `global_seed`.
pub const SEED_ENV: &str = "P2C_SEED";

/// Every key with its default and meaning, in echo order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("n_patches", "64", "patches sampled from the partial cloud per step"),
    ("k_patch", "32", "points per patch"),
    ("ratio", "20,40,4", "patch counts for the rec, com and latent groups"),
    ("skeleton_m", "64", "skeleton points for the region-aware distance"),
    ("k_region", "32", "neighbors gathered around each skeleton point"),
    ("k_normal", "8", "neighbors used for normal estimation"),
    ("huber_delta", "1", "Huber threshold of the latent loss"),
    ("weights", "1,1,0.1,0.1", "rec, com, latent and ncc loss weights"),
    ("norm", "l2", "point distance inside losses: l2 or sq-l2"),
    ("distance", "rcd", "reconstruction/completion distance: rcd, cd or ucd"),
    ("ncc_variant", "variance", "ncc aggregation: variance, mean or min"),
    ("ncc_grad", "finite-diff", "ncc gradient: finite-diff, analytic or frozen-normals"),
    ("ncc_subsample", "0", "prediction points sampled for ncc, 0 for all"),
    ("global_seed", "0", "seed of the per-step patch, partition and skeleton draws"),
    ("encoder_seed", "0", "seed of the frozen feature encoder"),
    ("feature_dim", "256", "frozen encoder output dimension"),
    ("iterations", "500", "optimizer steps"),
    ("n_candidate", "1024", "points in the optimized candidate"),
    ("step_size", "0.001", "adaptive-moment step size"),
    ("beta1", "0.9", "first-moment decay"),
    ("beta2", "0.999", "second-moment decay"),
    ("epsilon", "0.00000001", "adaptive-moment denominator floor"),
    ("jitter_sigma", "0.02", "jitter added to duplicated partial points"),
    ("fill_fraction", "0.5", "share of extra candidates drawn from the unit cube"),
    ("shape", "sphere", "synthetic primitive: plane, sphere, cylinder, box or table"),
    ("n_points", "1024", "points sampled on the synthetic shape"),
    ("shape_seed", "0", "seed of the synthetic shape sampler"),
    ("occlusion", "half-space", "occluder: half-space, hole or none"),
    ("occlusion_normal", "0,0,1", "half-space normal; points beyond it are removed"),
    ("occlusion_offset", "0", "half-space offset along the normal"),
    ("hole_center", "0,0,0.5", "hole occluder center"),
    ("hole_radius", "0.3", "hole occluder radius"),
    ("removal_fraction", "0.5", "exact share of points removed, or none to use the geometry as given"),
    ("instances", "10", "synthetic instances in an ablation run"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OcclusionKind {
    HalfSpace,
    Hole,
    None,
}

impl FromStr for OcclusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "half-space" => Ok(OcclusionKind::HalfSpace),
            "hole" => Ok(OcclusionKind::Hole),
            "none" => Ok(OcclusionKind::None),
            other => Err(Error::InvalidParameter(format!(
                "unknown occlusion `{other}` (expected half-space, hole or none)"
            ))),
        }
    }
}

impl std::fmt::Display for OcclusionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OcclusionKind::HalfSpace => "half-space",
            OcclusionKind::Hole => "hole",
            OcclusionKind::None => "none",
        })
    }
}

/// Optimizer settings plus the synthetic scenario used when no input file
/// is given.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub completion: CompletionConfig,
    pub shape: Primitive,
    pub n_points: usize,
    pub shape_seed: u64,
    pub occlusion: OcclusionKind,
    pub occlusion_normal: Point,
    pub occlusion_offset: f64,
    pub hole_center: Point,
    pub hole_radius: f64,
    pub removal_fraction: Option<f64>,
    pub instances: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut config = RunConfig {
            completion: CompletionConfig::default(),
            shape: Primitive::Sphere,
            n_points: 0,
            shape_seed: 0,
            occlusion: OcclusionKind::HalfSpace,
            occlusion_normal: Point::z(),
            occlusion_offset: 0.0,
            hole_center: Point::zeros(),
            hole_radius: 0.0,
            removal_fraction: None,
            instances: 0,
        };
        for (key, default, _) in KEYS {
            config.set(key, default).expect("documented defaults parse");
        }
        config
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidParameter(format!("`{value}` is not a valid value for {key}")))
}

fn parse_point(key: &str, value: &str) -> Result<Point> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::InvalidParameter(format!("{key} needs three comma-separated numbers")));
    }
    let mut c = [0.0; 3];
    for (slot, p) in c.iter_mut().zip(&parts) {
        *slot = parse::<f64>(key, p)?;
        if !slot.is_finite() {
            return Err(Error::InvalidParameter(format!("{key} must be finite")));
        }
    }
    Ok(Point::from(c))
}

fn format_point(p: &Point) -> String {
    format!("{},{},{}", p.x, p.y, p.z)
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let c = &mut self.completion;
        match key {
            "n_patches" => c.n_patches = parse(key, value)?,
            "k_patch" => c.k_patch = parse(key, value)?,
            "ratio" => c.ratio = value.parse()?,
            "skeleton_m" => c.loss.rcd.m = parse(key, value)?,
            "k_region" => c.loss.rcd.k_region = parse(key, value)?,
            "k_normal" => c.loss.k_normal = parse(key, value)?,
            "huber_delta" => c.loss.huber_delta = parse(key, value)?,
            "weights" => c.weights = value.parse()?,
            "norm" => c.loss.rcd.norm = value.parse()?,
            "distance" => c.loss.distance = value.parse()?,
            "ncc_variant" => c.loss.ncc_variant = value.parse()?,
            "ncc_grad" => c.loss.ncc_grad = value.parse()?,
            "ncc_subsample" => c.loss.ncc_subsample = parse(key, value)?,
            "global_seed" => c.global_seed = parse(key, value)?,
            "encoder_seed" => c.encoder_seed = parse(key, value)?,
            "feature_dim" => c.feature_dim = parse(key, value)?,
            "iterations" => c.iterations = parse(key, value)?,
            "n_candidate" => c.n_candidate = parse(key, value)?,
            "step_size" => c.adam.step_size = parse(key, value)?,
            "beta1" => c.adam.beta1 = parse(key, value)?,
            "beta2" => c.adam.beta2 = parse(key, value)?,
            "epsilon" => c.adam.epsilon = parse(key, value)?,
            "jitter_sigma" => c.jitter_sigma = parse(key, value)?,
            "fill_fraction" => c.fill_fraction = parse(key, value)?,
            "shape" => self.shape = value.parse()?,
            "n_points" => self.n_points = parse(key, value)?,
            "shape_seed" => self.shape_seed = parse(key, value)?,
            "occlusion" => self.occlusion = value.parse()?,
            "occlusion_normal" => self.occlusion_normal = parse_point(key, value)?,
            "occlusion_offset" => self.occlusion_offset = parse(key, value)?,
            "hole_center" => self.hole_center = parse_point(key, value)?,
            "hole_radius" => self.hole_radius = parse(key, value)?,
            "removal_fraction" => {
                self.removal_fraction = if value == "none" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "instances" => self.instances = parse(key, value)?,
            other => return Err(Error::InvalidParameter(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Text form of one key's current value.
    pub fn get(&self, key: &str) -> Option<String> {
        let c = &self.completion;
        Some(match key {
            "n_patches" => c.n_patches.to_string(),
            "k_patch" => c.k_patch.to_string(),
            "ratio" => c.ratio.to_string(),
            "skeleton_m" => c.loss.rcd.m.to_string(),
            "k_region" => c.loss.rcd.k_region.to_string(),
            "k_normal" => c.loss.k_normal.to_string(),
            "huber_delta" => c.loss.huber_delta.to_string(),
            "weights" => c.weights.to_string(),
            "norm" => c.loss.rcd.norm.to_string(),
            "distance" => c.loss.distance.to_string(),
            "ncc_variant" => c.loss.ncc_variant.to_string(),
            "ncc_grad" => c.loss.ncc_grad.to_string(),
            "ncc_subsample" => c.loss.ncc_subsample.to_string(),
            "global_seed" => c.global_seed.to_string(),
            "encoder_seed" => c.encoder_seed.to_string(),
            "feature_dim" => c.feature_dim.to_string(),
            "iterations" => c.iterations.to_string(),
            "n_candidate" => c.n_candidate.to_string(),
            "step_size" => c.adam.step_size.to_string(),
            "beta1" => c.adam.beta1.to_string(),
            "beta2" => c.adam.beta2.to_string(),
            "epsilon" => c.adam.epsilon.to_string(),
            "jitter_sigma" => c.jitter_sigma.to_string(),
            "fill_fraction" => c.fill_fraction.to_string(),
            "shape" => self.shape.to_string(),
            "n_points" => self.n_points.to_string(),
            "shape_seed" => self.shape_seed.to_string(),
            "occlusion" => self.occlusion.to_string(),
            "occlusion_normal" => format_point(&self.occlusion_normal),
            "occlusion_offset" => self.occlusion_offset.to_string(),
            "hole_center" => format_point(&self.hole_center),
            "hole_radius" => self.hole_radius.to_string(),
            "removal_fraction" => match self.removal_fraction {
                Some(f) => f.to_string(),
                None => "none".to_string(),
            },
            "instances" => self.instances.to_string(),
            _ => return None,
        })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        config.merge_text(text)?;
        Ok(config)
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            self.set(key.trim(), value).map_err(|e| Error::Config {
                line: i + 1,
                message: match e {
                    Error::InvalidParameter(m) => m,
                    other => other.to_string(),
                },
            })?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_text(&text).map_err(|e| match e {
            Error::Config { line, message } => Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            },
            other => other,
        })
    }

    /// Overrides `global_seed` from the environment when set.
    pub fn apply_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => self.set("global_seed", &v).map_err(|_| {
                Error::InvalidParameter(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))
            }),
            Err(_) => Ok(()),
        }
    }

    /// Every key with its effective value, one per line, with descriptions
    /// as comments.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, _, doc) in KEYS {
            let value = self.get(key).expect("every listed key has a value");
            writeln!(out, "# {doc}\n{key} = {value}").expect("writing to a String");
        }
        out
    }

    pub fn shape_spec(&self) -> ShapeSpec {
        ShapeSpec {
            primitive: self.shape,
            n_points: self.n_points,
            rng_seed: self.shape_seed,
        }
    }

    /// Occluder for the synthetic scenario; `None` keeps the whole shape.
    pub fn occlusion_spec(&self) -> Option<OcclusionSpec> {
        let region = match self.occlusion {
            OcclusionKind::HalfSpace => OcclusionRegion::HalfSpace {
                normal: self.occlusion_normal,
                offset: self.occlusion_offset,
            },
            OcclusionKind::Hole => OcclusionRegion::Hole {
                center: self.hole_center,
                radius: self.hole_radius,
            },
            OcclusionKind::None => return None,
        };
        Some(OcclusionSpec {
            region,
            removal_fraction: self.removal_fraction,
        })
    }

    /// The synthetic shape, occluded per the config.
    pub fn instance(&self) -> Result<Instance> {
        let name = self.shape.to_string();
        match self.occlusion_spec() {
            Some(occlusion) => Instance::new(name, &self.shape_spec(), &occlusion),
            None => {
                let complete = generate_shape(&self.shape_spec())?;
                Ok(Instance {
                    name,
                    partial: complete.clone(),
                    occluded: complete.gather(&[])?,
                    complete,
                })
            }
        }
    }
}
