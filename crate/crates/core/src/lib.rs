//! Self-supervised point-cloud completion primitives: nearest-neighbor
//! search and farthest point sampling, Chamfer-family distances with
//! gradients, PCA normals and the normal consistency constraint, patch
//! grouping, composite losses, and a coordinate-level completion optimizer.

pub mod config;
pub mod distances;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod normals;
pub mod optimize;
pub mod patch;
pub mod run;
pub mod synth;

pub use config::RunConfig;
pub use distances::{cd, grad_cd, grad_rcd, grad_ucd, mmd, rcd, ucd, uhd, GradientField, Norm, RcdParams, RegionSet};
pub use error::{Error, Result};
pub use geometry::{farthest_point_sample, knn, NeighborList, Point, PointCloud, SampleSet};
pub use io::{read_cloud, write_cloud, CloudFormat};
pub use losses::{composite_loss, DistanceKind, FeatureVector, FrozenEncoder, LossParams, LossReport, LossWeights};
pub use normals::{estimate_normals, grad_ncc, ncc, NccGradMode, NccReport, NccVariant, NormalField, NormalFlag};
pub use optimize::{complete, CompletionConfig, FinalMetrics, RunTrace, TraceRecord};
pub use patch::{partition, patchify, Group, PatchPartition, Patches, Ratio};
pub use synth::{generate_shape, occlude, OcclusionRegion, OcclusionSpec, Primitive, ShapeSpec};
