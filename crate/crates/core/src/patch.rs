//! Patch generation over a partial cloud and the seeded three-way split into
//! reconstruction, completion and latent groups.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, knn, NeighborList, PointCloud, SampleSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    /// Visible patches the prediction must reproduce.
    Rec,
    /// Masked patches the prediction must complete.
    Com,
    /// Held-out patches for the latent consistency term.
    Latent,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Rec => "rec",
            Group::Com => "com",
            Group::Latent => "latent",
        })
    }
}

/// Patch counts per group, `(rec, com, latent)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio(pub usize, pub usize, pub usize);

impl Ratio {
    pub fn total(&self) -> usize {
        self.0 + self.1 + self.2
    }
}

impl Default for Ratio {
    fn default() -> Self {
        Ratio(20, 40, 4)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.0, self.1, self.2)
    }
}

impl FromStr for Ratio {
    type Err = Error;

    /// Parses `rec,com,latent`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || Error::InvalidParameter(format!("ratio `{s}` must be three comma-separated counts"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let mut v = [0usize; 3];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p.parse().map_err(|_| bad())?;
        }
        Ok(Ratio(v[0], v[1], v[2]))
    }
}

/// FPS centers and their k-NN patches within the partial cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Patches {
    pub centers: SampleSet,
    pub center_points: PointCloud,
    pub patches: Vec<NeighborList>,
    pub k_patch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPartition {
    pub patches: Patches,
    pub group_of: Vec<Group>,
    pub ratio: Ratio,
}

impl PatchPartition {
    pub fn len(&self) -> usize {
        self.group_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group_of.is_empty()
    }

    /// Patch indices carrying `label`, ascending.
    pub fn members(&self, label: Group) -> Vec<usize> {
        self.group_of
            .iter()
            .enumerate()
            .filter(|(_, g)| **g == label)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Patches re-gathered from a prediction around the latent group's centers.
#[derive(Debug, Clone, PartialEq)]
pub struct ResampledGroup {
    /// Indices into the partition's patch list.
    pub patch_ids: Vec<usize>,
    pub center_points: PointCloud,
    /// k-NN lists into the prediction.
    pub patches: Vec<NeighborList>,
}

impl ResampledGroup {
    /// All member indices into the prediction, concatenated patch by patch.
    pub fn indices(&self) -> Vec<usize> {
        self.patches
            .iter()
            .flat_map(|p| p.neighbor_indices.iter().copied())
            .collect()
    }
}

/// Samples `m` patch centers by FPS and gathers each center's `k_patch`
/// nearest neighbors within the partial cloud.
pub fn patchify(partial: &PointCloud, m: usize, k_patch: usize, fps_seed: usize) -> Result<Patches> {
    if k_patch == 0 {
        return Err(Error::InvalidK(k_patch));
    }
    let needed = m.max(k_patch);
    if partial.len() < needed {
        return Err(Error::CloudTooSmall {
            what: "patchify",
            needed,
            available: partial.len(),
        });
    }
    let centers = farthest_point_sample(partial, m, fps_seed)?;
    let center_points = partial.gather(&centers.indices)?;
    let patches = knn(&center_points, partial, k_patch)?;
    Ok(Patches {
        centers,
        center_points,
        patches,
        k_patch,
    })
}

/// Assigns patch labels by a seeded uniform permutation: the first `ratio.0`
/// shuffled patches go to `Rec`, the next `ratio.1` to `Com`, the rest to
/// `Latent`.
pub fn partition(patches: Patches, ratio: Ratio, partition_seed: u64) -> Result<PatchPartition> {
    let m = patches.patches.len();
    if ratio.0 == 0 || ratio.1 == 0 || ratio.2 == 0 || ratio.total() != m {
        return Err(Error::InvalidRatio(ratio.0, ratio.1, ratio.2, m));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(partition_seed));
    let mut group_of = vec![Group::Latent; m];
    for (rank, &patch) in order.iter().enumerate() {
        group_of[patch] = if rank < ratio.0 {
            Group::Rec
        } else if rank < ratio.0 + ratio.1 {
            Group::Com
        } else {
            Group::Latent
        };
    }
    Ok(PatchPartition {
        patches,
        group_of,
        ratio,
    })
}

/// Indices into the partial cloud of every member of every `label` patch,
/// patch by patch. Points shared by two patches appear twice.
pub fn group_indices(partition: &PatchPartition, label: Group) -> Vec<usize> {
    partition
        .members(label)
        .into_iter()
        .flat_map(|p| partition.patches.patches[p].neighbor_indices.iter().copied())
        .collect()
}

/// Concatenated member points of all patches labelled `label`.
pub fn gather_group(partial: &PointCloud, partition: &PatchPartition, label: Group) -> Result<PointCloud> {
    partial.gather(&group_indices(partition, label))
}

/// For every latent-labelled center, its `k_patch` nearest prediction points.
pub fn resample_latent(prediction: &PointCloud, partition: &PatchPartition, k_patch: usize) -> Result<ResampledGroup> {
    if k_patch == 0 {
        return Err(Error::InvalidK(k_patch));
    }
    if prediction.len() < k_patch {
        return Err(Error::CloudTooSmall {
            what: "latent resampling",
            needed: k_patch,
            available: prediction.len(),
        });
    }
    let patch_ids = partition.members(Group::Latent);
    let center_points = partition.patches.center_points.gather(&patch_ids)?;
    let patches = knn(&center_points, prediction, k_patch)?;
    Ok(ResampledGroup {
        patch_ids,
        center_points,
        patches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;

    fn line(n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|i| Point::new(i as f64, (i * i) as f64 * 0.01, 0.0)).collect()).unwrap()
    }

    #[test]
    fn single_patch_covers_cloud() {
        let c = line(10);
        let p = patchify(&c, 1, 10, 0).unwrap();
        let mut idx = p.patches[0].neighbor_indices.clone();
        idx.sort();
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn centers_belong_to_their_patch() {
        let c = line(40);
        let p = patchify(&c, 6, 5, 3).unwrap();
        for (center, patch) in p.centers.indices.iter().zip(&p.patches) {
            assert_eq!(patch.neighbor_indices[0], *center);
        }
    }

    #[test]
    fn too_small_cloud_rejected() {
        let c = line(5);
        assert!(matches!(patchify(&c, 2, 6, 0), Err(Error::CloudTooSmall { .. })));
        assert!(matches!(patchify(&c, 6, 2, 0), Err(Error::CloudTooSmall { .. })));
    }

    #[test]
    fn ratio_must_be_positive_and_exhaustive() {
        let c = line(20);
        let p = patchify(&c, 6, 3, 0).unwrap();
        assert!(partition(p.clone(), Ratio(6, 0, 0), 1).is_err());
        assert!(partition(p.clone(), Ratio(2, 2, 1), 1).is_err());
        let part = partition(p, Ratio(1, 3, 2), 1).unwrap();
        assert_eq!(part.members(Group::Rec).len(), 1);
        assert_eq!(part.members(Group::Com).len(), 3);
        assert_eq!(part.members(Group::Latent).len(), 2);
    }

    #[test]
    fn partition_is_deterministic() {
        let c = line(30);
        let p = patchify(&c, 8, 4, 0).unwrap();
        let a = partition(p.clone(), Ratio(3, 3, 2), 42).unwrap();
        let b = partition(p, Ratio(3, 3, 2), 42).unwrap();
        assert_eq!(a.group_of, b.group_of);
    }

    #[test]
    fn gathered_groups_count_every_member() {
        let c = line(30);
        let part = partition(patchify(&c, 8, 4, 0).unwrap(), Ratio(3, 3, 2), 7).unwrap();
        let total: usize = [Group::Rec, Group::Com, Group::Latent]
            .iter()
            .map(|g| gather_group(&c, &part, *g).unwrap().len())
            .sum();
        assert_eq!(total, 8 * 4);
    }

    #[test]
    fn resample_on_partial_reproduces_latent_patches() {
        let c = line(30);
        let part = partition(patchify(&c, 8, 4, 0).unwrap(), Ratio(3, 3, 2), 7).unwrap();
        let r = resample_latent(&c, &part, 4).unwrap();
        for (id, patch) in r.patch_ids.iter().zip(&r.patches) {
            assert_eq!(patch.neighbor_indices, part.patches.patches[*id].neighbor_indices);
        }
        assert!(matches!(resample_latent(&line(3), &part, 4), Err(Error::CloudTooSmall { .. })));
    }

    #[test]
    fn resample_with_k1_takes_nearest() {
        let c = line(30);
        let part = partition(patchify(&c, 8, 4, 0).unwrap(), Ratio(3, 3, 2), 7).unwrap();
        let r = resample_latent(&c, &part, 1).unwrap();
        assert!(r.patches.iter().all(|p| p.neighbor_indices.len() == 1));
    }
}
