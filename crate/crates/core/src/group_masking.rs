//! Group BEV-guided masking over a temporal window.
//!
//! All frames of the window are first mapped into the reference frame's
//! coordinates. Group occupancy is the union of BEV occupancy over the window,
//! one mask is sampled on it, and that mask is applied to every frame. A cell
//! masked at one time step is masked at all of them, so ego motion cannot leak
//! masked content through a neighbouring frame.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{apply_pose, GeometryError};
use crate::raycast_voxelizer::frame_to_cur;
use crate::scene_model::{BevMask, BevSpec, FrameTag, PointCloud, Sequence};

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("window [{cur} - {half_width}, {cur} + {half_width}] exceeds a sequence of length {len}")]
    WindowOutOfBounds { cur: usize, half_width: usize, len: usize },
    #[error("mask has {mask_cells} cells but the BEV grid has {grid_cells}")]
    DimensionMismatch { mask_cells: usize, grid_cells: usize },
    #[error("masking ratio {0} outside [0, 1]")]
    BadRatio(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub ratio_nonempty: f64,
    pub ratio_empty: f64,
    pub rng_seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { ratio_nonempty: 0.5, ratio_empty: 0.5, rng_seed: 0 }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<(), MaskError> {
        for r in [self.ratio_nonempty, self.ratio_empty] {
            if !(0.0..=1.0).contains(&r) {
                return Err(MaskError::BadRatio(r));
            }
        }
        Ok(())
    }
}

/// Role of a masked cell in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CellKind {
    /// The frame has points in the cell.
    Nonempty,
    /// Empty in this frame but occupied somewhere in the window.
    EmptyButGroupNonempty,
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetCell {
    pub cell: usize,
    pub kind: CellKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedFrameSet {
    pub group_mask: BevMask,
    pub per_frame_nonempty: BTreeMap<usize, Vec<bool>>,
    /// Points outside masked cells, per frame.
    pub context_clouds: BTreeMap<usize, PointCloud>,
    /// Points inside masked cells, per frame.
    pub target_clouds: BTreeMap<usize, PointCloud>,
    pub target_cells: BTreeMap<usize, Vec<TargetCell>>,
}

/// Frames `cur − T ..= cur + T` mapped into frame-`cur` coordinates.
pub fn to_common_frame(seq: &Sequence, cur: usize, half_width: usize) -> Result<BTreeMap<usize, PointCloud>, MaskError> {
    if cur < half_width || cur + half_width >= seq.len() {
        return Err(MaskError::WindowOutOfBounds { cur, half_width, len: seq.len() });
    }
    (cur - half_width..=cur + half_width)
        .map(|i| {
            let c = apply_pose(&frame_to_cur(seq, i, cur), &seq.frame(i).cloud)?;
            Ok((i, c.with_frame(FrameTag::Common(cur))))
        })
        .collect()
}

/// BEV occupancy of a single cloud.
pub fn bev_occupancy(cloud: &PointCloud, bev: &BevSpec) -> Vec<bool> {
    let mut occ = vec![false; bev.num_cells()];
    for p in cloud.points() {
        if let Some(c) = bev.cell_of(p) {
            occ[c] = true;
        }
    }
    occ
}

/// A cell is non-empty when any frame puts a point in it.
pub fn group_occupancy(clouds: &BTreeMap<usize, PointCloud>, bev: &BevSpec) -> Vec<bool> {
    let mut occ = vec![false; bev.num_cells()];
    for cloud in clouds.values() {
        for p in cloud.points() {
            if let Some(c) = bev.cell_of(p) {
                occ[c] = true;
            }
        }
    }
    occ
}

/// Number of cells selected from a stratum of `count` cells.
pub fn stratum_quota(ratio: f64, count: usize) -> usize {
    ((ratio * count as f64).round() as usize).min(count)
}

/// Exact-count stratified sampling: non-empty cells first, then empty cells,
/// from one seeded stream.
pub fn sample_group_mask(group_nonempty: &[bool], bev: &BevSpec, cfg: &MaskConfig) -> Result<BevMask, MaskError> {
    cfg.validate()?;
    if group_nonempty.len() != bev.num_cells() {
        return Err(MaskError::DimensionMismatch { mask_cells: group_nonempty.len(), grid_cells: bev.num_cells() });
    }
    let nonempty: Vec<usize> = (0..group_nonempty.len()).filter(|&c| group_nonempty[c]).collect();
    let empty: Vec<usize> = (0..group_nonempty.len()).filter(|&c| !group_nonempty[c]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut masked = vec![false; group_nonempty.len()];
    for (cells, ratio) in [(&nonempty, cfg.ratio_nonempty), (&empty, cfg.ratio_empty)] {
        let k = stratum_quota(ratio, cells.len());
        for idx in sample(&mut rng, cells.len(), k).into_vec() {
            masked[cells[idx]] = true;
        }
    }
    Ok(BevMask { spec: *bev, group_nonempty: group_nonempty.to_vec(), masked })
}

/// Applies the group mask to every frame of the window.
pub fn propagate_and_split(
    clouds: &BTreeMap<usize, PointCloud>,
    mask: &BevMask,
    bev: &BevSpec,
) -> Result<MaskedFrameSet, MaskError> {
    if mask.masked.len() != bev.num_cells() || mask.group_nonempty.len() != bev.num_cells() || mask.spec.dims != bev.dims {
        return Err(MaskError::DimensionMismatch { mask_cells: mask.masked.len(), grid_cells: bev.num_cells() });
    }
    let masked_cells: Vec<usize> = mask.masked_cells().collect();
    let mut per_frame_nonempty = BTreeMap::new();
    let mut context_clouds = BTreeMap::new();
    let mut target_clouds = BTreeMap::new();
    let mut target_cells = BTreeMap::new();

    for (&f, cloud) in clouds {
        let occ = bev_occupancy(cloud, bev);
        let (mut context, mut target) = (Vec::new(), Vec::new());
        for (i, p) in cloud.points().iter().enumerate() {
            match bev.cell_of(p) {
                Some(c) if mask.masked[c] => target.push(i),
                _ => context.push(i),
            }
        }
        let targets = masked_cells
            .iter()
            .map(|&cell| TargetCell {
                cell,
                kind: if occ[cell] {
                    CellKind::Nonempty
                } else if mask.group_nonempty[cell] {
                    CellKind::EmptyButGroupNonempty
                } else {
                    CellKind::Empty
                },
            })
            .collect();
        context_clouds.insert(f, cloud.select(&context));
        target_clouds.insert(f, cloud.select(&target));
        target_cells.insert(f, targets);
        per_frame_nonempty.insert(f, occ);
    }
    Ok(MaskedFrameSet { group_mask: mask.clone(), per_frame_nonempty, context_clouds, target_clouds, target_cells })
}

/// Stratum sizes and selected counts of a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskCounts {
    pub nonempty_cells: usize,
    pub empty_cells: usize,
    pub masked_nonempty: usize,
    pub masked_empty: usize,
}

pub fn mask_counts(mask: &BevMask) -> MaskCounts {
    let mut c = MaskCounts { nonempty_cells: 0, empty_cells: 0, masked_nonempty: 0, masked_empty: 0 };
    for (&ne, &m) in mask.group_nonempty.iter().zip(&mask.masked) {
        if ne {
            c.nonempty_cells += 1;
            c.masked_nonempty += m as usize;
        } else {
            c.empty_cells += 1;
            c.masked_empty += m as usize;
        }
    }
    c
}

/// Full pipeline for one reference frame.
pub fn mask_window(
    seq: &Sequence,
    cur: usize,
    half_width: usize,
    bev: &BevSpec,
    cfg: &MaskConfig,
) -> Result<MaskedFrameSet, MaskError> {
    let clouds = to_common_frame(seq, cur, half_width)?;
    let group = group_occupancy(&clouds, bev);
    let mask = sample_group_mask(&group, bev, cfg)?;
    propagate_and_split(&clouds, &mask, bev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{invert_pose, Pose, Vec3};
    use crate::scene_model::{Frame, GridSpec};

    fn bev() -> BevSpec {
        GridSpec::new([0.0, 0.0, -2.0, 8.0, 8.0, 4.0], [1.0, 1.0, 0.5]).unwrap().bev()
    }

    fn cloud(points: Vec<Vec3>) -> PointCloud {
        PointCloud::new(points, None, FrameTag::Common(0)).unwrap()
    }

    #[test]
    fn all_empty_frames_give_empty_group() {
        let clouds: BTreeMap<usize, PointCloud> = (0..3).map(|i| (i, cloud(vec![]))).collect();
        assert!(group_occupancy(&clouds, &bev()).iter().all(|&c| !c));
    }

    #[test]
    fn single_frame_point_sets_group_cell() {
        let mut clouds: BTreeMap<usize, PointCloud> = (0..5).map(|i| (i, cloud(vec![]))).collect();
        clouds.insert(0, cloud(vec![Vec3::new(3.5, 4.5, 0.0)]));
        let g = group_occupancy(&clouds, &bev());
        assert!(g[3 * 8 + 4]);
        assert_eq!(g.iter().filter(|&&c| c).count(), 1);
    }

    #[test]
    fn zero_and_full_ratios() {
        let b = bev();
        let mut g = vec![false; b.num_cells()];
        g[5] = true;
        let none = sample_group_mask(&g, &b, &MaskConfig { ratio_nonempty: 0.0, ratio_empty: 0.0, rng_seed: 1 }).unwrap();
        assert_eq!(none.num_masked(), 0);
        let all = sample_group_mask(&g, &b, &MaskConfig { ratio_nonempty: 1.0, ratio_empty: 1.0, rng_seed: 1 }).unwrap();
        assert_eq!(all.num_masked(), b.num_cells());
    }

    #[test]
    fn stratified_counts_and_determinism() {
        let b = GridSpec::new([0.0, 0.0, 0.0, 20.0, 20.0, 1.0], [1.0, 1.0, 1.0]).unwrap().bev();
        let g: Vec<bool> = (0..400).map(|c| c % 4 == 0).collect();
        let cfg = MaskConfig { ratio_nonempty: 0.5, ratio_empty: 0.5, rng_seed: 99 };
        let m = sample_group_mask(&g, &b, &cfg).unwrap();
        let counts = mask_counts(&m);
        assert_eq!((counts.nonempty_cells, counts.empty_cells), (100, 300));
        assert_eq!((counts.masked_nonempty, counts.masked_empty), (50, 150));
        assert_eq!(sample_group_mask(&g, &b, &cfg).unwrap(), m);
        let other = sample_group_mask(&g, &b, &MaskConfig { rng_seed: 100, ..cfg }).unwrap();
        assert_ne!(other.masked, m.masked);
    }

    #[test]
    fn rejects_bad_ratio_and_dimensions() {
        let b = bev();
        let cfg = MaskConfig { ratio_nonempty: 1.5, ..Default::default() };
        assert!(matches!(sample_group_mask(&[false; 64], &b, &cfg), Err(MaskError::BadRatio(_))));
        let mask = sample_group_mask(&[false; 64], &b, &MaskConfig::default()).unwrap();
        let other = GridSpec::new([0.0, 0.0, 0.0, 4.0, 4.0, 1.0], [1.0, 1.0, 1.0]).unwrap().bev();
        assert!(matches!(propagate_and_split(&BTreeMap::new(), &mask, &other), Err(MaskError::DimensionMismatch { .. })));
    }

    #[test]
    fn no_mask_keeps_everything() {
        let b = bev();
        let clouds: BTreeMap<usize, PointCloud> =
            (0..3).map(|i| (i, cloud(vec![Vec3::new(i as f64 + 0.5, 1.5, 0.0), Vec3::new(7.5, 7.5, 1.0)]))).collect();
        let g = group_occupancy(&clouds, &b);
        let mask = sample_group_mask(&g, &b, &MaskConfig { ratio_nonempty: 0.0, ratio_empty: 0.0, rng_seed: 0 }).unwrap();
        let set = propagate_and_split(&clouds, &mask, &b).unwrap();
        assert_eq!(set.context_clouds, clouds);
        assert!(set.target_cells.values().all(|t| t.is_empty()));
    }

    #[test]
    fn moving_object_cell_is_tagged_per_frame() {
        let b = bev();
        // Object in cell (2, 2) only at frame 1; background in (6, 6) everywhere.
        let clouds: BTreeMap<usize, PointCloud> = (0..3)
            .map(|i| {
                let mut pts = vec![Vec3::new(6.5, 6.5, 0.0)];
                if i == 1 {
                    pts.push(Vec3::new(2.5, 2.5, 0.5));
                }
                (i, cloud(pts))
            })
            .collect();
        let g = group_occupancy(&clouds, &b);
        let c = 2 * 8 + 2;
        let mut masked = vec![false; b.num_cells()];
        masked[c] = true;
        let mask = BevMask { spec: b, group_nonempty: g, masked };
        let set = propagate_and_split(&clouds, &mask, &b).unwrap();
        assert_eq!(set.context_clouds[&1].len(), 1);
        assert_eq!(set.target_clouds[&1].len(), 1);
        assert_eq!(set.target_cells[&1], vec![TargetCell { cell: c, kind: CellKind::Nonempty }]);
        for f in [0, 2] {
            assert_eq!(set.target_cells[&f], vec![TargetCell { cell: c, kind: CellKind::EmptyButGroupNonempty }]);
        }
    }

    #[test]
    fn common_frame_for_translating_ego() {
        // Ego drives 1 m per frame along x past one stationary world point.
        let world = Vec3::new(20.0, 3.0, 0.5);
        let frames: Vec<Frame> = (0..5)
            .map(|i| {
                let pose = Pose::from_translation(Vec3::new(i as f64, 0.0, 0.0));
                Frame {
                    timestamp_index: i as u64,
                    pose,
                    sensor_origin: Vec3::zeros(),
                    cloud: PointCloud::new(vec![invert_pose(&pose).transform_point(&world)], None, FrameTag::Ego(i)).unwrap(),
                    boxes: vec![],
                    point_instance_ids: None,
                }
            })
            .collect();
        let seq = Sequence::new(frames).unwrap();
        let clouds = to_common_frame(&seq, 2, 2).unwrap();
        assert_eq!(clouds.len(), 5);
        for c in clouds.values() {
            assert_eq!(c.points()[0], Vec3::new(18.0, 3.0, 0.5));
        }
        assert_eq!(to_common_frame(&seq, 2, 0).unwrap()[&2].points(), seq.frame(2).cloud.points());
        assert!(matches!(to_common_frame(&seq, 1, 2), Err(MaskError::WindowOutOfBounds { .. })));
    }
}
