//! Ghost removal and moving-instance alignment across a sequence.
//!
//! For a reference frame `cur`, every other frame keeps its background points,
//! drops the points of instances that are not present at `cur`, and moves the
//! points of shared instances so that, once mapped into `cur` coordinates with
//! the frame poses, they sit on the instance's box at `cur`. Output clouds stay
//! in each frame's own ego coordinates.
//!
//! Boxes are stored in their frame's ego coordinates, so the box alignment
//! `(R, c)` maps frame-`i` points into `cur` coordinates and
//! `T_i⁻¹ · T_cur` brings them back to frame-`i` locals.

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{compose, invert_pose, points_in_box, svd_align, GeometryError, InstanceBox, InstanceId, Pose};
use crate::scene_model::{Frame, PointCloud, Sequence};

/// Margin used when instance membership must be derived from boxes.
pub const ASSIGNMENT_MARGIN: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("instance id mismatch: {0} vs {1}")]
    InstanceMismatch(InstanceId, InstanceId),
    #[error("frame index {index} out of range for a sequence of length {len}")]
    FrameOutOfRange { index: usize, len: usize },
    #[error("window [{start}, {end}] does not contain frame {cur} or exceeds the sequence")]
    BadWindow { start: usize, end: usize, cur: usize },
    #[error("frame {frame}, instance {instance}: {source}")]
    Align { frame: usize, instance: InstanceId, source: GeometryError },
    #[error("instance {instance}: {source}")]
    Geometry { instance: InstanceId, source: GeometryError },
}

/// Where a transformed point came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub source_frame: usize,
    /// `None` for background points.
    pub instance: Option<InstanceId>,
}

/// Per-frame clouds after ghost removal and instance alignment toward `cur_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedSequence {
    pub cur_index: usize,
    pub per_frame_points: BTreeMap<usize, PointCloud>,
    pub provenance: BTreeMap<usize, Vec<Provenance>>,
}

impl TransformedSequence {
    pub fn frame_range(&self) -> Option<(usize, usize)> {
        Some((*self.per_frame_points.keys().next()?, *self.per_frame_points.keys().next_back()?))
    }
}

/// Per-point instance ids: stored labels when present, otherwise box containment
/// with [`ASSIGNMENT_MARGIN`], ties going to the smallest box by volume.
pub fn assign_instances(frame: &Frame) -> Vec<Option<InstanceId>> {
    if let Some(ids) = &frame.point_instance_ids {
        return ids.clone();
    }
    let mut best: Vec<Option<(f64, usize)>> = vec![None; frame.cloud.len()];
    for (k, b) in frame.boxes.iter().enumerate() {
        let vol = b.volume();
        for i in points_in_box(&frame.cloud, b, ASSIGNMENT_MARGIN) {
            match best[i] {
                Some((v, _)) if v <= vol => {}
                _ => best[i] = Some((vol, k)),
            }
        }
    }
    best.into_iter().map(|b| b.map(|(_, k)| frame.boxes[k].instance_id.clone())).collect()
}

fn shared(id: &InstanceId, boxes_cur: &[InstanceBox]) -> bool {
    boxes_cur.iter().any(|b| &b.instance_id == id)
}

/// Removes the points of instances absent from `boxes_cur`.
pub fn ghost_filter(frame: &Frame, boxes_cur: &[InstanceBox]) -> PointCloud {
    let ids = assign_instances(frame);
    let keep: Vec<usize> = ids
        .iter()
        .enumerate()
        .filter(|(_, id)| id.as_ref().is_none_or(|id| shared(id, boxes_cur)))
        .map(|(i, _)| i)
        .collect();
    frame.cloud.select(&keep)
}

/// Affine map applied to instance points: `T_i⁻¹ · T_cur · [R | c]`.
fn instance_map(box_i: &InstanceBox, box_cur: &InstanceBox, pose_i: &Pose, pose_cur: &Pose) -> Result<Pose, GeometryError> {
    // (R, c) is kept in the forward convention `p' = R·p + c`; a recorded
    // rotation applied as `Rᵀ·p + c` is its transpose.
    let forward = svd_align(box_i, box_cur)?.to_pose()?;
    Ok(compose(&invert_pose(pose_i), &compose(pose_cur, &forward)))
}

/// Moves the points of one instance from its frame-`i` box onto its `cur` box,
/// returning frame-`i` local coordinates.
pub fn align_instance(
    points: &PointCloud,
    box_i: &InstanceBox,
    box_cur: &InstanceBox,
    pose_i: &Pose,
    pose_cur: &Pose,
) -> Result<PointCloud, TransformError> {
    if box_i.instance_id != box_cur.instance_id {
        return Err(TransformError::InstanceMismatch(box_i.instance_id.clone(), box_cur.instance_id.clone()));
    }
    let map = instance_map(box_i, box_cur, pose_i, pose_cur)
        .map_err(|source| TransformError::Geometry { instance: box_i.instance_id.clone(), source })?;
    Ok(points.with_points(points.points().iter().map(|p| map.transform_point(p)).collect()))
}

fn transform_frame(
    frame: &Frame,
    index: usize,
    cur: &Frame,
) -> Result<(PointCloud, Vec<Provenance>), TransformError> {
    let ids = assign_instances(frame);
    let mut maps: BTreeMap<&InstanceId, Pose> = BTreeMap::new();
    for b in &frame.boxes {
        if let Some(bc) = cur.find_box(&b.instance_id) {
            let m = instance_map(b, bc, &frame.pose, &cur.pose).map_err(|source| TransformError::Align {
                frame: index,
                instance: b.instance_id.clone(),
                source,
            })?;
            maps.insert(&b.instance_id, m);
        }
    }

    let mut keep = Vec::with_capacity(frame.cloud.len());
    let mut points = Vec::with_capacity(frame.cloud.len());
    let mut prov = Vec::with_capacity(frame.cloud.len());
    for (k, (p, id)) in frame.cloud.points().iter().zip(&ids).enumerate() {
        match id {
            None => points.push(*p),
            Some(id) => match maps.get(id) {
                Some(m) => points.push(m.transform_point(p)),
                None => continue,
            },
        }
        keep.push(k);
        prov.push(Provenance { source_frame: index, instance: id.clone() });
    }
    let cloud = frame.cloud.select(&keep).with_points(points);
    Ok((cloud, prov))
}

/// Transforms the whole sequence toward `cur`.
pub fn transform_sequence(seq: &Sequence, cur: usize) -> Result<TransformedSequence, TransformError> {
    if seq.is_empty() {
        return Err(TransformError::FrameOutOfRange { index: cur, len: 0 });
    }
    transform_window(seq, cur, 0, seq.len() - 1)
}

/// Transforms frames `start..=end` toward `cur`; frame `cur` is kept as-is.
pub fn transform_window(seq: &Sequence, cur: usize, start: usize, end: usize) -> Result<TransformedSequence, TransformError> {
    let len = seq.len();
    if cur >= len {
        return Err(TransformError::FrameOutOfRange { index: cur, len });
    }
    if start > cur || end < cur || end >= len {
        return Err(TransformError::BadWindow { start, end, cur });
    }
    let cur_frame = seq.frame(cur);
    let results: Vec<(usize, PointCloud, Vec<Provenance>)> = (start..=end)
        .into_par_iter()
        .map(|i| {
            let frame = seq.frame(i);
            if i == cur {
                let prov = assign_instances(frame)
                    .into_iter()
                    .map(|instance| Provenance { source_frame: i, instance })
                    .collect();
                Ok((i, frame.cloud.clone(), prov))
            } else {
                transform_frame(frame, i, cur_frame).map(|(c, p)| (i, c, p))
            }
        })
        .collect::<Result<_, _>>()?;

    let mut per_frame_points = BTreeMap::new();
    let mut provenance = BTreeMap::new();
    for (i, c, p) in results {
        per_frame_points.insert(i, c);
        provenance.insert(i, p);
    }
    Ok(TransformedSequence { cur_index: cur, per_frame_points, provenance })
}
