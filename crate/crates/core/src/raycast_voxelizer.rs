//! Ray-cast voxelization: sparse network inputs and completed-occupancy labels.
//!
//! Each ray runs from the sensor origin to a measured point. Voxels strictly
//! before the endpoint become `Free`, the endpoint voxel becomes `Occupied`,
//! and untouched voxels stay `Invalid`. States merge by max, so ray order and
//! thread count never change the result.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{apply_pose, compose, invert_pose, GeometryError, Pose, Vec3};
use crate::scene_model::{
    write_grid, write_json, write_points, FrameTag, GridSpec, OccupancyGrid, PointCloud, SceneError, Sequence,
    VoxelState,
};
use crate::sequence_transform::{transform_window, TransformError, TransformedSequence};

/// Rays per parallel work unit.
const RAY_CHUNK: usize = 2048;

#[derive(Debug, Error)]
pub enum OcfError {
    #[error("input window underflows the sequence: cur {cur} - n_pre {n_pre} < 0")]
    InputUnderflow { cur: usize, n_pre: usize },
    #[error("label window overflows the sequence: cur {cur} + n_post {n_post} > last index {last}")]
    LabelOverflow { cur: usize, n_post: usize, last: usize },
    #[error("transformed sequence lacks frame {0}")]
    MissingFrame(usize),
    #[error("non-finite sensor origin")]
    BadOrigin,
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Walks the voxels of the segment `origin → end` clipped to the grid, calling
/// `visit(linear_index, state)` for each. The endpoint voxel is reported as
/// `Occupied` only when `end` lies inside the grid.
pub fn trace_ray(origin: &Vec3, end: &Vec3, spec: &GridSpec, mut visit: impl FnMut(usize, VoxelState)) {
    let d = end - origin;
    let end_voxel = spec.voxel_of(end);
    if d == Vec3::zeros() {
        if let Some(v) = end_voxel {
            visit(spec.linear(v), VoxelState::Occupied);
        }
        return;
    }

    let (lo, hi, size, dims) = (spec.min(), spec.max(), spec.voxel_size(), spec.dims());
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for a in 0..3 {
        if d[a] == 0.0 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return;
            }
        } else {
            let (mut ta, mut tb) = ((lo[a] - origin[a]) / d[a], (hi[a] - origin[a]) / d[a]);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
    }
    if end_voxel.is_some() {
        t0 = t0.min(1.0);
        t1 = 1.0;
    }
    if t0 > t1 {
        return;
    }

    let clamp_index = |a: usize, c: f64| -> i64 {
        let k = ((c - lo[a]) / size[a]).floor();
        (k.max(0.0) as i64).min(dims[a] as i64 - 1)
    };
    let start: [i64; 3] = match spec.voxel_of(origin) {
        Some(v) if t0 == 0.0 => v.map(|k| k as i64),
        _ => {
            let s = origin + d * t0;
            [clamp_index(0, s.x), clamp_index(1, s.y), clamp_index(2, s.z)]
        }
    };
    let stop: [i64; 3] = match end_voxel {
        Some(v) => v.map(|k| k as i64),
        None => {
            let e = origin + d * t1;
            [clamp_index(0, e.x), clamp_index(1, e.y), clamp_index(2, e.z)]
        }
    };

    let mut step = [0i64; 3];
    let mut remaining = [0i64; 3];
    for a in 0..3 {
        step[a] = if d[a] > 0.0 { 1 } else if d[a] < 0.0 { -1 } else { 0 };
        let delta = stop[a] - start[a];
        // A disagreement in sign can only come from rounding at a face.
        remaining[a] = if delta * step[a] > 0 { delta.abs() } else { 0 };
    }

    let linear = |v: [i64; 3]| ((v[0] as usize) * dims[1] + v[1] as usize) * dims[2] + v[2] as usize;
    let boundary_t = |a: usize, k: i64| -> f64 {
        let plane = lo[a] + (k + i64::from(step[a] > 0)) as f64 * size[a];
        (plane - origin[a]) / d[a]
    };

    let mut cur = start;
    let mut t_max = [f64::INFINITY; 3];
    for a in 0..3 {
        if remaining[a] > 0 {
            t_max[a] = boundary_t(a, cur[a]);
        }
    }
    while remaining.iter().any(|&r| r > 0) {
        let mut axis = 3;
        for a in 0..3 {
            if remaining[a] > 0 && (axis == 3 || t_max[a] < t_max[axis]) {
                axis = a;
            }
        }
        visit(linear(cur), VoxelState::Free);
        cur[axis] += step[axis];
        remaining[axis] -= 1;
        t_max[axis] = if remaining[axis] > 0 { boundary_t(axis, cur[axis]) } else { f64::INFINITY };
    }
    let last = if end_voxel.is_some() { VoxelState::Occupied } else { VoxelState::Free };
    visit(linear(cur), last);
}

fn cast_into(grid: &mut OccupancyGrid, origin: &Vec3, points: &[Vec3]) {
    let spec = *grid.spec();
    for p in points {
        trace_ray(origin, p, &spec, |i, s| grid.merge_linear(i, s));
    }
}

/// Casts one ray per point from `origin` and returns the merged ternary grid.
pub fn raycast(origin: &Vec3, cloud: &PointCloud, spec: &GridSpec) -> Result<OccupancyGrid, OcfError> {
    if !origin.iter().all(|v| v.is_finite()) {
        return Err(OcfError::BadOrigin);
    }
    let points = cloud.points();
    if points.len() <= RAY_CHUNK {
        let mut grid = OccupancyGrid::new_invalid(*spec);
        cast_into(&mut grid, origin, points);
        return Ok(grid);
    }
    let grid = points
        .par_chunks(RAY_CHUNK)
        .map(|chunk| {
            let mut g = OccupancyGrid::new_invalid(*spec);
            cast_into(&mut g, origin, chunk);
            g
        })
        .reduce(
            || OccupancyGrid::new_invalid(*spec),
            |mut a, b| {
                for (i, &s) in b.states().iter().enumerate() {
                    a.merge_linear(i, s);
                }
                a
            },
        );
    Ok(grid)
}

/// Voxels containing at least one in-range point.
pub fn voxelize_points(cloud: &PointCloud, spec: &GridSpec) -> BTreeSet<[usize; 3]> {
    cloud.points().iter().filter_map(|p| spec.voxel_of(p)).collect()
}

/// `T_cur⁻¹ · T_i`: frame-`i` ego coordinates into frame-`cur` coordinates.
pub fn frame_to_cur(seq: &Sequence, i: usize, cur: usize) -> Pose {
    compose(&invert_pose(&seq.frame(cur).pose), &seq.frame(i).pose)
}

/// Raw clouds of frames `cur − n_pre ..= cur` in `cur` coordinates, oldest first.
pub fn build_inputs(seq: &Sequence, cur: usize, n_pre: usize) -> Result<Vec<PointCloud>, OcfError> {
    if n_pre > cur {
        return Err(OcfError::InputUnderflow { cur, n_pre });
    }
    check_index(seq, cur)?;
    (cur - n_pre..=cur)
        .map(|i| Ok(apply_pose(&frame_to_cur(seq, i, cur), &seq.frame(i).cloud)?.with_frame(FrameTag::Common(cur))))
        .collect()
}

/// Ray casts of the input clouds from their own sensor origins, in `cur` coordinates.
pub fn build_input_occupancy(
    seq: &Sequence,
    cur: usize,
    n_pre: usize,
    spec: &GridSpec,
) -> Result<Vec<OccupancyGrid>, OcfError> {
    let inputs = build_inputs(seq, cur, n_pre)?;
    inputs
        .iter()
        .zip(cur - n_pre..=cur)
        .map(|(cloud, i)| raycast(&origin_in_cur(seq, i, cur), cloud, spec))
        .collect()
}

fn check_index(seq: &Sequence, i: usize) -> Result<(), OcfError> {
    if i >= seq.len() {
        return Err(TransformError::FrameOutOfRange { index: i, len: seq.len() }.into());
    }
    Ok(())
}

/// Sensor origin of frame `i` expressed in frame-`cur` coordinates.
pub fn origin_in_cur(seq: &Sequence, i: usize, cur: usize) -> Vec3 {
    frame_to_cur(seq, i, cur).transform_point(&seq.frame(i).sensor_origin)
}

/// Aggregation window of label time `i`: `[max(i − n_pre, 0), min(i + n_post, L − 1)]`.
pub fn label_window(i: usize, n_pre: usize, n_post: usize, len: usize) -> (usize, usize) {
    (i.saturating_sub(n_pre), (i + n_post).min(len - 1))
}

/// Which clouds feed the completed-occupancy labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// Ghost-filtered, instance-aligned clouds.
    #[default]
    Transformed,
    /// Raw sensor clouds.
    Raw,
}

/// Label for time `transformed.cur_index`: its aggregation window of transformed
/// clouds, mapped into `cur` coordinates and ray cast from that time's sensor origin.
pub fn build_label_from(
    seq: &Sequence,
    transformed: &TransformedSequence,
    cur: usize,
    n_pre: usize,
    n_post: usize,
    spec: &GridSpec,
) -> Result<OccupancyGrid, OcfError> {
    let i = transformed.cur_index;
    check_index(seq, i)?;
    check_index(seq, cur)?;
    let (start, end) = label_window(i, n_pre, n_post, seq.len());
    let mut parts = Vec::with_capacity(end - start + 1);
    for j in start..=end {
        let cloud = transformed.per_frame_points.get(&j).ok_or(OcfError::MissingFrame(j))?;
        parts.push(apply_pose(&frame_to_cur(seq, j, cur), cloud)?);
    }
    let aggregated = PointCloud::concat(&parts, FrameTag::Common(cur));
    raycast(&origin_in_cur(seq, i, cur), &aggregated, spec)
}

fn build_label_raw(seq: &Sequence, cur: usize, i: usize, n_pre: usize, n_post: usize, spec: &GridSpec) -> Result<OccupancyGrid, OcfError> {
    let (start, end) = label_window(i, n_pre, n_post, seq.len());
    let parts = (start..=end)
        .map(|j| apply_pose(&frame_to_cur(seq, j, cur), &seq.frame(j).cloud))
        .collect::<Result<Vec<_>, _>>()?;
    let aggregated = PointCloud::concat(&parts, FrameTag::Common(cur));
    raycast(&origin_in_cur(seq, i, cur), &aggregated, spec)
}

/// Completed-occupancy labels for times `cur ..= cur + n_post`, all in `cur` coordinates.
///
/// With [`LabelSource::Transformed`] each label time `i` aligns instances to
/// its own boxes, so moving objects appear where they are at time `i`.
pub fn build_labels(
    seq: &Sequence,
    cur: usize,
    n_pre: usize,
    n_post: usize,
    spec: &GridSpec,
    source: LabelSource,
) -> Result<Vec<OccupancyGrid>, OcfError> {
    check_index(seq, cur)?;
    let last = seq.len() - 1;
    if cur + n_post > last {
        return Err(OcfError::LabelOverflow { cur, n_post, last });
    }
    (cur..=cur + n_post)
        .into_par_iter()
        .map(|i| match source {
            LabelSource::Transformed => {
                let (start, end) = label_window(i, n_pre, n_post, seq.len());
                let t = transform_window(seq, i, start, end)?;
                build_label_from(seq, &t, cur, n_pre, n_post, spec)
            }
            LabelSource::Raw => build_label_raw(seq, cur, i, n_pre, n_post, spec),
        })
        .collect()
}

/// Network inputs and label grids for one reference frame.
#[derive(Debug, Clone, PartialEq)]
pub struct OcfSample {
    pub cur_index: usize,
    pub inputs: Vec<PointCloud>,
    pub labels: Vec<OccupancyGrid>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcfParams {
    pub n_pre: usize,
    pub n_post: usize,
    pub grid: GridSpec,
    #[serde(default)]
    pub label_source: LabelSource,
}

impl Default for OcfParams {
    fn default() -> Self {
        Self { n_pre: 5, n_post: 5, grid: GridSpec::default(), label_source: LabelSource::Transformed }
    }
}

pub fn build_sample(seq: &Sequence, cur: usize, params: &OcfParams) -> Result<OcfSample, OcfError> {
    let inputs = build_inputs(seq, cur, params.n_pre)?;
    let labels = build_labels(seq, cur, params.n_pre, params.n_post, &params.grid, params.label_source)?;
    Ok(OcfSample { cur_index: cur, inputs, labels })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleMetadata {
    pub cur_index: usize,
    pub n_pre: usize,
    pub n_post: usize,
    pub grid: GridSpec,
    pub label_source: LabelSource,
    pub input_files: Vec<String>,
    pub label_files: Vec<String>,
}

/// Writes `input_<k>.pts`, `label_<k>.grid` and `sample.json` into `dir`.
/// Returns the written file names in a fixed order.
pub fn write_sample(sample: &OcfSample, params: &OcfParams, dir: &Path) -> Result<Vec<String>, SceneError> {
    std::fs::create_dir_all(dir).map_err(|source| SceneError::Io { path: dir.to_path_buf(), source })?;
    let input_files: Vec<String> = (0..sample.inputs.len()).map(|k| format!("input_{k}.pts")).collect();
    let label_files: Vec<String> = (0..sample.labels.len()).map(|k| format!("label_{k}.grid")).collect();
    for (cloud, name) in sample.inputs.iter().zip(&input_files) {
        write_points(cloud, &dir.join(name))?;
    }
    for (grid, name) in sample.labels.iter().zip(&label_files) {
        write_grid(grid, &dir.join(name))?;
    }
    let meta = SampleMetadata {
        cur_index: sample.cur_index,
        n_pre: params.n_pre,
        n_post: params.n_post,
        grid: params.grid,
        label_source: params.label_source,
        input_files: input_files.clone(),
        label_files: label_files.clone(),
    };
    write_json(&meta, &dir.join("sample.json"))?;
    let mut files = input_files;
    files.extend(label_files);
    files.push("sample.json".into());
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_model::Frame;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_spec() -> GridSpec {
        GridSpec::new([0.0, 0.0, 0.0, 4.0, 4.0, 4.0], [0.4, 0.4, 0.4]).unwrap()
    }

    fn cloud(points: Vec<Vec3>) -> PointCloud {
        PointCloud::new(points, None, FrameTag::Ego(0)).unwrap()
    }

    #[test]
    fn axis_aligned_ray_hand_enumerated() {
        let spec = small_spec();
        let g = raycast(&Vec3::new(0.2, 0.2, 0.2), &cloud(vec![Vec3::new(3.4, 0.2, 0.2)]), &spec).unwrap();
        for x in 0..10 {
            for y in 0..10 {
                for z in 0..10 {
                    let expect = match (x, y, z) {
                        (0..=7, 0, 0) => VoxelState::Free,
                        (8, 0, 0) => VoxelState::Occupied,
                        _ => VoxelState::Invalid,
                    };
                    assert_eq!(g.get([x, y, z]), expect, "voxel {x},{y},{z}");
                }
            }
        }
    }

    #[test]
    fn empty_cloud_is_all_invalid() {
        let g = raycast(&Vec3::new(1.0, 1.0, 1.0), &cloud(vec![]), &small_spec()).unwrap();
        assert_eq!(g.count(VoxelState::Invalid), 1000);
    }

    #[test]
    fn zero_length_ray_marks_only_endpoint() {
        let p = Vec3::new(1.3, 2.1, 0.5);
        let g = raycast(&p, &cloud(vec![p]), &small_spec()).unwrap();
        assert_eq!(g.count(VoxelState::Occupied), 1);
        assert_eq!(g.count(VoxelState::Free), 0);
    }

    #[test]
    fn out_of_range_point_carves_without_occupying() {
        let g = raycast(&Vec3::new(0.2, 0.2, 0.2), &cloud(vec![Vec3::new(10.0, 0.2, 0.2)]), &small_spec()).unwrap();
        assert_eq!(g.count(VoxelState::Occupied), 0);
        assert_eq!(g.count(VoxelState::Free), 10);
    }

    #[test]
    fn origin_outside_enters_at_range_face() {
        let g = raycast(&Vec3::new(-5.0, 0.2, 0.2), &cloud(vec![Vec3::new(1.0, 0.2, 0.2)]), &small_spec()).unwrap();
        assert_eq!(g.get([0, 0, 0]), VoxelState::Free);
        assert_eq!(g.get([1, 0, 0]), VoxelState::Free);
        assert_eq!(g.get([2, 0, 0]), VoxelState::Occupied);
        assert_eq!(g.count(VoxelState::Free), 2);
        let miss = raycast(&Vec3::new(-5.0, -5.0, 0.2), &cloud(vec![Vec3::new(-1.0, 8.0, 0.2)]), &small_spec()).unwrap();
        assert_eq!(miss.count(VoxelState::Invalid), 1000);
    }

    #[test]
    fn occupied_dominates_regardless_of_order() {
        let spec = small_spec();
        let o = Vec3::new(0.2, 0.2, 0.2);
        let near = Vec3::new(1.0, 0.2, 0.2);
        let far = Vec3::new(3.0, 0.2, 0.2);
        let a = raycast(&o, &cloud(vec![near, far]), &spec).unwrap();
        let b = raycast(&o, &cloud(vec![far, near]), &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.get([2, 0, 0]), VoxelState::Occupied);
    }

    #[test]
    fn adding_points_is_monotone() {
        let spec = GridSpec::new([-4.0, -4.0, -2.0, 4.0, 4.0, 2.0], [0.4, 0.4, 0.4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let o = Vec3::new(0.1, -0.3, 0.5);
        let pts: Vec<Vec3> = (0..3000)
            .map(|_| Vec3::new(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0), rng.random_range(-3.0..3.0)))
            .collect();
        let small = raycast(&o, &cloud(pts[..500].to_vec()), &spec).unwrap();
        let big = raycast(&o, &cloud(pts.clone()), &spec).unwrap();
        for (a, b) in small.states().iter().zip(big.states()) {
            assert!(b >= a);
        }
        // Parallel and sequential paths agree.
        let mut seq_grid = OccupancyGrid::new_invalid(spec);
        cast_into(&mut seq_grid, &o, &pts);
        assert_eq!(seq_grid, big);
    }

    #[test]
    fn voxelize_matches_floor_division() {
        let spec = GridSpec::new([-4.0, -4.0, -2.0, 4.0, 4.0, 2.0], [0.4, 0.4, 0.4]).unwrap();
        assert!(voxelize_points(&cloud(vec![]), &spec).is_empty());
        assert_eq!(voxelize_points(&cloud(vec![Vec3::new(0.01, 0.01, 0.01)]), &spec).len(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<Vec3> = (0..2000)
            .map(|_| Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-3.0..3.0)))
            .collect();
        let got = voxelize_points(&cloud(pts.clone()), &spec);
        let mut expect = BTreeSet::new();
        for p in &pts {
            let inside = p.x >= -4.0 && p.x <= 4.0 && p.y >= -4.0 && p.y <= 4.0 && p.z >= -2.0 && p.z <= 2.0;
            if inside {
                let f = |c: f64, lo: f64, n: usize| (((c - lo) / 0.4).floor() as usize).min(n - 1);
                expect.insert([f(p.x, -4.0, 20), f(p.y, -4.0, 20), f(p.z, -2.0, 10)]);
            }
        }
        assert_eq!(got, expect);
    }

    fn static_frames(poses: &[Pose], world: &[Vec3]) -> Sequence {
        let frames = poses
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let inv = invert_pose(p);
                Frame {
                    timestamp_index: i as u64,
                    pose: *p,
                    sensor_origin: Vec3::new(0.0, 0.0, 1.8),
                    cloud: PointCloud::new(world.iter().map(|w| inv.transform_point(w)).collect(), None, FrameTag::Ego(i))
                        .unwrap(),
                    boxes: vec![],
                    point_instance_ids: None,
                }
            })
            .collect();
        Sequence::new(frames).unwrap()
    }

    #[test]
    fn inputs_coincide_for_static_world() {
        let world = vec![Vec3::new(5.0, 1.0, 0.2), Vec3::new(-7.0, 3.0, 1.1), Vec3::new(12.0, -9.0, 0.0)];
        let poses: Vec<Pose> =
            (0..4).map(|i| Pose::from_yaw_translation(0.05 * i as f64, Vec3::new(1.3 * i as f64, 0.2, 0.0))).collect();
        let seq = static_frames(&poses, &world);
        let inputs = build_inputs(&seq, 3, 3).unwrap();
        assert_eq!(inputs.len(), 4);
        for c in &inputs {
            for (a, b) in c.points().iter().zip(inputs[3].points()) {
                assert!((a - b).amax() < 1e-6);
            }
        }
        assert_eq!(build_inputs(&seq, 2, 0).unwrap()[0], seq.frame(2).cloud.clone().with_frame(FrameTag::Common(2)));
        assert!(matches!(build_inputs(&seq, 2, 3), Err(OcfError::InputUnderflow { .. })));
    }

    #[test]
    fn single_frame_label_is_plain_raycast() {
        let world = vec![Vec3::new(5.0, 1.0, 0.2), Vec3::new(-7.0, 3.0, 1.1)];
        let seq = static_frames(&[Pose::from_yaw_translation(0.3, Vec3::new(2.0, 1.0, 0.0))], &world);
        let spec = GridSpec::default();
        let labels = build_labels(&seq, 0, 0, 0, &spec, LabelSource::Transformed).unwrap();
        let direct = raycast(&seq.frame(0).sensor_origin, &seq.frame(0).cloud, &spec).unwrap();
        assert_eq!(labels, vec![direct]);
        assert!(matches!(
            build_labels(&seq, 0, 0, 1, &spec, LabelSource::Raw),
            Err(OcfError::LabelOverflow { .. })
        ));
    }

    #[test]
    fn label_window_clamps_both_ends() {
        assert_eq!(label_window(2, 5, 5, 11), (0, 7));
        assert_eq!(label_window(8, 5, 5, 11), (3, 10));
    }
}
