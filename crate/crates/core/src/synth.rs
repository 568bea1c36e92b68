//! Deterministic synthetic LiDAR scenes and their analytic occupancy.
//!
//! The ego drives on the `z = 0` ground plane with a constant speed and yaw
//! rate. Objects are oriented boxes in linear motion. Each frame casts a fixed
//! fan of rays from the sensor and keeps the nearest exact intersection.

use std::collections::BTreeSet;
use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{invert_pose, rot_z, InstanceBox, InstanceId, Pose, Vec3};
use crate::scene_model::{Frame, FrameTag, GridSpec, PointCloud, SceneError, Sequence};

/// Hits closer than this to the sensor are ignored.
const MIN_HIT_DISTANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoTrajectory {
    /// Metres per frame along the current heading.
    pub speed: f64,
    /// Radians per frame.
    pub yaw_rate: f64,
    pub sensor_height: f64,
}

impl Default for EgoTrajectory {
    fn default() -> Self {
        Self { speed: 0.0, yaw_rate: 0.0, sensor_height: 1.8 }
    }
}

/// A box moving linearly in global coordinates, live for frames `spawn..despawn`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectConfig {
    pub id: String,
    pub dims: [f64; 3],
    /// Center at frame 0.
    pub center: [f64; 3],
    pub yaw: f64,
    /// Metres per frame.
    pub velocity: [f64; 3],
    pub spawn: usize,
    pub despawn: usize,
}

impl ObjectConfig {
    pub fn is_live(&self, frame: usize) -> bool {
        self.spawn <= frame && frame < self.despawn
    }

    /// Global box at `frame`.
    pub fn box_at(&self, frame: usize) -> InstanceBox {
        let t = frame as f64;
        let c = Vec3::from(self.center) + t * Vec3::from(self.velocity);
        InstanceBox {
            instance_id: InstanceId::new(self.id.clone()),
            center: c,
            dims: Vec3::from(self.dims),
            yaw: self.yaw,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarConfig {
    pub num_azimuth: usize,
    pub num_elevation: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub max_range: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self { num_azimuth: 360, num_elevation: 32, elevation_min_deg: -25.0, elevation_max_deg: 5.0, max_range: 80.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub num_frames: usize,
    #[serde(default)]
    pub ego: EgoTrajectory,
    #[serde(default)]
    pub objects: Vec<ObjectConfig>,
    #[serde(default)]
    pub lidar: LidarConfig,
    #[serde(default)]
    pub ground: bool,
    #[serde(default)]
    pub rng_seed: u64,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.num_frames == 0 {
            return bad("num_frames must be at least 1".into());
        }
        let l = &self.lidar;
        if l.num_azimuth == 0 || l.num_elevation == 0 {
            return bad("ray counts must be at least 1".into());
        }
        if l.max_range.is_nan() || l.max_range <= 0.0 || l.elevation_min_deg > l.elevation_max_deg {
            return bad("lidar range must be positive and elevation_min ≤ elevation_max".into());
        }
        let e = &self.ego;
        if ![e.speed, e.yaw_rate, e.sensor_height].iter().all(|v| v.is_finite()) {
            return bad("non-finite ego trajectory".into());
        }
        let mut ids = BTreeSet::new();
        for o in &self.objects {
            if o.despawn <= o.spawn {
                return bad(format!("object {}: despawn {} must exceed spawn {}", o.id, o.despawn, o.spawn));
            }
            if !ids.insert(o.id.as_str()) {
                return bad(format!("duplicate object id {}", o.id));
            }
            o.box_at(0).validate().map_err(|e| SynthError::Config(e.to_string()))?;
            if !o.center.iter().chain(&o.velocity).chain([&o.yaw]).all(|v| v.is_finite()) {
                return bad(format!("object {}: non-finite motion", o.id));
            }
        }
        Ok(())
    }

    /// Ego-to-global pose at `frame`.
    pub fn ego_pose(&self, frame: usize) -> Pose {
        let mut pos = Vec3::zeros();
        for k in 0..frame {
            let yaw = k as f64 * self.ego.yaw_rate;
            pos += self.ego.speed * Vec3::new(yaw.cos(), yaw.sin(), 0.0);
        }
        Pose::from_yaw_translation(frame as f64 * self.ego.yaw_rate, pos)
    }

    pub fn sensor_origin(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, self.ego.sensor_height)
    }

    /// Live boxes of `frame` in the coordinates of `reference` frame.
    pub fn boxes_in(&self, frame: usize, reference: usize) -> Vec<InstanceBox> {
        let to_ref = invert_pose(&self.ego_pose(reference));
        self.objects.iter().filter(|o| o.is_live(frame)).map(|o| o.box_at(frame).transformed(&to_ref)).collect()
    }

    /// Unit ray directions in ego coordinates, azimuth-major.
    pub fn ray_directions(&self) -> Vec<Vec3> {
        let l = &self.lidar;
        let phase = ChaCha8Rng::seed_from_u64(self.rng_seed).random_range(0.0..TAU / l.num_azimuth as f64);
        let mut dirs = Vec::with_capacity(l.num_azimuth * l.num_elevation);
        for a in 0..l.num_azimuth {
            let az = phase + TAU * a as f64 / l.num_azimuth as f64;
            for e in 0..l.num_elevation {
                let frac = if l.num_elevation == 1 { 0.0 } else { e as f64 / (l.num_elevation - 1) as f64 };
                let el = (l.elevation_min_deg + frac * (l.elevation_max_deg - l.elevation_min_deg)).to_radians();
                dirs.push(Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()));
            }
        }
        dirs
    }
}

/// Entry distance of the ray `o + t·d` into a box, if it enters at `t > 0`.
pub fn ray_box_entry(o: &Vec3, d: &Vec3, b: &InstanceBox) -> Option<f64> {
    let r = rot_z(-b.yaw);
    let lo = r * (o - b.center);
    let ld = r * d;
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        let h = b.dims[a] / 2.0;
        if ld[a] == 0.0 {
            if lo[a].abs() > h {
                return None;
            }
            continue;
        }
        let (ta, tb) = ((-h - lo[a]) / ld[a], (h - lo[a]) / ld[a]);
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    (t0 <= t1 && t0 > MIN_HIT_DISTANCE).then_some(t0)
}

/// Distance along `o + t·d` to the plane `z = 0`.
pub fn ray_ground(o: &Vec3, d: &Vec3) -> Option<f64> {
    if d.z >= 0.0 {
        return None;
    }
    let t = -o.z / d.z;
    (t > MIN_HIT_DISTANCE).then_some(t)
}

fn simulate_frame(cfg: &SceneConfig, frame: usize, dirs: &[Vec3]) -> Frame {
    let boxes = cfg.boxes_in(frame, frame);
    let origin = cfg.sensor_origin();
    let mut points = Vec::new();
    let mut ids = Vec::new();
    for d in dirs {
        let mut best: Option<(f64, Option<usize>)> = None;
        if cfg.ground {
            best = ray_ground(&origin, d).map(|t| (t, None));
        }
        for (k, b) in boxes.iter().enumerate() {
            if let Some(t) = ray_box_entry(&origin, d, b) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, Some(k)));
                }
            }
        }
        if let Some((t, hit)) = best {
            if t <= cfg.lidar.max_range {
                points.push(origin + t * d);
                ids.push(hit.map(|k| boxes[k].instance_id.clone()));
            }
        }
    }
    Frame {
        timestamp_index: frame as u64,
        pose: cfg.ego_pose(frame),
        sensor_origin: origin,
        cloud: PointCloud::from_points_unchecked(points).with_frame(FrameTag::Ego(frame)),
        boxes,
        point_instance_ids: Some(ids),
    }
}

/// Simulates every frame of the scene.
pub fn generate(cfg: &SceneConfig) -> Result<Sequence, SynthError> {
    cfg.validate()?;
    let dirs = cfg.ray_directions();
    let frames = (0..cfg.num_frames).map(|f| simulate_frame(cfg, f, &dirs)).collect();
    Ok(Sequence::new(frames)?)
}

/// Voxels of `spec` whose centers lie inside a live box of `frame` or within
/// half a voxel of the ground, all in the coordinates of `reference`.
pub fn analytic_occupancy_in(cfg: &SceneConfig, frame: usize, reference: usize, spec: &GridSpec) -> BTreeSet<[usize; 3]> {
    let mut out = BTreeSet::new();
    let [nx, ny, nz] = spec.dims();
    let (min, vox) = (spec.min(), spec.voxel_size());
    let index_range = |a: usize, lo: f64, hi: f64, n: usize| {
        let first = ((lo - min[a]) / vox[a] - 0.5).ceil().max(0.0) as usize;
        let last = ((hi - min[a]) / vox[a] - 0.5).floor();
        if last < 0.0 {
            return first..first;
        }
        first..(last as usize + 1).min(n)
    };
    for b in cfg.boxes_in(frame, reference) {
        let corners = b.corners();
        let lo = corners.iter().fold(Vec3::repeat(f64::INFINITY), |m, c| m.inf(c));
        let hi = corners.iter().fold(Vec3::repeat(f64::NEG_INFINITY), |m, c| m.sup(c));
        // One voxel of slack absorbs rounding in the index bounds.
        for ix in index_range(0, lo.x - vox[0], hi.x + vox[0], nx) {
            for iy in index_range(1, lo.y - vox[1], hi.y + vox[1], ny) {
                for iz in index_range(2, lo.z - vox[2], hi.z + vox[2], nz) {
                    if b.contains(&spec.voxel_center([ix, iy, iz]), 0.0) {
                        out.insert([ix, iy, iz]);
                    }
                }
            }
        }
    }
    if cfg.ground {
        for iz in 0..nz {
            if spec.voxel_center([0, 0, iz]).z.abs() <= vox[2] / 2.0 {
                for ix in 0..nx {
                    for iy in 0..ny {
                        out.insert([ix, iy, iz]);
                    }
                }
            }
        }
    }
    out
}

pub fn analytic_occupancy(cfg: &SceneConfig, frame: usize, spec: &GridSpec) -> BTreeSet<[usize; 3]> {
    analytic_occupancy_in(cfg, frame, frame, spec)
}

/// A random scene with a ground plane and one to four moving boxes.
pub fn random_scene(seed: u64, num_frames: usize, lidar: LidarConfig) -> SceneConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ego = EgoTrajectory {
        speed: rng.random_range(0.0..1.5),
        yaw_rate: rng.random_range(-0.05..0.05),
        sensor_height: rng.random_range(1.6..2.2),
    };
    let objects = (0..rng.random_range(1..=4))
        .map(|k| {
            let dims = [rng.random_range(3.0..5.0), rng.random_range(1.5..2.2), rng.random_range(1.4..2.0)];
            let (dist, bearing): (f64, f64) = (rng.random_range(5.0..20.0), rng.random_range(0.0..TAU));
            ObjectConfig {
                id: format!("obj{k}"),
                dims,
                center: [dist * bearing.cos(), dist * bearing.sin(), dims[2] / 2.0],
                yaw: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
                velocity: [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0],
                spawn: 0,
                despawn: num_frames,
            }
        })
        .collect();
    SceneConfig { num_frames, ego, objects, lidar, ground: true, rng_seed: rng.random() }
}
