//! Data containers for sequences, frames and grids, and their on-disk formats.
//!
//! Sequence directory layout:
//!
//! * `manifest.json` with the frame count, timestamps, frame file names and grid defaults
//! * `frame_<i>.pts` binary point files (`LWPC` header, little-endian `f32` payload)
//! * `poses.json`, `origins.json`, `boxes.json`
//! * `point_instance_ids_<i>.json`, a sparse point-index → instance-id map, when labelled
//!
//! Grid files start with `LWOG`, the grid spec as nine `f64`, the dims as three `u32`,
//! then one state byte per voxel with x slowest and z fastest.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, InstanceBox, InstanceId, Pose, Vec3};

pub const POINTS_MAGIC: &[u8; 4] = b"LWPC";
pub const GRID_MAGIC: &[u8; 4] = b"LWOG";
const POINTS_HEADER_LEN: usize = 16;
const GRID_HEADER_LEN: usize = 4 + 9 * 8 + 3 * 4;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{file}: {msg}")]
    Format { file: String, msg: String },
    #[error("{file} (frame {frame}): {msg}")]
    Invalid { file: String, frame: usize, msg: String },
    #[error("invalid grid spec: {0}")]
    GridSpec(String),
    #[error("invalid sequence: {0}")]
    Sequence(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl SceneError {
    pub fn is_io(&self) -> bool {
        matches!(self, SceneError::Io { .. })
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SceneError + '_ {
    move |source| SceneError::Io { path: path.to_path_buf(), source }
}

/// Coordinate frame a cloud is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameTag {
    /// Ego/sensor coordinates of the frame with this index.
    Ego(usize),
    /// Common coordinates anchored at the frame with this index.
    Common(usize),
    Global,
}

/// Points in meters with an optional non-negative intensity channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    intensity: Option<Vec<f32>>,
    frame: FrameTag,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, intensity: Option<Vec<f32>>, frame: FrameTag) -> Result<Self, String> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(format!("non-finite coordinate at point {i}"));
        }
        if let Some(int) = &intensity {
            if int.len() != points.len() {
                return Err(format!("intensity length {} != point count {}", int.len(), points.len()));
            }
            if let Some(i) = int.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(format!("invalid intensity at point {i}"));
            }
        }
        Ok(Self { points, intensity, frame })
    }

    /// Skips validation; callers own the finiteness invariant.
    pub fn from_points_unchecked(points: Vec<Vec3>) -> Self {
        Self { points, intensity: None, frame: FrameTag::Global }
    }

    pub fn empty(frame: FrameTag) -> Self {
        Self { points: Vec::new(), intensity: None, frame }
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn intensity(&self) -> Option<&[f32]> {
        self.intensity.as_deref()
    }

    pub fn frame(&self) -> FrameTag {
        self.frame
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn with_frame(mut self, frame: FrameTag) -> Self {
        self.frame = frame;
        self
    }

    /// Same intensity and frame tag, new coordinates (same length).
    pub(crate) fn with_points(&self, points: Vec<Vec3>) -> Self {
        debug_assert_eq!(points.len(), self.points.len());
        Self { points, intensity: self.intensity.clone(), frame: self.frame }
    }

    /// Keeps the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            intensity: self.intensity.as_ref().map(|int| indices.iter().map(|&i| int[i]).collect()),
            frame: self.frame,
        }
    }

    /// Concatenates clouds; intensity survives only if every part carries it.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a PointCloud>, frame: FrameTag) -> Self {
        let parts: Vec<&PointCloud> = parts.into_iter().collect();
        let keep_intensity = !parts.is_empty() && parts.iter().all(|p| p.intensity.is_some());
        let mut points = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut intensity = keep_intensity.then(Vec::new);
        for p in parts {
            points.extend_from_slice(&p.points);
            if let (Some(acc), Some(int)) = (intensity.as_mut(), p.intensity.as_ref()) {
                acc.extend_from_slice(int);
            }
        }
        Self { points, intensity, frame }
    }
}

/// One LiDAR sweep with its pose, sensor origin and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestamp_index: u64,
    /// Ego-to-global.
    pub pose: Pose,
    /// Sensor origin in ego coordinates.
    pub sensor_origin: Vec3,
    pub cloud: PointCloud,
    /// Boxes in this frame's ego coordinates.
    pub boxes: Vec<InstanceBox>,
    /// Per-point instance assignment, when the source provides one.
    pub point_instance_ids: Option<Vec<Option<InstanceId>>>,
}

impl Frame {
    pub fn validate(&self) -> Result<(), String> {
        if !self.sensor_origin.iter().all(|v| v.is_finite()) {
            return Err("non-finite sensor origin".into());
        }
        for b in &self.boxes {
            b.validate().map_err(|e| e.to_string())?;
        }
        let mut seen = std::collections::BTreeSet::new();
        for b in &self.boxes {
            if !seen.insert(&b.instance_id) {
                return Err(format!("duplicate instance id {}", b.instance_id));
            }
        }
        if let Some(ids) = &self.point_instance_ids {
            if ids.len() != self.cloud.len() {
                return Err(format!("{} instance assignments for {} points", ids.len(), self.cloud.len()));
            }
            for (i, id) in ids.iter().enumerate() {
                if let Some(id) = id {
                    if !seen.contains(id) {
                        return Err(format!("point {i} refers to unknown instance {id}"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn find_box(&self, id: &InstanceId) -> Option<&InstanceBox> {
        self.boxes.iter().find(|b| &b.instance_id == id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    frames: Vec<Frame>,
}

impl Sequence {
    pub fn new(frames: Vec<Frame>) -> Result<Self, SceneError> {
        if frames.is_empty() {
            return Err(SceneError::Sequence("a sequence needs at least one frame".into()));
        }
        for (i, w) in frames.windows(2).enumerate() {
            if w[1].timestamp_index <= w[0].timestamp_index {
                return Err(SceneError::Sequence(format!("timestamp index not increasing at frame {}", i + 1)));
            }
        }
        for (i, f) in frames.iter().enumerate() {
            f.validate().map_err(|msg| SceneError::Sequence(format!("frame {i}: {msg}")))?;
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &Frame {
        &self.frames[i]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Metric range and voxel size of a dense 3D grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpecRepr", into = "GridSpecRepr")]
pub struct GridSpec {
    min: [f64; 3],
    max: [f64; 3],
    voxel: [f64; 3],
    dims: [usize; 3],
}

#[derive(Serialize, Deserialize)]
struct GridSpecRepr {
    range: [f64; 6],
    voxel_size: [f64; 3],
}

impl TryFrom<GridSpecRepr> for GridSpec {
    type Error = SceneError;
    fn try_from(r: GridSpecRepr) -> Result<Self, Self::Error> {
        GridSpec::new(r.range, r.voxel_size)
    }
}

impl From<GridSpec> for GridSpecRepr {
    fn from(g: GridSpec) -> Self {
        GridSpecRepr { range: g.range(), voxel_size: g.voxel }
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::new([-40.0, -40.0, -2.0, 40.0, 40.0, 4.0], [0.4, 0.4, 0.4]).expect("default grid spec")
    }
}

impl GridSpec {
    /// `range` is `(x_min, y_min, z_min, x_max, y_max, z_max)`; each extent must be an
    /// integer multiple of the voxel size.
    pub fn new(range: [f64; 6], voxel: [f64; 3]) -> Result<Self, SceneError> {
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let (lo, hi, v) = (range[a], range[a + 3], voxel[a]);
            if !(lo.is_finite() && hi.is_finite() && v.is_finite()) {
                return Err(SceneError::GridSpec("non-finite range or voxel size".into()));
            }
            if v <= 0.0 {
                return Err(SceneError::GridSpec(format!("voxel size on axis {a} must be positive")));
            }
            if hi <= lo {
                return Err(SceneError::GridSpec(format!("axis {a}: max {hi} <= min {lo}")));
            }
            let n = (hi - lo) / v;
            let rounded = n.round();
            if (n - rounded).abs() > 1e-9 || rounded < 1.0 {
                return Err(SceneError::GridSpec(format!("axis {a}: extent {} is not a multiple of {v}", hi - lo)));
            }
            if rounded > u32::MAX as f64 {
                return Err(SceneError::GridSpec(format!("axis {a}: too many voxels")));
            }
            dims[a] = rounded as usize;
        }
        Ok(Self { min: [range[0], range[1], range[2]], max: [range[3], range[4], range[5]], voxel, dims })
    }

    pub fn range(&self) -> [f64; 6] {
        [self.min[0], self.min[1], self.min[2], self.max[0], self.max[1], self.max[2]]
    }

    pub fn min(&self) -> [f64; 3] {
        self.min
    }

    pub fn max(&self) -> [f64; 3] {
        self.max
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Index along one axis: `floor((c − min)/v)`, with `c == max` clamped to the last voxel.
    #[inline]
    pub fn axis_index(&self, axis: usize, c: f64) -> Option<usize> {
        if !(c >= self.min[axis] && c <= self.max[axis]) {
            return None;
        }
        let k = ((c - self.min[axis]) / self.voxel[axis]).floor() as usize;
        Some(k.min(self.dims[axis] - 1))
    }

    #[inline]
    pub fn voxel_of(&self, p: &Vec3) -> Option<[usize; 3]> {
        Some([self.axis_index(0, p.x)?, self.axis_index(1, p.y)?, self.axis_index(2, p.z)?])
    }

    /// Row-major offset with x slowest and z fastest.
    #[inline]
    pub fn linear(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    #[inline]
    pub fn unlinear(&self, i: usize) -> [usize; 3] {
        let z = i % self.dims[2];
        let y = (i / self.dims[2]) % self.dims[1];
        let x = i / (self.dims[2] * self.dims[1]);
        [x, y, z]
    }

    pub fn voxel_center(&self, idx: [usize; 3]) -> Vec3 {
        Vec3::from_fn(|a, _| self.min[a] + (idx[a] as f64 + 0.5) * self.voxel[a])
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// The x–y projection.
    pub fn bev(&self) -> BevSpec {
        BevSpec {
            min: [self.min[0], self.min[1]],
            max: [self.max[0], self.max[1]],
            cell: [self.voxel[0], self.voxel[1]],
            dims: [self.dims[0], self.dims[1]],
        }
    }
}

/// Ternary voxel state. The derived order `Invalid < Free < Occupied` is the merge order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
#[repr(u8)]
pub enum VoxelState {
    #[default]
    Invalid = 0,
    Free = 1,
    Occupied = 2,
}

impl VoxelState {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Invalid),
            1 => Some(Self::Free),
            2 => Some(Self::Occupied),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    spec: GridSpec,
    state: Vec<VoxelState>,
}

impl OccupancyGrid {
    pub fn new_invalid(spec: GridSpec) -> Self {
        Self { spec, state: vec![VoxelState::Invalid; spec.num_voxels()] }
    }

    pub fn from_states(spec: GridSpec, state: Vec<VoxelState>) -> Result<Self, SceneError> {
        if state.len() != spec.num_voxels() {
            return Err(SceneError::GridSpec(format!("{} states for {} voxels", state.len(), spec.num_voxels())));
        }
        Ok(Self { spec, state })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn states(&self) -> &[VoxelState] {
        &self.state
    }

    pub fn get(&self, idx: [usize; 3]) -> VoxelState {
        self.state[self.spec.linear(idx)]
    }

    /// Max-merge a single voxel.
    #[inline]
    pub fn merge_linear(&mut self, i: usize, s: VoxelState) {
        if s > self.state[i] {
            self.state[i] = s;
        }
    }

    pub fn merge(&mut self, idx: [usize; 3], s: VoxelState) {
        let i = self.spec.linear(idx);
        self.merge_linear(i, s);
    }

    pub fn count(&self, s: VoxelState) -> usize {
        self.state.iter().filter(|&&v| v == s).count()
    }

    pub fn occupied_mask(&self) -> Vec<bool> {
        self.state.iter().map(|&s| s == VoxelState::Occupied).collect()
    }
}

/// x–y cell layout of a BEV grid; cell `(ix, iy)` lives at offset `ix·ny + iy`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevSpec {
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub cell: [f64; 2],
    pub dims: [usize; 2],
}

impl BevSpec {
    pub fn num_cells(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    #[inline]
    fn axis_index(&self, a: usize, c: f64) -> Option<usize> {
        if !(c >= self.min[a] && c <= self.max[a]) {
            return None;
        }
        let k = ((c - self.min[a]) / self.cell[a]).floor() as usize;
        Some(k.min(self.dims[a] - 1))
    }

    /// Cell offset of a point's x–y projection; z is ignored.
    #[inline]
    pub fn cell_of(&self, p: &Vec3) -> Option<usize> {
        Some(self.axis_index(0, p.x)? * self.dims[1] + self.axis_index(1, p.y)?)
    }

    pub fn cell_coords(&self, cell: usize) -> [usize; 2] {
        [cell / self.dims[1], cell % self.dims[1]]
    }
}

/// Group occupancy and mask flags over a BEV grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BevMask {
    pub spec: BevSpec,
    pub group_nonempty: Vec<bool>,
    pub masked: Vec<bool>,
}

impl BevMask {
    pub fn masked_cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.masked.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
    }

    pub fn num_masked(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

// ---------------------------------------------------------------------------
// Point files

pub fn encode_points(cloud: &PointCloud) -> Vec<u8> {
    let n = cloud.len();
    let has_int = cloud.intensity().is_some();
    let stride = if has_int { 16 } else { 12 };
    let mut buf = Vec::with_capacity(POINTS_HEADER_LEN + n * stride);
    buf.extend_from_slice(POINTS_MAGIC);
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.push(has_int as u8);
    buf.extend_from_slice(&[0u8; 7]);
    for (i, p) in cloud.points().iter().enumerate() {
        for c in [p.x, p.y, p.z] {
            buf.extend_from_slice(&(c as f32).to_le_bytes());
        }
        if let Some(int) = cloud.intensity() {
            buf.extend_from_slice(&int[i].to_le_bytes());
        }
    }
    buf
}

pub fn decode_points(bytes: &[u8], file: &str, frame: FrameTag) -> Result<PointCloud, SceneError> {
    let fmt = |msg: String| SceneError::Format { file: file.to_string(), msg };
    if bytes.len() < POINTS_HEADER_LEN {
        return Err(fmt(format!("header truncated ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != POINTS_MAGIC {
        return Err(fmt("bad magic, expected LWPC".into()));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let has_int = match bytes[8] {
        0 => false,
        1 => true,
        v => return Err(fmt(format!("has_intensity flag must be 0 or 1, got {v}"))),
    };
    let stride = if has_int { 16 } else { 12 };
    let payload = &bytes[POINTS_HEADER_LEN..];
    if payload.len() != n * stride {
        return Err(fmt(format!("payload is {} bytes, header declares {n} points ({} bytes)", payload.len(), n * stride)));
    }
    let f = |o: usize| f32::from_le_bytes(payload[o..o + 4].try_into().unwrap());
    let mut points = Vec::with_capacity(n);
    let mut intensity = has_int.then(|| Vec::with_capacity(n));
    for i in 0..n {
        let o = i * stride;
        points.push(Vec3::new(f(o) as f64, f(o + 4) as f64, f(o + 8) as f64));
        if let Some(int) = intensity.as_mut() {
            int.push(f(o + 12));
        }
    }
    PointCloud::new(points, intensity, frame).map_err(fmt)
}

pub fn write_points(cloud: &PointCloud, path: &Path) -> Result<(), SceneError> {
    fs::write(path, encode_points(cloud)).map_err(io_err(path))
}

pub fn read_points(path: &Path, frame: FrameTag) -> Result<PointCloud, SceneError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_points(&bytes, &file_name(path), frame)
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}

// ---------------------------------------------------------------------------
// Grid files

/// Encodes a grid header plus raw per-voxel bytes.
pub fn encode_raw_grid(spec: &GridSpec, payload: &[u8]) -> Vec<u8> {
    debug_assert_eq!(payload.len(), spec.num_voxels());
    let mut buf = Vec::with_capacity(GRID_HEADER_LEN + payload.len());
    buf.extend_from_slice(GRID_MAGIC);
    for v in spec.range().iter().chain(spec.voxel_size().iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for d in spec.dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(payload);
    buf
}

/// Decodes a grid file into its spec and raw payload bytes.
pub fn decode_raw_grid(bytes: &[u8], file: &str) -> Result<(GridSpec, Vec<u8>), SceneError> {
    let fmt = |msg: String| SceneError::Format { file: file.to_string(), msg };
    if bytes.len() < GRID_HEADER_LEN {
        return Err(fmt(format!("header truncated ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != GRID_MAGIC {
        return Err(fmt("bad magic, expected LWOG".into()));
    }
    let f = |k: usize| f64::from_le_bytes(bytes[4 + 8 * k..12 + 8 * k].try_into().unwrap());
    let range = [f(0), f(1), f(2), f(3), f(4), f(5)];
    let voxel = [f(6), f(7), f(8)];
    let spec = GridSpec::new(range, voxel).map_err(|e| fmt(e.to_string()))?;
    let u = |k: usize| u32::from_le_bytes(bytes[76 + 4 * k..80 + 4 * k].try_into().unwrap()) as usize;
    let dims = [u(0), u(1), u(2)];
    if dims != spec.dims() {
        return Err(fmt(format!("header dims {dims:?} disagree with grid spec dims {:?}", spec.dims())));
    }
    let payload = &bytes[GRID_HEADER_LEN..];
    if payload.len() != spec.num_voxels() {
        return Err(fmt(format!("payload is {} bytes, dims {dims:?} need {}", payload.len(), spec.num_voxels())));
    }
    Ok((spec, payload.to_vec()))
}

pub fn encode_grid(grid: &OccupancyGrid) -> Vec<u8> {
    let payload: Vec<u8> = grid.states().iter().map(|&s| s as u8).collect();
    encode_raw_grid(grid.spec(), &payload)
}

pub fn decode_grid(bytes: &[u8], file: &str) -> Result<OccupancyGrid, SceneError> {
    let (spec, payload) = decode_raw_grid(bytes, file)?;
    let mut state = Vec::with_capacity(payload.len());
    for (i, &b) in payload.iter().enumerate() {
        state.push(VoxelState::from_u8(b).ok_or_else(|| SceneError::Format {
            file: file.to_string(),
            msg: format!("voxel {i} has state {b}, expected 0, 1 or 2"),
        })?);
    }
    OccupancyGrid::from_states(spec, state)
}

pub fn write_grid(grid: &OccupancyGrid, path: &Path) -> Result<(), SceneError> {
    fs::write(path, encode_grid(grid)).map_err(io_err(path))
}

pub fn read_grid(path: &Path) -> Result<OccupancyGrid, SceneError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_grid(&bytes, &file_name(path))
}

// ---------------------------------------------------------------------------
// Sequence directories

#[derive(Debug, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub num_frames: usize,
    pub timestamps: Vec<u64>,
    pub frame_files: Vec<String>,
    pub grid: GridSpec,
}

#[derive(Debug, Serialize, Deserialize)]
struct BoxRecord {
    id: String,
    center: [f64; 3],
    dims: [f64; 3],
    yaw: f64,
}

pub fn frame_file_name(i: usize) -> String {
    format!("frame_{i}.pts")
}

fn instance_file_name(i: usize) -> String {
    format!("point_instance_ids_{i}.json")
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), SceneError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| SceneError::Format {
        file: file_name(path),
        msg: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, SceneError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| SceneError::Format { file: file_name(path), msg: e.to_string() })
}

/// Writes `seq` under `dir` (created if missing) with `grid` as the recorded default.
pub fn write_sequence_with_grid(seq: &Sequence, dir: &Path, grid: &GridSpec) -> Result<(), SceneError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let n = seq.len();
    let manifest = SequenceManifest {
        num_frames: n,
        timestamps: seq.frames().iter().map(|f| f.timestamp_index).collect(),
        frame_files: (0..n).map(frame_file_name).collect(),
        grid: *grid,
    };
    write_json(&manifest, &dir.join("manifest.json"))?;
    let poses: Vec<&Pose> = seq.frames().iter().map(|f| &f.pose).collect();
    write_json(&poses, &dir.join("poses.json"))?;
    let origins: Vec<[f64; 3]> = seq.frames().iter().map(|f| f.sensor_origin.into()).collect();
    write_json(&origins, &dir.join("origins.json"))?;
    let boxes: Vec<Vec<BoxRecord>> = seq
        .frames()
        .iter()
        .map(|f| {
            f.boxes
                .iter()
                .map(|b| BoxRecord { id: b.instance_id.0.clone(), center: b.center.into(), dims: b.dims.into(), yaw: b.yaw })
                .collect()
        })
        .collect();
    write_json(&boxes, &dir.join("boxes.json"))?;
    for (i, f) in seq.frames().iter().enumerate() {
        write_points(&f.cloud, &dir.join(frame_file_name(i)))?;
        let inst_path = dir.join(instance_file_name(i));
        match &f.point_instance_ids {
            Some(ids) => {
                let sparse: BTreeMap<usize, &str> =
                    ids.iter().enumerate().filter_map(|(k, id)| id.as_ref().map(|id| (k, id.as_str()))).collect();
                write_json(&sparse, &inst_path)?;
            }
            None if inst_path.exists() => fs::remove_file(&inst_path).map_err(io_err(&inst_path))?,
            None => {}
        }
    }
    Ok(())
}

pub fn write_sequence(seq: &Sequence, dir: &Path) -> Result<(), SceneError> {
    write_sequence_with_grid(seq, dir, &GridSpec::default())
}

pub fn read_manifest(dir: &Path) -> Result<SequenceManifest, SceneError> {
    read_json(&dir.join("manifest.json"))
}

/// Loads and validates a sequence directory. Nothing is repaired; every
/// violation is reported with its file and frame index.
pub fn read_sequence(dir: &Path) -> Result<Sequence, SceneError> {
    let manifest = read_manifest(dir)?;
    let n = manifest.num_frames;
    let invalid = |file: &str, frame: usize, msg: String| SceneError::Invalid { file: file.to_string(), frame, msg };
    if n == 0 {
        return Err(SceneError::Format { file: "manifest.json".into(), msg: "num_frames must be >= 1".into() });
    }
    if manifest.frame_files.len() != n || manifest.timestamps.len() != n {
        return Err(SceneError::Format {
            file: "manifest.json".into(),
            msg: format!(
                "num_frames = {n} but {} frame files and {} timestamps",
                manifest.frame_files.len(),
                manifest.timestamps.len()
            ),
        });
    }

    let raw_poses: Vec<[[f64; 4]; 4]> = read_json(&dir.join("poses.json"))?;
    let origins: Vec<[f64; 3]> = read_json(&dir.join("origins.json"))?;
    let raw_boxes: Vec<Vec<BoxRecord>> = read_json(&dir.join("boxes.json"))?;
    for (file, len) in [("poses.json", raw_poses.len()), ("origins.json", origins.len()), ("boxes.json", raw_boxes.len())] {
        if len != n {
            return Err(SceneError::Format { file: file.into(), msg: format!("{len} entries for {n} frames") });
        }
    }

    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let mut flat = [0.0; 16];
        for (r, row) in raw_poses[i].iter().enumerate() {
            flat[r * 4..r * 4 + 4].copy_from_slice(row);
        }
        let pose = Pose::from_row_major(&flat).map_err(|e| invalid("poses.json", i, e.to_string()))?;
        let boxes = raw_boxes[i]
            .iter()
            .map(|b| {
                let bx = InstanceBox {
                    instance_id: InstanceId::new(b.id.clone()),
                    center: b.center.into(),
                    dims: b.dims.into(),
                    yaw: b.yaw,
                };
                bx.validate().map(|_| bx).map_err(|e| invalid("boxes.json", i, e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;

        let pts_name = &manifest.frame_files[i];
        let pts_path = dir.join(pts_name);
        if !pts_path.is_file() {
            return Err(SceneError::Io {
                path: pts_path,
                source: io::Error::new(io::ErrorKind::NotFound, format!("frame file {pts_name} for frame {i} is missing")),
            });
        }
        let cloud = read_points(&pts_path, FrameTag::Ego(i))?;

        let inst_name = instance_file_name(i);
        let inst_path = dir.join(&inst_name);
        let point_instance_ids = if inst_path.is_file() {
            let sparse: BTreeMap<usize, String> = read_json(&inst_path)?;
            let mut ids = vec![None; cloud.len()];
            for (k, id) in sparse {
                if k >= cloud.len() {
                    return Err(invalid(&inst_name, i, format!("point index {k} out of range ({} points)", cloud.len())));
                }
                ids[k] = Some(InstanceId::new(id));
            }
            Some(ids)
        } else {
            None
        };

        let frame = Frame {
            timestamp_index: manifest.timestamps[i],
            pose,
            sensor_origin: origins[i].into(),
            cloud,
            boxes,
            point_instance_ids,
        };
        frame.validate().map_err(|msg| invalid(if msg.contains("instance") { &inst_name } else { "boxes.json" }, i, msg))?;
        frames.push(frame);
    }
    Sequence::new(frames)
}
