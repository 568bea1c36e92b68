//! Batch preparation of OCF samples and group masks over a corpus of sequence
//! directories, with a run manifest of checksums and timings.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::group_masking::{mask_counts, mask_window, CellKind, MaskConfig, MaskCounts};
use crate::raycast_voxelizer::{build_sample, write_sample, OcfParams};
use crate::scene_model::{encode_raw_grid, read_sequence, write_json, write_points, GridSpec, SceneError, Sequence};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

impl PipelineError {
    pub fn is_io(&self) -> bool {
        match self {
            PipelineError::Io { .. } => true,
            PipelineError::Scene(e) => e.is_io(),
            _ => false,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub checksum: String,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub sequence: String,
    pub cur: Option<usize>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub params: serde_json::Value,
    pub samples: Vec<SampleRecord>,
    pub failures: Vec<FailureRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    pub half_width: usize,
    pub ratio_nonempty: f64,
    pub ratio_empty: f64,
    pub seed: u64,
    pub grid: GridSpec,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self { half_width: 5, ratio_nonempty: 0.5, ratio_empty: 0.5, seed: 0, grid: GridSpec::default() }
    }
}

/// Reference indices with a full window of `before` past and `after` future frames.
pub fn eligible_indices(len: usize, before: usize, after: usize) -> std::ops::Range<usize> {
    if len < before + after + 1 {
        return 0..0;
    }
    before..len - after
}

/// SHA-256 over the sorted file names and contents of a directory.
pub fn dir_checksum(dir: &Path) -> Result<String, PipelineError> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<Result<_, _>>()
        .map_err(io_err(dir))?;
    names.sort();
    let mut h = Sha256::new();
    for name in names {
        let path = dir.join(&name);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// Sequence directories of a corpus, sorted by name.
pub fn list_sequences(corpus: &Path) -> Result<Vec<(String, PathBuf)>, PipelineError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(corpus).map_err(io_err(corpus))? {
        let entry = entry.map_err(io_err(corpus))?;
        if entry.file_type().map_err(io_err(corpus))?.is_dir() {
            out.push((entry.file_name().to_string_lossy().into_owned(), entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Runs `f` on a pool of `threads` workers, or the global pool when `None`.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, PipelineError> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| PipelineError::ThreadPool(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

type TaskResult = Result<SampleRecord, FailureRecord>;

fn run_corpus<P: Serialize + Sync>(
    corpus: &Path,
    out: &Path,
    params: &P,
    threads: Option<usize>,
    window: (usize, usize),
    task: impl Fn(&str, &Sequence, usize, &Path) -> Result<(), String> + Sync,
    sample_dir: impl Fn(&str, usize) -> String + Sync,
) -> Result<RunManifest, PipelineError> {
    let sequences = list_sequences(corpus)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    with_threads(threads, || {
        let loaded: Vec<(String, Result<Sequence, SceneError>)> =
            sequences.par_iter().map(|(name, dir)| (name.clone(), read_sequence(dir))).collect();
        let mut failures = Vec::new();
        let mut tasks = Vec::new();
        for (name, seq) in &loaded {
            match seq {
                Ok(seq) => tasks.extend(eligible_indices(seq.len(), window.0, window.1).map(|cur| (name.as_str(), seq, cur))),
                Err(e) => failures.push(FailureRecord { sequence: name.clone(), cur: None, error: e.to_string() }),
            }
        }
        let results: Vec<TaskResult> = tasks
            .par_iter()
            .map(|&(name, seq, cur)| {
                let rel = sample_dir(name, cur);
                let dir = out.join(&rel);
                let started = Instant::now();
                let fail = |error: String| FailureRecord { sequence: name.to_string(), cur: Some(cur), error };
                if dir.exists() {
                    fs::remove_dir_all(&dir).map_err(|e| fail(e.to_string()))?;
                }
                task(name, seq, cur, &dir).map_err(fail)?;
                let checksum = dir_checksum(&dir).map_err(|e| fail(e.to_string()))?;
                Ok(SampleRecord { path: rel, checksum, wall_ms: started.elapsed().as_millis() as u64 })
            })
            .collect();
        let mut samples = Vec::new();
        for r in results {
            match r {
                Ok(s) => samples.push(s),
                Err(f) => failures.push(f),
            }
        }
        let manifest = RunManifest { params: serde_json::to_value(params).expect("serializable params"), samples, failures };
        write_json(&manifest, &out.join(RUN_MANIFEST))?;
        Ok(manifest)
    })?
}

/// One OCF sample directory per sequence and eligible reference frame.
pub fn run_ocf_prep(corpus: &Path, out: &Path, params: &OcfParams, threads: Option<usize>) -> Result<RunManifest, PipelineError> {
    run_corpus(
        corpus,
        out,
        params,
        threads,
        (params.n_pre, params.n_post),
        |_, seq, cur, dir| {
            let sample = build_sample(seq, cur, params).map_err(|e| e.to_string())?;
            write_sample(&sample, params, dir).map_err(|e| e.to_string())?;
            Ok(())
        },
        |name, cur| format!("{name}/sample_{cur:06}"),
    )
}

/// Mask seed of one sample, derived from the run seed, sequence name and index.
pub fn sample_seed(seed: u64, sequence: &str, cur: usize) -> u64 {
    let digest = Sha256::digest(format!("{seed}:{sequence}:{cur}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// The single-layer grid holding a BEV mask.
pub fn mask_grid_spec(grid: &GridSpec) -> GridSpec {
    let (min, max, v) = (grid.min(), grid.max(), grid.voxel_size());
    GridSpec::new([min[0], min[1], min[2], max[0], max[1], max[2]], [v[0], v[1], max[2] - min[2]]).expect("single layer of a valid grid")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskMetadata {
    pub cur_index: usize,
    pub half_width: usize,
    pub seed: u64,
    pub ratio_nonempty: f64,
    pub ratio_empty: f64,
    pub counts: MaskCounts,
    pub context_files: BTreeMap<usize, String>,
}

/// Masked cells of one frame, grouped by kind.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FrameTargets {
    pub nonempty: Vec<usize>,
    pub empty_but_group_nonempty: Vec<usize>,
    pub empty: Vec<usize>,
}

fn write_mask_sample(seq: &Sequence, name: &str, cur: usize, params: &MaskParams, dir: &Path) -> Result<(), String> {
    let seed = sample_seed(params.seed, name, cur);
    let cfg = MaskConfig { ratio_nonempty: params.ratio_nonempty, ratio_empty: params.ratio_empty, rng_seed: seed };
    let bev = params.grid.bev();
    let set = mask_window(seq, cur, params.half_width, &bev, &cfg).map_err(|e| e.to_string())?;
    fs::create_dir_all(dir).map_err(|e| e.to_string())?;

    let payload: Vec<u8> = set.group_mask.masked.iter().map(|&m| m as u8).collect();
    let mask_path = dir.join("mask.grid");
    fs::write(&mask_path, encode_raw_grid(&mask_grid_spec(&params.grid), &payload)).map_err(|e| e.to_string())?;

    let mut context_files = BTreeMap::new();
    for (&f, cloud) in &set.context_clouds {
        let file = format!("context_{f}.pts");
        write_points(cloud, &dir.join(&file)).map_err(|e| e.to_string())?;
        context_files.insert(f, file);
    }
    let targets: BTreeMap<usize, FrameTargets> = set
        .target_cells
        .iter()
        .map(|(&f, cells)| {
            let mut t = FrameTargets::default();
            for c in cells {
                match c.kind {
                    CellKind::Nonempty => t.nonempty.push(c.cell),
                    CellKind::EmptyButGroupNonempty => t.empty_but_group_nonempty.push(c.cell),
                    CellKind::Empty => t.empty.push(c.cell),
                }
            }
            (f, t)
        })
        .collect();
    let compact = serde_json::to_vec(&targets).map_err(|e| e.to_string())?;
    fs::write(dir.join("targets.json"), compact).map_err(|e| e.to_string())?;
    let meta = MaskMetadata {
        cur_index: cur,
        half_width: params.half_width,
        seed,
        ratio_nonempty: params.ratio_nonempty,
        ratio_empty: params.ratio_empty,
        counts: mask_counts(&set.group_mask),
        context_files,
    };
    write_json(&meta, &dir.join("mask.json")).map_err(|e| e.to_string())
}

/// One group-mask directory per sequence and eligible reference frame.
pub fn run_mask_prep(corpus: &Path, out: &Path, params: &MaskParams, threads: Option<usize>) -> Result<RunManifest, PipelineError> {
    MaskConfig { ratio_nonempty: params.ratio_nonempty, ratio_empty: params.ratio_empty, rng_seed: params.seed }
        .validate()
        .map_err(|e| PipelineError::Params(e.to_string()))?;
    run_corpus(
        corpus,
        out,
        params,
        threads,
        (params.half_width, params.half_width),
        |name, seq, cur, dir| write_mask_sample(seq, name, cur, params, dir),
        |name, cur| format!("{name}/mask_{cur:06}"),
    )
}
