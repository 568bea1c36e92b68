//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 on I/O errors.
//! With `--json` every subcommand prints one JSON document on standard output;
//! human-readable text always goes to standard error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::geometry::Vec3;
use crate::jepa_losses::{
    cosine_prediction_loss, gradient_check, l2_prediction_loss, read_tensor, sigreg, total_loss, variance_reg,
    LossConfig, LossError, LossValue,
};
use crate::pipeline::{run_mask_prep, run_ocf_prep, with_threads, MaskParams, PipelineError, RunManifest};
use crate::raycast_voxelizer::{raycast, LabelSource, OcfError, OcfParams};
use crate::scene_model::{
    read_grid, read_manifest, read_points, read_sequence, write_grid, write_json, write_points, write_sequence_with_grid,
    FrameTag, GridSpec, SceneError, VoxelState,
};
use crate::sequence_transform::{transform_window, TransformError};
use crate::synth::{generate, random_scene, LidarConfig, SceneConfig, SynthError};
use crate::verify::{
    losses_suite, masking_suite, procrustes_suite, raycast_suite, SuiteReport, FD_FLOOR, FD_STEP, GRAD_TOL,
    HINGE_EXCLUSION, SIGREG_GRAD_TOL,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Io(_) => EXIT_IO,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Io(m) => m,
        }
    }
}

fn classify(is_io: bool, msg: String) -> CliError {
    if is_io {
        CliError::Io(msg)
    } else {
        CliError::Validation(msg)
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        classify(e.is_io(), e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        classify(e.is_io(), e.to_string())
    }
}

impl From<OcfError> for CliError {
    fn from(e: OcfError) -> Self {
        let io = matches!(&e, OcfError::Scene(s) if s.is_io());
        classify(io, e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        let io = matches!(&e, SynthError::Scene(s) if s.is_io());
        classify(io, e.to_string())
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        classify(matches!(e, LossError::Io { .. }), e.to_string())
    }
}

impl From<TransformError> for CliError {
    fn from(e: TransformError) -> Self {
        CliError::Validation(e.to_string())
    }
}

type CliResult = Result<Value, CliError>;

#[derive(Debug, Parser)]
#[command(name = "lidar-jepa", version, about = "Multi-frame LiDAR data preparation, losses and verification")]
pub struct Cli {
    /// Print a single JSON document on standard output.
    #[arg(long, global = true)]
    pub json: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON config file; flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct GridArgs {
    /// Grid range `xmin,ymin,zmin,xmax,ymax,zmax` in metres.
    #[arg(long)]
    pub range: Option<String>,
    /// Voxel size, one value or `x,y,z`.
    #[arg(long)]
    pub voxel_size: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Suite {
    Raycast,
    Procrustes,
    Masking,
    Losses,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum RegularizerKind {
    Variance,
    Sigreg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LabelSourceArg {
    Transformed,
    Raw,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic sequence directory.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        frames: Option<usize>,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Ghost removal and instance alignment toward a reference frame.
    Transform {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        cur: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        start: Option<usize>,
        #[arg(long)]
        end: Option<usize>,
    },
    /// Build OCF samples for every eligible frame of a corpus.
    BuildOcf {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_pre: Option<usize>,
        #[arg(long)]
        n_post: Option<usize>,
        #[arg(long, value_enum)]
        label_source: Option<LabelSourceArg>,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Build group BEV masks for every eligible frame of a corpus.
    BuildMasks {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        half_width: Option<usize>,
        #[arg(long)]
        ratio_nonempty: Option<f64>,
        #[arg(long)]
        ratio_empty: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Ray cast one cloud into a ternary occupancy grid.
    Raycast {
        /// Sequence directory; use with `--frame`.
        #[arg(long, conflicts_with = "points")]
        seq: Option<PathBuf>,
        #[arg(long, requires = "seq")]
        frame: Option<usize>,
        /// Points file; use with `--origin`.
        #[arg(long, requires = "origin")]
        points: Option<PathBuf>,
        /// Sensor origin `x,y,z`.
        #[arg(long)]
        origin: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// IoU of a predicted grid against a label grid.
    EvalIou {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        label: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        close_fraction: f64,
    },
    /// Loss values and gradient checks on tensor files.
    LossCheck {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long, value_enum)]
        regularizer: Option<RegularizerKind>,
        #[arg(long)]
        lambda_reg: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        projections: Option<usize>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run oracle-equivalence suites.
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
        /// Scenes for the ray-cast and masking suites.
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub range: Option<[f64; 6]>,
    pub voxel_size: Option<[f64; 3]>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcfConfig {
    pub n_pre: Option<usize>,
    pub n_post: Option<usize>,
    pub label_source: Option<LabelSource>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskFileConfig {
    pub half_width: Option<usize>,
    pub ratio_nonempty: Option<f64>,
    pub ratio_empty: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthFileConfig {
    pub seed: Option<u64>,
    pub frames: Option<usize>,
    pub lidar: Option<LidarConfig>,
    /// Full scene description; replaces the seeded random scene.
    pub scene: Option<SceneConfig>,
}

/// Contents of a `--config` file. Every section is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub threads: Option<usize>,
    pub grid: GridConfig,
    pub ocf: OcfConfig,
    pub mask: MaskFileConfig,
    pub loss: Option<LossConfig>,
    pub synth: SynthFileConfig,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))
        }
    }
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| CliError::Validation(format!("{what}: cannot parse `{t}`"))))
        .collect()
}

fn resolve_grid(args: &GridArgs, cfg: &GridConfig, fallback: GridSpec) -> Result<GridSpec, CliError> {
    let range = match &args.range {
        Some(s) => {
            let v = parse_list(s, "--range")?;
            <[f64; 6]>::try_from(v).map_err(|_| CliError::Validation("--range needs 6 values".into()))?
        }
        None => cfg.range.unwrap_or(fallback.range()),
    };
    let voxel = match &args.voxel_size {
        Some(s) => match parse_list(s, "--voxel-size")?.as_slice() {
            [v] => [*v; 3],
            [x, y, z] => [*x, *y, *z],
            _ => return Err(CliError::Validation("--voxel-size needs 1 or 3 values".into())),
        },
        None => cfg.voxel_size.unwrap_or(fallback.voxel_size()),
    };
    GridSpec::new(range, voxel).map_err(CliError::from)
}

/// Parses `argv` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { EXIT_VALIDATION } else { EXIT_OK };
                }
                _ => EXIT_VALIDATION,
            };
            let _ = e.print();
            return code;
        }
    };
    let json_out = cli.json;
    let outcome = load_config(cli.config.as_deref()).and_then(|cfg| {
        let threads = cli.threads.or(cfg.threads);
        if threads == Some(0) {
            return Err(CliError::Validation("--threads must be at least 1".into()));
        }
        with_threads(threads, || execute(&cli.command, &cfg)).map_err(CliError::from)?
    });
    match outcome {
        Ok(value) => {
            if json_out {
                println!("{value}");
            }
            match value.get("passed") {
                Some(Value::Bool(false)) if matches!(cli.command, Command::Verify { .. }) => EXIT_VALIDATION,
                _ => EXIT_OK,
            }
        }
        Err(e) => {
            eprintln!("error: {}", e.message());
            if json_out {
                println!("{}", json!({ "error": e.message(), "exit_code": e.code() }));
            }
            e.code()
        }
    }
}

fn execute(cmd: &Command, cfg: &FileConfig) -> CliResult {
    match cmd {
        Command::SynthGen { out, seed, frames, grid } => synth_gen(out, *seed, *frames, grid, cfg),
        Command::Transform { seq, cur, out, start, end } => transform(seq, *cur, out, *start, *end),
        Command::BuildOcf { corpus, out, n_pre, n_post, label_source, grid } => {
            let defaults = OcfParams::default();
            let params = OcfParams {
                n_pre: n_pre.or(cfg.ocf.n_pre).unwrap_or(defaults.n_pre),
                n_post: n_post.or(cfg.ocf.n_post).unwrap_or(defaults.n_post),
                grid: resolve_grid(grid, &cfg.grid, defaults.grid)?,
                label_source: label_source
                    .map(|l| match l {
                        LabelSourceArg::Transformed => LabelSource::Transformed,
                        LabelSourceArg::Raw => LabelSource::Raw,
                    })
                    .or(cfg.ocf.label_source)
                    .unwrap_or_default(),
            };
            let manifest = run_ocf_prep(corpus, out, &params, None)?;
            Ok(report_manifest("build-ocf", &manifest))
        }
        Command::BuildMasks { corpus, out, half_width, ratio_nonempty, ratio_empty, seed, grid } => {
            let defaults = MaskParams::default();
            let params = MaskParams {
                half_width: half_width.or(cfg.mask.half_width).unwrap_or(defaults.half_width),
                ratio_nonempty: ratio_nonempty.or(cfg.mask.ratio_nonempty).unwrap_or(defaults.ratio_nonempty),
                ratio_empty: ratio_empty.or(cfg.mask.ratio_empty).unwrap_or(defaults.ratio_empty),
                seed: seed.or(cfg.mask.seed).unwrap_or(defaults.seed),
                grid: resolve_grid(grid, &cfg.grid, defaults.grid)?,
            };
            let manifest = run_mask_prep(corpus, out, &params, None)?;
            Ok(report_manifest("build-masks", &manifest))
        }
        Command::Raycast { seq, frame, points, origin, out, grid } => raycast_cmd(seq.as_deref(), *frame, points.as_deref(), origin.as_deref(), out, grid, cfg),
        Command::EvalIou { pred, label, close_fraction } => eval_iou(pred, label, *close_fraction),
        Command::LossCheck { pred, target, regularizer, lambda_reg, gamma, eps, projections, beta, seed } => {
            let base = cfg.loss.unwrap_or_default();
            let lc = LossConfig {
                lambda_reg: lambda_reg.unwrap_or(base.lambda_reg),
                gamma: gamma.unwrap_or(base.gamma),
                eps: eps.unwrap_or(base.eps),
                sigreg_projections: projections.unwrap_or(base.sigreg_projections),
                sigreg_beta: beta.unwrap_or(base.sigreg_beta),
                sigreg_seed: seed.unwrap_or(base.sigreg_seed),
                ema_momentum: base.ema_momentum,
            };
            loss_check(pred, target.as_deref(), regularizer.unwrap_or(RegularizerKind::Variance), &lc)
        }
        Command::Verify { suite, scenes, seed } => verify_cmd(*suite, *scenes, *seed),
    }
}

fn synth_gen(out: &Path, seed: Option<u64>, frames: Option<usize>, grid: &GridArgs, cfg: &FileConfig) -> CliResult {
    let scene = match &cfg.synth.scene {
        Some(scene) => {
            let mut s = scene.clone();
            if let Some(seed) = seed {
                s.rng_seed = seed;
            }
            if let Some(n) = frames {
                s.num_frames = n;
            }
            s
        }
        None => random_scene(
            seed.or(cfg.synth.seed).unwrap_or(0),
            frames.or(cfg.synth.frames).unwrap_or(20),
            cfg.synth.lidar.unwrap_or_default(),
        ),
    };
    let spec = resolve_grid(grid, &cfg.grid, GridSpec::default())?;
    let seq = generate(&scene)?;
    write_sequence_with_grid(&seq, out, &spec)?;
    write_json(&scene, &out.join("scene_config.json"))?;
    let points: usize = seq.frames().iter().map(|f| f.cloud.len()).sum();
    eprintln!("wrote {} frames ({points} points) to {}", seq.len(), out.display());
    Ok(json!({ "out": out, "frames": seq.len(), "points": points, "objects": scene.objects.len() }))
}

fn transform(seq_dir: &Path, cur: usize, out: &Path, start: Option<usize>, end: Option<usize>) -> CliResult {
    let seq = read_sequence(seq_dir)?;
    let start = start.unwrap_or(0);
    let end = end.unwrap_or(seq.len().saturating_sub(1));
    let t = transform_window(&seq, cur, start, end)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let mut frames = serde_json::Map::new();
    for (i, cloud) in &t.per_frame_points {
        write_points(cloud, &out.join(format!("frame_{i}.pts")))?;
        let prov: Vec<Value> = t.provenance[i]
            .iter()
            .map(|p| json!({ "source_frame": p.source_frame, "instance": p.instance.as_ref().map(|id| id.as_str()) }))
            .collect();
        frames.insert(i.to_string(), json!({ "points": cloud.len(), "provenance": prov }));
    }
    write_json(&Value::Object(frames.clone()), &out.join("provenance.json"))?;
    let counts: serde_json::Map<String, Value> = frames.iter().map(|(k, v)| (k.clone(), v["points"].clone())).collect();
    eprintln!("transformed frames {start}..={end} toward {cur} into {}", out.display());
    Ok(json!({ "cur": cur, "start": start, "end": end, "points_per_frame": counts }))
}

fn report_manifest(cmd: &str, m: &RunManifest) -> Value {
    eprintln!("{cmd}: {} samples, {} failures", m.samples.len(), m.failures.len());
    for f in &m.failures {
        eprintln!("  failed {} {:?}: {}", f.sequence, f.cur, f.error);
    }
    json!({ "samples": m.samples.len(), "failures": m.failures, "checksums": m.samples.iter().map(|s| json!({"path": s.path, "checksum": s.checksum})).collect::<Vec<_>>() })
}

fn parse_vec3(s: &str) -> Result<Vec3, CliError> {
    match parse_list(s, "--origin")?.as_slice() {
        [x, y, z] => Ok(Vec3::new(*x, *y, *z)),
        _ => Err(CliError::Validation("--origin needs 3 values".into())),
    }
}

fn raycast_cmd(
    seq: Option<&Path>,
    frame: Option<usize>,
    points: Option<&Path>,
    origin: Option<&str>,
    out: &Path,
    grid: &GridArgs,
    cfg: &FileConfig,
) -> CliResult {
    let (cloud, origin, fallback) = match (seq, points) {
        (Some(dir), None) => {
            let i = frame.ok_or_else(|| CliError::Validation("--seq requires --frame".into()))?;
            let manifest = read_manifest(dir)?;
            let s = read_sequence(dir)?;
            if i >= s.len() {
                return Err(CliError::Validation(format!("frame {i} out of range for {} frames", s.len())));
            }
            (s.frame(i).cloud.clone(), s.frame(i).sensor_origin, manifest.grid)
        }
        (None, Some(p)) => {
            let o = parse_vec3(origin.ok_or_else(|| CliError::Validation("--points requires --origin".into()))?)?;
            (read_points(p, FrameTag::Global)?, o, GridSpec::default())
        }
        _ => return Err(CliError::Validation("give either --seq with --frame or --points with --origin".into())),
    };
    let spec = resolve_grid(grid, &cfg.grid, fallback)?;
    let g = raycast(&origin, &cloud, &spec)?;
    write_grid(&g, out)?;
    let counts = json!({
        "invalid": g.count(VoxelState::Invalid),
        "free": g.count(VoxelState::Free),
        "occupied": g.count(VoxelState::Occupied),
    });
    eprintln!("ray cast {} points into {}: {counts}", cloud.len(), out.display());
    Ok(json!({ "rays": cloud.len(), "dims": spec.dims(), "counts": counts }))
}

fn eval_iou(pred: &Path, label: &Path, close_fraction: f64) -> CliResult {
    if !(close_fraction > 0.0 && close_fraction <= 1.0) {
        return Err(CliError::Validation(format!("close fraction {close_fraction} outside (0, 1]")));
    }
    let p = read_grid(pred)?;
    let l = read_grid(label)?;
    if p.spec() != l.spec() {
        return Err(CliError::Validation("prediction and label grids differ in range or voxel size".into()));
    }
    let m = crate::jepa_losses::iou_metrics(&p.occupied_mask(), &l, close_fraction)?;
    eprintln!("IoU full {:.6}, close {:.6}", m.iou_full, m.iou_close);
    Ok(json!({ "iou_full": m.iou_full, "iou_close": m.iou_close }))
}

fn kernel_report(value: &LossValue, check: crate::jepa_losses::GradCheck, tol: f64) -> Value {
    json!({
        "value": value.value,
        "grad_check": { "checked": check.checked, "max_rel_err": check.max_rel_err, "tolerance": tol, "passed": check.max_rel_err < tol },
    })
}

fn loss_check(pred_path: &Path, target_path: Option<&Path>, reg: RegularizerKind, lc: &LossConfig) -> CliResult {
    let pred = read_tensor(pred_path)?;
    let x = pred.values().to_vec();
    let with = |v: &[f64]| pred.with_values(v.to_vec()).expect("finite probe");
    let mut report = serde_json::Map::new();
    report.insert("rows".into(), json!(pred.rows()));
    report.insert("dim".into(), json!(pred.dim()));
    report.insert("masked".into(), json!(pred.num_masked()));
    let mut all_passed = true;
    let mut note = |r: &Value| all_passed &= r["grad_check"]["passed"] == json!(true);

    let reg_value = match reg {
        RegularizerKind::Variance => {
            let v = variance_reg(&pred, lc.gamma, lc.eps)?;
            let d = pred.dim();
            let rows: Vec<usize> = pred.masked_rows().collect();
            let m = rows.len() as f64;
            let near: Vec<bool> = (0..d)
                .map(|k| {
                    let mean = rows.iter().map(|&i| x[i * d + k]).sum::<f64>() / m;
                    let var = rows.iter().map(|&i| (x[i * d + k] - mean).powi(2)).sum::<f64>() / (m - 1.0);
                    (lc.gamma - (var + lc.eps).sqrt()).abs() < HINGE_EXCLUSION
                })
                .collect();
            let check = gradient_check(&x, &v.grad, FD_STEP, FD_FLOOR, |i| !near[i % d], |p| {
                variance_reg(&with(p), lc.gamma, lc.eps).map(|l| l.value).unwrap_or(f64::NAN)
            });
            let r = kernel_report(&v, check, GRAD_TOL);
            note(&r);
            report.insert("variance".into(), r);
            v
        }
        RegularizerKind::Sigreg => {
            let v = sigreg(&pred, lc.sigreg_projections, lc.sigreg_beta, lc.sigreg_seed)?;
            let check = gradient_check(&x, &v.grad, FD_STEP, FD_FLOOR, |_| true, |p| {
                sigreg(&with(p), lc.sigreg_projections, lc.sigreg_beta, lc.sigreg_seed).map(|l| l.value).unwrap_or(f64::NAN)
            });
            let r = kernel_report(&v, check, SIGREG_GRAD_TOL);
            note(&r);
            report.insert("sigreg".into(), r);
            v
        }
    };

    if let Some(tp) = target_path {
        let target = read_tensor(tp)?;
        let pred_loss = match reg {
            RegularizerKind::Variance => {
                let v = cosine_prediction_loss(&pred, &target)?;
                let check = gradient_check(&x, &v.grad, FD_STEP, FD_FLOOR, |_| true, |p| {
                    cosine_prediction_loss(&with(p), &target).map(|l| l.value).unwrap_or(f64::NAN)
                });
                let r = kernel_report(&v, check, GRAD_TOL);
                note(&r);
                report.insert("cosine".into(), r);
                v
            }
            RegularizerKind::Sigreg => {
                let v = l2_prediction_loss(&pred, &target)?;
                let check = gradient_check(&x, &v.grad, FD_STEP, FD_FLOOR, |_| true, |p| {
                    l2_prediction_loss(&with(p), &target).map(|l| l.value).unwrap_or(f64::NAN)
                });
                let r = kernel_report(&v, check, GRAD_TOL);
                note(&r);
                report.insert("l2".into(), r);
                v
            }
        };
        let total = total_loss(&pred_loss, &reg_value, lc.lambda_reg)?;
        report.insert("total".into(), json!({ "lambda_reg": lc.lambda_reg, "value": total.value }));
    }
    report.insert("passed".into(), json!(all_passed));
    for (k, v) in &report {
        eprintln!("{k}: {v}");
    }
    Ok(Value::Object(report))
}

fn verify_cmd(suite: Suite, scenes: Option<usize>, seed: u64) -> CliResult {
    let run: Vec<SuiteReport> = match suite {
        Suite::Raycast => vec![raycast_suite(scenes.unwrap_or(100), seed)],
        Suite::Procrustes => vec![procrustes_suite(1000, seed)],
        Suite::Masking => vec![masking_suite(scenes.unwrap_or(50), seed)],
        Suite::Losses => vec![losses_suite(20, seed)],
        Suite::All => vec![
            raycast_suite(scenes.unwrap_or(100), seed),
            procrustes_suite(1000, seed),
            masking_suite(scenes.unwrap_or(50), seed),
            losses_suite(20, seed),
        ],
    };
    for r in &run {
        eprintln!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.suite, r.summary);
    }
    let passed = run.iter().all(|r| r.passed);
    Ok(json!({ "passed": passed, "suites": run }))
}
