//! Oracle-equivalence suites shared by the `verify` subcommand and the tests.
//!
//! Each oracle is written independently of the code it checks: the ray-cast
//! oracle samples the ray densely instead of stepping plane to plane, the
//! masking oracle rebuilds poses from raw matrices, and the loss kernels are
//! compared with central differences.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix3, Rotation3, Unit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::geometry::{kabsch, rot_z, svd_align, InstanceBox, Vec3};
use crate::group_masking::{mask_counts, mask_window, stratum_quota, MaskConfig};
use crate::jepa_losses::{
    cosine_prediction_loss, gradient_check, l2_prediction_loss, masked_bce, sigreg, variance_reg, EmbeddingBatch,
};
use crate::raycast_voxelizer::{raycast, trace_ray};
use crate::scene_model::{GridSpec, OccupancyGrid, Sequence, VoxelState};
use crate::synth::{generate, random_scene, LidarConfig};

/// Distance to a lattice plane, or interval length, below which a ray is
/// treated as grazing and left out of the comparison.
pub const BOUNDARY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    pub summary: String,
    pub details: serde_json::Value,
}

/// Voxel states visited by one ray, or `None` when the ray grazes a lattice
/// edge or starts or ends on a lattice plane.
pub fn oracle_ray(origin: &Vec3, end: &Vec3, spec: &GridSpec) -> Option<BTreeMap<usize, VoxelState>> {
    let (lo, size, dims) = (spec.min(), spec.voxel_size(), spec.dims());
    let near_plane = |p: &Vec3| {
        (0..3).any(|a| {
            let u = (p[a] - lo[a]) / size[a];
            (u - u.round()).abs() * size[a] < BOUNDARY_TOL
        })
    };
    if near_plane(origin) || near_plane(end) {
        return None;
    }
    let cell = |t: f64| -> [i64; 3] {
        let p = origin + (end - origin) * t;
        [0, 1, 2].map(|a| ((p[a] - lo[a]) / size[a]).floor() as i64)
    };
    let adjacent = |a: [i64; 3], b: [i64; 3]| (0..3).map(|k| (a[k] - b[k]).abs()).sum::<i64>() <= 1;
    let length = (end - origin).norm();

    // Ordered cells along the segment; consecutive entries are face-adjacent.
    let mut cells = vec![cell(0.0)];
    #[allow(clippy::too_many_arguments)]
    fn resolve(
        ta: f64,
        tb: f64,
        ca: [i64; 3],
        cb: [i64; 3],
        length: f64,
        cell: &dyn Fn(f64) -> [i64; 3],
        adjacent: &dyn Fn([i64; 3], [i64; 3]) -> bool,
        out: &mut Vec<[i64; 3]>,
    ) -> bool {
        if adjacent(ca, cb) {
            if ca != cb {
                out.push(cb);
            }
            return true;
        }
        if (tb - ta) * length < BOUNDARY_TOL {
            return false;
        }
        let tm = 0.5 * (ta + tb);
        let cm = cell(tm);
        resolve(ta, tm, ca, cm, length, cell, adjacent, out) && resolve(tm, tb, cm, cb, length, cell, adjacent, out)
    }
    let min_voxel = size.iter().cloned().fold(f64::INFINITY, f64::min);
    let samples = ((length / (min_voxel / 10.0)).ceil() as usize).max(1);
    let mut prev = (0.0, cells[0]);
    for k in 1..=samples {
        let t = k as f64 / samples as f64;
        let c = cell(t);
        if !resolve(prev.0, t, prev.1, c, length, &cell, &adjacent, &mut cells) {
            return None;
        }
        prev = (t, c);
    }

    let in_range = |c: &[i64; 3]| (0..3).all(|a| c[a] >= 0 && (c[a] as usize) < dims[a]);
    let linear = |c: &[i64; 3]| ((c[0] as usize) * dims[1] + c[1] as usize) * dims[2] + c[2] as usize;
    let last = *cells.last().unwrap();
    let mut out = BTreeMap::new();
    for c in &cells[..cells.len() - 1] {
        if in_range(c) {
            out.insert(linear(c), VoxelState::Free);
        }
    }
    if in_range(&last) {
        out.insert(linear(&last), VoxelState::Occupied);
    }
    Some(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RaycastStats {
    pub rays: usize,
    pub boundary_rays: usize,
    pub mismatched_rays: usize,
    pub grid_mismatches: usize,
}

/// Compares every ray of one cloud with the oracle, and the merged grid with
/// a sequential merge of the traced rays.
pub fn check_raycast(origin: &Vec3, points: &[Vec3], spec: &GridSpec) -> RaycastStats {
    let mut stats = RaycastStats { rays: points.len(), boundary_rays: 0, mismatched_rays: 0, grid_mismatches: 0 };
    let mut merged = OccupancyGrid::new_invalid(*spec);
    for p in points {
        let mut traced = BTreeMap::new();
        trace_ray(origin, p, spec, |i, s| {
            let e = traced.entry(i).or_insert(s);
            *e = (*e).max(s);
            merged.merge_linear(i, s);
        });
        match oracle_ray(origin, p, spec) {
            None => stats.boundary_rays += 1,
            Some(expected) if expected != traced => stats.mismatched_rays += 1,
            Some(_) => {}
        }
    }
    let cloud = crate::scene_model::PointCloud::from_points_unchecked(points.to_vec());
    let grid = raycast(origin, &cloud, spec).expect("finite origin");
    stats.grid_mismatches = grid.states().iter().zip(merged.states()).filter(|(a, b)| a != b).count();
    stats
}

/// Grid used by the ray-cast suite. The sensor axis `x = y = 0` and the
/// ground plane `z = 0` fall inside voxels rather than on lattice planes.
pub fn raycast_suite_grid() -> GridSpec {
    GridSpec::new([-30.2, -30.2, -1.8, 29.8, 29.8, 4.2], [0.4, 0.4, 0.4]).expect("suite grid")
}

pub fn raycast_suite_lidar() -> LidarConfig {
    LidarConfig { num_azimuth: 100, num_elevation: 40, elevation_min_deg: -25.0, elevation_max_deg: 10.0, max_range: 60.0 }
}

pub fn raycast_suite(scenes: usize, seed: u64) -> SuiteReport {
    let spec = raycast_suite_grid();
    let per_scene: Vec<RaycastStats> = (0..scenes as u64)
        .into_par_iter()
        .map(|k| {
            let cfg = random_scene(seed.wrapping_add(k), 1, raycast_suite_lidar());
            let seq = generate(&cfg).expect("valid random scene");
            let f = seq.frame(0);
            check_raycast(&f.sensor_origin, f.cloud.points(), &spec)
        })
        .collect();
    let sum = per_scene.iter().fold(RaycastStats { rays: 0, boundary_rays: 0, mismatched_rays: 0, grid_mismatches: 0 }, |a, s| {
        RaycastStats {
            rays: a.rays + s.rays,
            boundary_rays: a.boundary_rays + s.boundary_rays,
            mismatched_rays: a.mismatched_rays + s.mismatched_rays,
            grid_mismatches: a.grid_mismatches + s.grid_mismatches,
        }
    });
    let max_rays = per_scene.iter().map(|s| s.rays).max().unwrap_or(0);
    let passed = sum.mismatched_rays == 0 && sum.grid_mismatches == 0 && sum.rays > sum.boundary_rays;
    SuiteReport {
        suite: "raycast".into(),
        passed,
        summary: format!(
            "{scenes} scenes, {} rays ({} boundary), {} mismatched rays, {} grid mismatches",
            sum.rays, sum.boundary_rays, sum.mismatched_rays, sum.grid_mismatches
        ),
        details: serde_json::json!({ "scenes": scenes, "max_rays_per_scene": max_rays, "totals": sum }),
    }
}

/// Random boxes and rigid motions: yaw-only motions through the box API, full
/// 3D rotations through corner sets.
pub fn procrustes_suite(pairs: usize, seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_r, mut worst_c, mut failures) = (0.0f64, 0.0f64, 0usize);
    for k in 0..pairs {
        let b = InstanceBox::new(
            "b",
            Vec3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-3.0..3.0)),
            Vec3::new(rng.random_range(0.3..6.0), rng.random_range(0.3..3.0), rng.random_range(0.3..3.0)),
            rng.random_range(-3.1..3.1),
        )
        .expect("valid box");
        let t = Vec3::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-2.0..2.0));
        let (r, result) = if k % 2 == 0 {
            let yaw = rng.random_range(-3.1..3.1);
            let r = rot_z(yaw);
            let moved = InstanceBox { center: r * b.center + t, yaw: b.yaw + yaw, ..b.clone() };
            (r, svd_align(&b, &moved))
        } else {
            let axis = Unit::new_normalize(Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ));
            let r: Matrix3<f64> = Rotation3::from_axis_angle(&axis, rng.random_range(-3.1..3.1)).into_inner();
            let src = b.corners();
            let dst: Vec<Vec3> = src.iter().map(|p| r * p + t).collect();
            (r, kabsch(&src, &dst))
        };
        match result {
            Ok(fit) => {
                let (er, ec) = ((fit.rotation - r).norm(), (fit.translation - t).norm());
                worst_r = worst_r.max(er);
                worst_c = worst_c.max(ec);
                if er >= 1e-6 || ec >= 1e-6 {
                    failures += 1;
                }
            }
            Err(_) => failures += 1,
        }
    }
    SuiteReport {
        suite: "procrustes".into(),
        passed: failures == 0,
        summary: format!("{pairs} pairs, {failures} failures, max rotation error {worst_r:.3e}, max translation error {worst_c:.3e}"),
        details: serde_json::json!({ "pairs": pairs, "failures": failures, "max_rotation_frobenius": worst_r, "max_translation": worst_c }),
    }
}

/// Frame-`i` points in frame-`cur` coordinates from raw pose matrices.
fn common_frame_points(seq: &Sequence, i: usize, cur: usize) -> Vec<Vec3> {
    let m = seq.frame(cur).pose.matrix().try_inverse().expect("invertible pose") * seq.frame(i).pose.matrix();
    seq.frame(i).cloud.points().iter().map(|p| (m * p.push(1.0)).xyz()).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct MaskingStats {
    pub scenes: usize,
    pub masked_cells: usize,
    pub leaked_points: usize,
    pub partition_errors: usize,
    pub count_errors: usize,
}

/// Group masking over seeded scenes with a moving ego.
pub fn masking_suite(scenes: usize, seed: u64) -> SuiteReport {
    let spec = GridSpec::new([-30.0, -30.0, -2.0, 30.0, 30.0, 4.0], [0.5, 0.5, 0.5]).expect("suite grid");
    let bev = spec.bev();
    let lidar = LidarConfig { num_azimuth: 180, num_elevation: 16, elevation_min_deg: -25.0, elevation_max_deg: 5.0, max_range: 50.0 };
    let (half, cur) = (5usize, 5usize);
    let per_scene: Vec<MaskingStats> = (0..scenes as u64)
        .into_par_iter()
        .map(|k| {
            let mut cfg = random_scene(seed.wrapping_add(k), 2 * half + 1, lidar);
            cfg.ego.speed = cfg.ego.speed.max(0.5);
            let seq = generate(&cfg).expect("valid random scene");
            let mcfg = MaskConfig { ratio_nonempty: 0.5, ratio_empty: 0.5, rng_seed: seed ^ k };
            let set = mask_window(&seq, cur, half, &bev, &mcfg).expect("in-bounds window");
            let mut stats = MaskingStats { scenes: 1, masked_cells: set.group_mask.num_masked(), ..Default::default() };

            let side = |v: f64, a: usize| ((v - bev.min[a]) / bev.cell[a]).floor();
            let cell = |p: &Vec3| {
                let (ix, iy) = (side(p.x, 0), side(p.y, 1));
                (ix >= 0.0 && iy >= 0.0 && (ix as usize) < bev.dims[0] && (iy as usize) < bev.dims[1])
                    .then(|| ix as usize * bev.dims[1] + iy as usize)
            };
            let mut nonempty = BTreeSet::new();
            for i in cur - half..=cur + half {
                let pts = common_frame_points(&seq, i, cur);
                nonempty.extend(pts.iter().filter_map(&cell));
                let context = &set.context_clouds[&i];
                stats.leaked_points += context.points().iter().filter(|p| cell(p).is_some_and(|c| set.group_mask.masked[c])).count();
                let masked_here = pts.iter().filter(|p| cell(p).is_some_and(|c| set.group_mask.masked[c])).count();
                if context.len() + masked_here != pts.len() || context.len() + set.target_clouds[&i].len() != pts.len() {
                    stats.partition_errors += 1;
                }
            }
            let counts = mask_counts(&set.group_mask);
            let total = bev.num_cells();
            if counts.nonempty_cells != nonempty.len()
                || counts.masked_nonempty != stratum_quota(0.5, nonempty.len())
                || counts.masked_empty != stratum_quota(0.5, total - nonempty.len())
            {
                stats.count_errors += 1;
            }
            stats
        })
        .collect();
    let sum = per_scene.iter().fold(MaskingStats::default(), |a, s| MaskingStats {
        scenes: a.scenes + s.scenes,
        masked_cells: a.masked_cells + s.masked_cells,
        leaked_points: a.leaked_points + s.leaked_points,
        partition_errors: a.partition_errors + s.partition_errors,
        count_errors: a.count_errors + s.count_errors,
    });
    SuiteReport {
        suite: "masking".into(),
        passed: sum.leaked_points == 0 && sum.partition_errors == 0 && sum.count_errors == 0,
        summary: format!(
            "{} scenes, {} masked cells, {} leaked points, {} partition errors, {} count errors",
            sum.scenes, sum.masked_cells, sum.leaked_points, sum.partition_errors, sum.count_errors
        ),
        details: serde_json::to_value(sum).expect("serializable"),
    }
}

/// Worst relative gradient error of each kernel over seeded batches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct GradientErrors {
    pub cosine: f64,
    pub l2: f64,
    pub variance: f64,
    pub sigreg: f64,
    pub masked_bce: f64,
}

pub const GRAD_TOL: f64 = 1e-4;
pub const SIGREG_GRAD_TOL: f64 = 1e-3;
/// Central-difference step relative to `max(1, |x|)`.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error.
pub const FD_FLOOR: f64 = 1e-8;
/// Hinge dimensions closer than this to the kink are skipped.
pub const HINGE_EXCLUSION: f64 = 1e-3;
/// Projections used by the SIGReg gradient check.
pub const SIGREG_CHECK_PROJECTIONS: usize = 16;

fn normal_values(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

/// Gradient checks for one seeded batch of `n × d` embeddings.
pub fn gradient_errors(n: usize, d: usize, seed: u64) -> GradientErrors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.75)).collect();
    let pred = EmbeddingBatch::new(n, d, normal_values(&mut rng, n * d, 1.0), mask.clone()).expect("finite");
    let target = EmbeddingBatch::new(n, d, normal_values(&mut rng, n * d, 1.0), mask).expect("finite");
    let x = pred.values().to_vec();
    let with = |v: &[f64]| pred.with_values(v.to_vec()).expect("finite");
    let all = |_: usize| true;

    let cos = cosine_prediction_loss(&pred, &target).expect("nonzero rows");
    let cosine = gradient_check(&x, &cos.grad, FD_STEP, FD_FLOOR, all, |v| {
        cosine_prediction_loss(&with(v), &target).expect("nonzero rows").value
    })
    .max_rel_err;
    let l2v = l2_prediction_loss(&pred, &target).expect("shapes");
    let l2 = gradient_check(&x, &l2v.grad, FD_STEP, FD_FLOOR, all, |v| l2_prediction_loss(&with(v), &target).expect("shapes").value)
        .max_rel_err;

    // Per-dimension scales spread the std around gamma so both hinge branches occur.
    let scales: Vec<f64> = (0..d).map(|_| rng.random_range(0.3..1.7)).collect();
    let spread: Vec<f64> = x.iter().enumerate().map(|(i, v)| v * scales[i % d]).collect();
    let emb = with(&spread);
    let (gamma, eps) = (1.0, 1e-4);
    let rows: Vec<usize> = emb.masked_rows().collect();
    let near_kink: Vec<bool> = (0..d)
        .map(|k| {
            let m = rows.len() as f64;
            let mean = rows.iter().map(|&i| spread[i * d + k]).sum::<f64>() / m;
            let var = rows.iter().map(|&i| (spread[i * d + k] - mean).powi(2)).sum::<f64>() / (m - 1.0);
            (gamma - (var + eps).sqrt()).abs() < HINGE_EXCLUSION
        })
        .collect();
    let var = variance_reg(&emb, gamma, eps).expect("enough rows");
    let variance = gradient_check(&spread, &var.grad, FD_STEP, FD_FLOOR, |i| !near_kink[i % d], |v| {
        variance_reg(&with(v), gamma, eps).expect("enough rows").value
    })
    .max_rel_err;

    let sig = sigreg(&pred, SIGREG_CHECK_PROJECTIONS, 1.0, seed).expect("valid");
    let sigreg_err = gradient_check(&x, &sig.grad, FD_STEP, FD_FLOOR, all, |v| {
        sigreg(&with(v), SIGREG_CHECK_PROJECTIONS, 1.0, seed).expect("valid").value
    })
    .max_rel_err;

    let spec = GridSpec::new([0.0, 0.0, 0.0, 8.0, 8.0, 4.0], [1.0, 1.0, 1.0]).expect("grid");
    let states: Vec<VoxelState> =
        (0..spec.num_voxels()).map(|_| VoxelState::from_u8(rng.random_range(0..3)).expect("state")).collect();
    let label = OccupancyGrid::from_states(spec, states).expect("sized");
    let logits = normal_values(&mut rng, spec.num_voxels(), 3.0);
    let bce = masked_bce(&logits, &label).expect("some valid voxels");
    let masked_bce_err =
        gradient_check(&logits, &bce.grad, FD_STEP, FD_FLOOR, all, |v| masked_bce(v, &label).expect("valid").value).max_rel_err;

    GradientErrors { cosine, l2, variance, sigreg: sigreg_err, masked_bce: masked_bce_err }
}

pub fn losses_suite(batches: usize, seed: u64) -> SuiteReport {
    let per: Vec<GradientErrors> = (0..batches as u64).into_par_iter().map(|k| gradient_errors(64, 32, seed.wrapping_add(k))).collect();
    let worst = per.iter().fold(GradientErrors::default(), |a, e| GradientErrors {
        cosine: a.cosine.max(e.cosine),
        l2: a.l2.max(e.l2),
        variance: a.variance.max(e.variance),
        sigreg: a.sigreg.max(e.sigreg),
        masked_bce: a.masked_bce.max(e.masked_bce),
    });
    let passed = worst.cosine < GRAD_TOL
        && worst.l2 < GRAD_TOL
        && worst.variance < GRAD_TOL
        && worst.masked_bce < GRAD_TOL
        && worst.sigreg < SIGREG_GRAD_TOL;
    SuiteReport {
        suite: "losses".into(),
        passed,
        summary: format!(
            "{batches} batches of 64x32, worst relative errors: cosine {:.2e}, l2 {:.2e}, variance {:.2e}, sigreg {:.2e}, bce {:.2e}",
            worst.cosine, worst.l2, worst.variance, worst.sigreg, worst.masked_bce
        ),
        details: serde_json::to_value(worst).expect("serializable"),
    }
}
