//! Closed-form loss and metric kernels with analytic gradients.
//!
//! Every loss returns a [`LossValue`] holding the scalar and the gradient with
//! respect to its first input, laid out like that input. Reductions run in a
//! fixed order so values do not depend on the thread count.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene_model::{OccupancyGrid, VoxelState};

const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("masks of prediction and target differ")]
    MaskMismatch,
    #[error("row {row} has norm below {NORM_FLOOR}; cosine is undefined")]
    ZeroNorm { row: usize },
    #[error("no rows selected by the mask")]
    EmptyMask,
    #[error("need at least 2 masked rows, got {0}")]
    TooFewRows(usize),
    #[error("number of projections must be at least 1")]
    NoProjections,
    #[error("every voxel is invalid")]
    AllInvalid,
    #[error("momentum {0} outside [0, 1)")]
    BadMomentum(f64),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("tensor file {path}: {msg}")]
    Format { path: String, msg: String },
    #[error("tensor file {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// N rows of D-dimensional embeddings plus a row mask.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    n: usize,
    d: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl EmbeddingBatch {
    pub fn new(n: usize, d: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self, LossError> {
        if values.len() != n * d {
            return Err(LossError::Shape(format!("{} values for {n}x{d}", values.len())));
        }
        if mask.len() != n {
            return Err(LossError::Shape(format!("mask of length {} for {n} rows", mask.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(LossError::NonFinite(i));
        }
        Ok(Self { n, d, values, mask })
    }

    /// Batch with every row selected.
    pub fn full(n: usize, d: usize, values: Vec<f64>) -> Result<Self, LossError> {
        Self::new(n, d, values, vec![true; n])
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn masked_rows(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(|&i| self.mask[i])
    }

    pub fn num_masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Same shape and mask, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self, LossError> {
        Self::new(self.n, self.d, values, self.mask.clone())
    }

    fn check_pair(&self, other: &Self) -> Result<(), LossError> {
        if self.n != other.n || self.d != other.d {
            return Err(LossError::Shape(format!("{}x{} vs {}x{}", self.n, self.d, other.n, other.d)));
        }
        if self.mask != other.mask {
            return Err(LossError::MaskMismatch);
        }
        Ok(())
    }
}

/// Scalar loss and its gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_reg: f64,
    pub gamma: f64,
    pub eps: f64,
    pub sigreg_projections: usize,
    pub sigreg_beta: f64,
    pub sigreg_seed: u64,
    pub ema_momentum: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_reg: 10.0,
            gamma: 1.0,
            eps: 1e-4,
            sigreg_projections: 64,
            sigreg_beta: 1.0,
            sigreg_seed: 0,
            ema_momentum: 0.996,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean of `1 − cos(pred_i, target_i)` over masked rows; the target is constant.
pub fn cosine_prediction_loss(pred: &EmbeddingBatch, target: &EmbeddingBatch) -> Result<LossValue, LossError> {
    pred.check_pair(target)?;
    let m = pred.num_masked();
    if m == 0 {
        return Err(LossError::EmptyMask);
    }
    let mut grad = vec![0.0; pred.values.len()];
    let mut total = 0.0;
    for i in pred.masked_rows() {
        let (p, t) = (pred.row(i), target.row(i));
        let (np, nt) = (dot(p, p).sqrt(), dot(t, t).sqrt());
        if np < NORM_FLOOR || nt < NORM_FLOOR {
            return Err(LossError::ZeroNorm { row: i });
        }
        let cos = dot(p, t) / (np * nt);
        total += 1.0 - cos;
        let g = &mut grad[i * pred.d..(i + 1) * pred.d];
        for k in 0..pred.d {
            g[k] = -(t[k] / (np * nt) - cos * p[k] / (np * np)) / m as f64;
        }
    }
    Ok(LossValue { value: total / m as f64, grad })
}

/// Mean of `‖pred_i − target_i‖²` over masked rows. An empty mask gives 0.
pub fn l2_prediction_loss(pred: &EmbeddingBatch, target: &EmbeddingBatch) -> Result<LossValue, LossError> {
    pred.check_pair(target)?;
    let m = pred.num_masked();
    let mut grad = vec![0.0; pred.values.len()];
    if m == 0 {
        return Ok(LossValue { value: 0.0, grad });
    }
    let mut total = 0.0;
    for i in pred.masked_rows() {
        let (p, t) = (pred.row(i), target.row(i));
        for k in 0..pred.d {
            let diff = p[k] - t[k];
            total += diff * diff;
            grad[i * pred.d + k] = 2.0 * diff / m as f64;
        }
    }
    Ok(LossValue { value: total / m as f64, grad })
}

/// `(1/D) Σ_d max(0, gamma − sqrt(Var_d + eps))` with the unbiased variance
/// over masked rows.
pub fn variance_reg(emb: &EmbeddingBatch, gamma: f64, eps: f64) -> Result<LossValue, LossError> {
    let rows: Vec<usize> = emb.masked_rows().collect();
    let m = rows.len();
    if m < 2 {
        return Err(LossError::TooFewRows(m));
    }
    let d = emb.d;
    let mut grad = vec![0.0; emb.values.len()];
    let mut total = 0.0;
    for k in 0..d {
        let mean = rows.iter().map(|&i| emb.values[i * d + k]).sum::<f64>() / m as f64;
        let var = rows.iter().map(|&i| (emb.values[i * d + k] - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        let std = (var + eps).sqrt();
        if gamma - std > 0.0 {
            total += gamma - std;
            let scale = -1.0 / (d as f64 * (m - 1) as f64 * std);
            for &i in &rows {
                grad[i * d + k] = scale * (emb.values[i * d + k] - mean);
            }
        }
    }
    Ok(LossValue { value: total / d as f64, grad })
}

/// `K` unit directions drawn from a seeded stream.
pub fn projection_directions(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-6 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// Normality statistic of 1-D samples against N(0, 1) and its derivative with
/// respect to each sample.
pub fn bhep_statistic(x: &[f64], beta: f64) -> (f64, Vec<f64>) {
    let n = x.len() as f64;
    let b2 = beta * beta;
    let a = 1.0 / (1.0 + b2).sqrt();
    let c = 1.0 / (1.0 + 2.0 * b2).sqrt();
    let shrink = b2 / (2.0 * (1.0 + b2));
    let mut pair = 0.0;
    let mut single = 0.0;
    let mut deriv = vec![0.0; x.len()];
    for j in 0..x.len() {
        pair += 1.0;
        for k in j + 1..x.len() {
            let diff = x[j] - x[k];
            let e = (-0.5 * b2 * diff * diff).exp();
            pair += 2.0 * e;
            // Each unordered pair appears twice in the double sum.
            let g = -2.0 * b2 * diff * e / (n * n);
            deriv[j] += g;
            deriv[k] -= g;
        }
        let e = (-shrink * x[j] * x[j]).exp();
        single += e;
        deriv[j] += (2.0 * a / n) * 2.0 * shrink * x[j] * e;
    }
    (pair / (n * n) - 2.0 * a * single / n + c, deriv)
}

/// Mean normality statistic over `projections` seeded random projections of
/// the masked rows.
pub fn sigreg(emb: &EmbeddingBatch, projections: usize, beta: f64, seed: u64) -> Result<LossValue, LossError> {
    if projections == 0 {
        return Err(LossError::NoProjections);
    }
    let rows: Vec<usize> = emb.masked_rows().collect();
    if rows.len() < 2 {
        return Err(LossError::TooFewRows(rows.len()));
    }
    let dirs = projection_directions(emb.d, projections, seed);
    let per_dir: Vec<(f64, Vec<f64>)> = dirs
        .par_iter()
        .map(|u| {
            let x: Vec<f64> = rows.iter().map(|&i| dot(emb.row(i), u)).collect();
            bhep_statistic(&x, beta)
        })
        .collect();

    let k = projections as f64;
    let mut grad = vec![0.0; emb.values.len()];
    let mut total = 0.0;
    for (u, (value, deriv)) in dirs.iter().zip(&per_dir) {
        total += value;
        for (&i, &dx) in rows.iter().zip(deriv) {
            for (g, &uk) in grad[i * emb.d..(i + 1) * emb.d].iter_mut().zip(u) {
                *g += dx * uk / k;
            }
        }
    }
    Ok(LossValue { value: total / k, grad })
}

/// A regularizer evaluated on one batch of embeddings.
pub trait Regularizer {
    fn name(&self) -> &'static str;
    fn evaluate(&self, emb: &EmbeddingBatch) -> Result<LossValue, LossError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceRegularizer {
    pub gamma: f64,
    pub eps: f64,
}

impl Regularizer for VarianceRegularizer {
    fn name(&self) -> &'static str {
        "variance"
    }

    fn evaluate(&self, emb: &EmbeddingBatch) -> Result<LossValue, LossError> {
        variance_reg(emb, self.gamma, self.eps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigRegRegularizer {
    pub projections: usize,
    pub beta: f64,
    pub seed: u64,
}

impl Regularizer for SigRegRegularizer {
    fn name(&self) -> &'static str {
        "sigreg"
    }

    fn evaluate(&self, emb: &EmbeddingBatch) -> Result<LossValue, LossError> {
        sigreg(emb, self.projections, self.beta, self.seed)
    }
}

/// `L_jepa + lambda_reg · L_reg`, value and gradient.
pub fn total_loss(jepa: &LossValue, reg: &LossValue, lambda_reg: f64) -> Result<LossValue, LossError> {
    if jepa.grad.len() != reg.grad.len() {
        return Err(LossError::Shape(format!("gradients of length {} and {}", jepa.grad.len(), reg.grad.len())));
    }
    Ok(LossValue {
        value: jepa.value + lambda_reg * reg.value,
        grad: jepa.grad.iter().zip(&reg.grad).map(|(a, b)| a + lambda_reg * b).collect(),
    })
}

pub fn ema_update(target: &[f64], context: &[f64], momentum: f64) -> Result<Vec<f64>, LossError> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(LossError::BadMomentum(momentum));
    }
    if target.len() != context.len() {
        return Err(LossError::Shape(format!("{} target vs {} context parameters", target.len(), context.len())));
    }
    Ok(target.iter().zip(context).map(|(t, c)| momentum * t + (1.0 - momentum) * c).collect())
}

/// Mean binary cross-entropy over non-invalid voxels, occupied as positive.
pub fn masked_bce(logits: &[f64], label: &OccupancyGrid) -> Result<LossValue, LossError> {
    let states = label.states();
    if logits.len() != states.len() {
        return Err(LossError::Shape(format!("{} logits for {} voxels", logits.len(), states.len())));
    }
    let m = states.iter().filter(|&&s| s != VoxelState::Invalid).count();
    if m == 0 {
        return Err(LossError::AllInvalid);
    }
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (i, (&x, &s)) in logits.iter().zip(states).enumerate() {
        if s == VoxelState::Invalid {
            continue;
        }
        let y = if s == VoxelState::Occupied { 1.0 } else { 0.0 };
        total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        grad[i] = (sigmoid(x) - y) / m as f64;
    }
    Ok(LossValue { value: total / m as f64, grad })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Occupied where the predicted probability reaches one half.
pub fn logits_to_binary(logits: &[f64]) -> Vec<bool> {
    logits.iter().map(|&x| x >= 0.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouMetrics {
    pub iou_full: f64,
    pub iou_close: f64,
}

/// Whether a cell index lies in the centered window covering `fraction` of
/// `n` cells.
fn in_close_band(i: usize, n: usize, fraction: f64) -> bool {
    let half = n as f64 / 2.0;
    ((i as f64 + 0.5) - half).abs() <= fraction * half + 1e-9
}

/// IoU between predicted and labelled occupancy over non-invalid voxels, on
/// the full grid and on the centered x–y region.
pub fn iou_metrics(pred: &[bool], label: &OccupancyGrid, close_fraction: f64) -> Result<IouMetrics, LossError> {
    let spec = label.spec();
    if pred.len() != label.states().len() {
        return Err(LossError::Shape(format!("{} predictions for {} voxels", pred.len(), label.states().len())));
    }
    let [nx, ny, nz] = spec.dims();
    let (mut inter, mut union, mut inter_c, mut union_c) = (0usize, 0usize, 0usize, 0usize);
    for ix in 0..nx {
        let cx = in_close_band(ix, nx, close_fraction);
        for iy in 0..ny {
            let close = cx && in_close_band(iy, ny, close_fraction);
            for iz in 0..nz {
                let idx = spec.linear([ix, iy, iz]);
                let s = label.states()[idx];
                if s == VoxelState::Invalid {
                    continue;
                }
                let (p, o) = (pred[idx], s == VoxelState::Occupied);
                let (i, u) = ((p && o) as usize, (p || o) as usize);
                inter += i;
                union += u;
                if close {
                    inter_c += i;
                    union_c += u;
                }
            }
        }
    }
    let ratio = |i: usize, u: usize| if u == 0 { 1.0 } else { i as f64 / u as f64 };
    Ok(IouMetrics { iou_full: ratio(inter, union), iou_close: ratio(inter_c, union_c) })
}

/// Worst disagreement between an analytic gradient and central differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
}

/// Components smaller than this fraction of the largest analytic component
/// are compared against that scaled magnitude instead of their own, since
/// rounding in the differences swamps them.
pub const GRAD_SCALE_FLOOR: f64 = 1e-3;

/// Central differences with step `rel_step · max(1, |x_i|)`, over the
/// coordinates accepted by `include`. The relative error of a coordinate is
/// `|a − n| / max(|a|, |n|, GRAD_SCALE_FLOOR · max|a|, abs_floor)`.
pub fn gradient_check<F, I>(x: &[f64], analytic: &[f64], rel_step: f64, abs_floor: f64, include: I, f: F) -> GradCheck
where
    F: Fn(&[f64]) -> f64 + Sync,
    I: Fn(usize) -> bool + Sync,
{
    let scale = analytic.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let floor = abs_floor.max(GRAD_SCALE_FLOOR * scale);
    let errs: Vec<Option<f64>> = (0..x.len())
        .into_par_iter()
        .map(|i| {
            if !include(i) {
                return None;
            }
            let h = rel_step * x[i].abs().max(1.0);
            let mut probe = x.to_vec();
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            Some((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor))
        })
        .collect();
    let mut report = GradCheck { checked: 0, max_rel_err: 0.0, worst_index: None };
    for (i, e) in errs.into_iter().enumerate() {
        if let Some(e) = e {
            report.checked += 1;
            if report.worst_index.is_none() || e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_index = Some(i);
            }
        }
    }
    report
}

const TENSOR_MAGIC: &[u8; 4] = b"LWTB";

/// Encodes a batch as `LWTB`, u32 N, u32 D, f32 values, N mask bytes.
pub fn encode_tensor(batch: &EmbeddingBatch) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * batch.values.len() + batch.n);
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(batch.n as u32).to_le_bytes());
    out.extend_from_slice(&(batch.d as u32).to_le_bytes());
    for &v in &batch.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.extend(batch.mask.iter().map(|&m| m as u8));
    out
}

pub fn decode_tensor(bytes: &[u8], path: &str) -> Result<EmbeddingBatch, LossError> {
    let err = |msg: String| LossError::Format { path: path.to_string(), msg };
    if bytes.len() < 12 || &bytes[..4] != TENSOR_MAGIC {
        return Err(err("missing LWTB header".into()));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = n.checked_mul(d).and_then(|nd| nd.checked_mul(4)).and_then(|b| b.checked_add(12 + n));
    if expected != Some(bytes.len()) {
        return Err(err(format!("{} bytes, expected {:?} for {n}x{d}", bytes.len(), expected)));
    }
    let values = bytes[12..12 + 4 * n * d]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let mask = bytes[12 + 4 * n * d..]
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(err(format!("mask byte {other}"))),
        })
        .collect::<Result<_, _>>()?;
    EmbeddingBatch::new(n, d, values, mask).map_err(|e| err(e.to_string()))
}

pub fn write_tensor(path: &Path, batch: &EmbeddingBatch) -> Result<(), LossError> {
    std::fs::write(path, encode_tensor(batch))
        .map_err(|source| LossError::Io { path: path.display().to_string(), source })
}

pub fn read_tensor(path: &Path) -> Result<EmbeddingBatch, LossError> {
    let bytes = std::fs::read(path).map_err(|source| LossError::Io { path: path.display().to_string(), source })?;
    decode_tensor(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_model::GridSpec;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_batch(n: usize, d: usize, seed: u64) -> EmbeddingBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mask = (0..n).map(|_| rng.random_bool(0.7)).collect();
        EmbeddingBatch::new(n, d, values, mask).unwrap()
    }

    fn grid_4x4(states: Vec<VoxelState>) -> OccupancyGrid {
        let spec = GridSpec::new([0.0, 0.0, 0.0, 4.0, 4.0, 1.0], [1.0, 1.0, 1.0]).unwrap();
        OccupancyGrid::from_states(spec, states).unwrap()
    }

    #[test]
    fn cosine_identical_and_orthogonal() {
        let a = EmbeddingBatch::full(2, 2, vec![1.0, 2.0, -3.0, 0.5]).unwrap();
        let same = cosine_prediction_loss(&a, &a).unwrap();
        assert!(same.value.abs() < 1e-15);
        assert!(same.grad.iter().all(|g| g.abs() < 1e-15));
        let t = EmbeddingBatch::full(2, 2, vec![-2.0, 1.0, 0.5, 3.0]).unwrap();
        assert!((cosine_prediction_loss(&a, &t).unwrap().value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_errors() {
        let z = EmbeddingBatch::full(1, 2, vec![0.0, 0.0]).unwrap();
        let t = EmbeddingBatch::full(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(matches!(cosine_prediction_loss(&z, &t), Err(LossError::ZeroNorm { row: 0 })));
        let none = EmbeddingBatch::new(1, 2, vec![1.0, 0.0], vec![false]).unwrap();
        assert!(matches!(cosine_prediction_loss(&none, &none), Err(LossError::EmptyMask)));
        let other_mask = EmbeddingBatch::new(1, 2, vec![1.0, 0.0], vec![false]).unwrap();
        assert!(matches!(cosine_prediction_loss(&t, &other_mask), Err(LossError::MaskMismatch)));
    }

    #[test]
    fn l2_hand_values() {
        let p = EmbeddingBatch::full(1, 2, vec![3.0, 4.0]).unwrap();
        let t = EmbeddingBatch::full(1, 2, vec![0.0, 0.0]).unwrap();
        let l = l2_prediction_loss(&p, &t).unwrap();
        assert_eq!(l.value, 25.0);
        assert_eq!(l.grad, vec![6.0, 8.0]);
        assert_eq!(l2_prediction_loss(&p, &p).unwrap().value, 0.0);
    }

    #[test]
    fn variance_collapsed_and_spread() {
        let collapsed = EmbeddingBatch::full(4, 3, [0.3, -1.0, 2.0].repeat(4)).unwrap();
        let v = variance_reg(&collapsed, 1.0, 1e-4).unwrap();
        assert!((v.value - 0.99).abs() < 1e-12);
        // Per-dimension std of {−2, 2} is 2√2 > 1.
        let spread = EmbeddingBatch::full(2, 2, vec![-2.0, 2.0, 2.0, -2.0]).unwrap();
        assert_eq!(variance_reg(&spread, 1.0, 1e-4).unwrap().value, 0.0);
        let one = EmbeddingBatch::new(2, 1, vec![0.0, 1.0], vec![true, false]).unwrap();
        assert!(matches!(variance_reg(&one, 1.0, 1e-4), Err(LossError::TooFewRows(1))));
    }

    #[test]
    fn variance_hinge_threshold_both_directions() {
        // Rows ±s have unbiased variance 2s²; the hinge vanishes exactly when
        // sqrt(2s² + eps) ≥ gamma.
        let eps = 1e-4;
        let s_edge = ((1.0 - eps) / 2.0f64).sqrt();
        for (s, zero) in [(s_edge * 1.001, true), (s_edge * 0.999, false)] {
            let b = EmbeddingBatch::full(2, 1, vec![-s, s]).unwrap();
            assert_eq!(variance_reg(&b, 1.0, eps).unwrap().value == 0.0, zero);
        }
    }

    #[test]
    fn sigreg_zero_batch_closed_form() {
        let zero = EmbeddingBatch::full(16, 8, vec![0.0; 128]).unwrap();
        let expected = 1.0 - 2.0 / 2f64.sqrt() + 1.0 / 3f64.sqrt();
        let s = sigreg(&zero, 8, 1.0, 3).unwrap();
        assert!((s.value - expected).abs() < 1e-12);
        assert!(s.grad.iter().all(|g| g.abs() < 1e-15));
        assert!(matches!(sigreg(&zero, 0, 1.0, 3), Err(LossError::NoProjections)));
    }

    #[test]
    fn sigreg_deterministic() {
        let b = random_batch(40, 6, 5);
        assert_eq!(sigreg(&b, 16, 1.0, 9).unwrap(), sigreg(&b, 16, 1.0, 9).unwrap());
    }

    #[test]
    fn bhep_derivative_matches_differences() {
        let x = [0.3, -1.2, 0.8, 2.0, -0.1];
        let (_, d) = bhep_statistic(&x, 0.7);
        for j in 0..x.len() {
            let h = 1e-6;
            let mut up = x;
            up[j] += h;
            let mut down = x;
            down[j] -= h;
            let num = (bhep_statistic(&up, 0.7).0 - bhep_statistic(&down, 0.7).0) / (2.0 * h);
            assert!((num - d[j]).abs() < 1e-8, "{j}: {num} vs {}", d[j]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let pred = random_batch(12, 5, seed);
            let target = pred.with_values(random_batch(12, 5, seed + 100).values).unwrap();
            let x = pred.values().to_vec();
            let cos = cosine_prediction_loss(&pred, &target).unwrap();
            let eval = |v: &[f64]| cosine_prediction_loss(&pred.with_values(v.to_vec()).unwrap(), &target).unwrap().value;
            assert!(gradient_check(&x, &cos.grad, 1e-5, 1e-8, |_| true, eval).max_rel_err < 1e-4);
            let l2 = l2_prediction_loss(&pred, &target).unwrap();
            let eval = |v: &[f64]| l2_prediction_loss(&pred.with_values(v.to_vec()).unwrap(), &target).unwrap().value;
            assert!(gradient_check(&x, &l2.grad, 1e-5, 1e-8, |_| true, eval).max_rel_err < 1e-4);
        }
    }

    #[test]
    fn total_and_ema_arithmetic() {
        let j = LossValue { value: 0.5, grad: vec![1.0, 2.0] };
        let r = LossValue { value: 0.05, grad: vec![0.1, -0.1] };
        assert_eq!(total_loss(&j, &r, 0.0).unwrap(), j);
        assert!((total_loss(&j, &r, 10.0).unwrap().value - 1.0).abs() < 1e-15);
        assert!(total_loss(&j, &LossValue { value: 0.0, grad: vec![] }, 1.0).is_err());
        assert_eq!(ema_update(&[1.0], &[0.0], 0.99).unwrap(), vec![0.99]);
        assert_eq!(ema_update(&[1.0, 2.0], &[3.0, 4.0], 0.0).unwrap(), vec![3.0, 4.0]);
        assert_eq!(ema_update(&[0.25], &[0.25], 0.7).unwrap(), vec![0.25]);
        assert!(ema_update(&[1.0], &[1.0], 1.0).is_err());
        assert!(ema_update(&[1.0], &[], 0.5).is_err());
    }

    #[test]
    fn bce_closed_forms() {
        use VoxelState::*;
        let mut states = vec![Free; 16];
        states[0] = Occupied;
        states[5] = Invalid;
        let g = grid_4x4(states.clone());
        let logits: Vec<f64> = states.iter().map(|s| if *s == Occupied { 30.0 } else { -30.0 }).collect();
        assert!(masked_bce(&logits, &g).unwrap().value < 1e-9);
        let zero = masked_bce(&[0.0; 16], &g).unwrap();
        assert!((zero.value - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(zero.grad[5], 0.0);
        assert!(matches!(masked_bce(&[0.0; 16], &grid_4x4(vec![Invalid; 16])), Err(LossError::AllInvalid)));
    }

    #[test]
    fn iou_hand_enumerated() {
        use VoxelState::*;
        let spec_idx = |x: usize, y: usize| x * 4 + y;
        let mut states = vec![Free; 16];
        states[spec_idx(0, 0)] = Occupied;
        states[spec_idx(2, 2)] = Invalid;
        let g = grid_4x4(states);
        let mut pred = vec![false; 16];
        pred[spec_idx(0, 0)] = true;
        pred[spec_idx(1, 1)] = true;
        let m = iou_metrics(&pred, &g, 0.5).unwrap();
        assert_eq!(m.iou_full, 0.5);
        // Close region is x, y ∈ {1, 2}: only (1,1) predicted there, nothing occupied.
        assert_eq!(m.iou_close, 0.0);
        let exact = iou_metrics(&g.occupied_mask(), &g, 0.5).unwrap();
        assert_eq!((exact.iou_full, exact.iou_close), (1.0, 1.0));
    }

    #[test]
    fn close_band_of_four() {
        let band: Vec<usize> = (0..4).filter(|&i| in_close_band(i, 4, 0.5)).collect();
        assert_eq!(band, vec![1, 2]);
        assert_eq!((0..200).filter(|&i| in_close_band(i, 200, 0.5)).count(), 100);
    }

    #[test]
    fn tensor_round_trip_and_errors() {
        let b = EmbeddingBatch::new(2, 3, vec![1.0, -2.5, 0.0, 3.25, 4.0, 5.5], vec![true, false]).unwrap();
        assert_eq!(decode_tensor(&encode_tensor(&b), "t").unwrap(), b);
        let mut bytes = encode_tensor(&b);
        bytes.pop();
        assert!(matches!(decode_tensor(&bytes, "t"), Err(LossError::Format { .. })));
        assert!(matches!(decode_tensor(b"LWTX", "t"), Err(LossError::Format { .. })));
    }

    proptest! {
        #[test]
        fn cosine_is_scale_invariant(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let p = random_batch(6, 4, seed);
            let t = p.with_values(random_batch(6, 4, seed + 1).values).unwrap();
            prop_assume!(p.num_masked() > 0);
            let scaled = p.with_values(p.values().iter().map(|v| v * scale).collect()).unwrap();
            let a = cosine_prediction_loss(&p, &t).unwrap().value;
            let b = cosine_prediction_loss(&scaled, &t).unwrap().value;
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn iou_symmetric_and_ignores_invalid_predictions(bits in proptest::collection::vec(0u8..3, 16), pred in proptest::collection::vec(any::<bool>(), 16)) {
            let states: Vec<VoxelState> = bits.iter().map(|&b| VoxelState::from_u8(b).unwrap()).collect();
            let g = grid_4x4(states.clone());
            let a = iou_metrics(&pred, &g, 0.5).unwrap();
            // Swap roles of prediction and occupancy on valid voxels.
            let swapped_states: Vec<VoxelState> = states.iter().zip(&pred).map(|(s, &p)| match s {
                VoxelState::Invalid => VoxelState::Invalid,
                _ if p => VoxelState::Occupied,
                _ => VoxelState::Free,
            }).collect();
            let swapped_pred: Vec<bool> = states.iter().map(|s| *s == VoxelState::Occupied).collect();
            let b = iou_metrics(&swapped_pred, &grid_4x4(swapped_states), 0.5).unwrap();
            prop_assert_eq!(a, b);
            let flipped: Vec<bool> = pred.iter().zip(&states).map(|(&p, s)| if *s == VoxelState::Invalid { !p } else { p }).collect();
            prop_assert_eq!(iou_metrics(&flipped, &g, 0.5).unwrap(), a);
        }
    }
}
