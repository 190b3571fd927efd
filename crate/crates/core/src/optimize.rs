//! Optimization passes: calibration, post-training int8 quantization with
//! fixed-point requantization, magnitude pruning and k-means weight clustering.
//!
//! Quantized values are signed 8-bit. Activations are affine
//! (`real = scale * (q - zero_point)`), weights symmetric with a zero point of 0,
//! biases int32 at `input_scale * weight_scale`. All rounding is half away
//! from zero.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{infer_shapes, DataType, GraphError, ModelGraph, OpKind};
use crate::runtime::{run_float_observed, FloatTensor, RuntimeError};
use crate::scalar::{round_half_away, Scalar};

pub const QMIN: i32 = -128;
pub const QMAX: i32 = 127;

/// Ops the integer executor implements.
pub const INT8_KERNELS: [&str; 5] = ["Conv2D", "MaxPool2D", "Relu", "Flatten", "Dense"];

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("calibration needs at least one sample")]
    EmptyCalibrationSet,
    #[error("range [{min}, {max}] is not finite")]
    NonFiniteRange { min: f64, max: f64 },
    #[error("range min {min} exceeds max {max}")]
    InvertedRange { min: f64, max: f64 },
    #[error("requantization multiplier {0} outside (2^-40, 2^8)")]
    MultiplierOutOfRange(f64),
    #[error("no calibration statistics for tensor {0}")]
    MissingStats(String),
    #[error("sparsity {0} outside [0, 1)")]
    InvalidSparsity(f64),
    #[error("k must be >= 2, got {0}")]
    InvalidK(usize),
    #[error("node {node} ({kind}) has no int8 kernel")]
    UnsupportedOp { node: String, kind: String },
    #[error("quantized model invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorStats {
    pub min_val: f64,
    pub max_val: f64,
    pub sample_count: usize,
}

impl TensorStats {
    pub fn merge(&self, other: &TensorStats) -> TensorStats {
        TensorStats {
            min_val: self.min_val.min(other.min_val),
            max_val: self.max_val.max(other.max_val),
            sample_count: self.sample_count + other.sample_count,
        }
    }
}

/// Per-activation running min/max.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub tensors: BTreeMap<String, TensorStats>,
}

impl CalibrationStats {
    pub fn get(&self, id: &str) -> Option<&TensorStats> {
        self.tensors.get(id)
    }

    pub fn merge(&self, other: &CalibrationStats) -> CalibrationStats {
        let mut tensors = self.tensors.clone();
        for (id, s) in &other.tensors {
            tensors.entry(id.clone()).and_modify(|t| *t = t.merge(s)).or_insert(*s);
        }
        CalibrationStats { tensors }
    }
}

/// Runs the float model over every sample and records the range of every
/// activation, graph input and output included.
pub fn collect_calibration_stats<T: Scalar>(
    model: &ModelGraph<T>,
    samples: &[FloatTensor<T>],
) -> Result<CalibrationStats, OptimizeError> {
    if samples.is_empty() {
        return Err(OptimizeError::EmptyCalibrationSet);
    }
    let mut stats = CalibrationStats::default();
    for sample in samples {
        let mut err = None;
        run_float_observed(model, sample, |id, t| {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for v in &t.data {
                let v = v.to_f64_lossy();
                if !v.is_finite() {
                    err.get_or_insert(OptimizeError::NonFiniteRange { min: v, max: v });
                }
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let s = TensorStats { min_val: lo, max_val: hi, sample_count: 1 };
            stats.tensors.entry(id.to_string()).and_modify(|t| *t = t.merge(&s)).or_insert(s);
        })?;
        if let Some(e) = err {
            return Err(e);
        }
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Quantization parameters
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
}

impl QuantParams {
    pub fn symmetric(scale: f64) -> Self {
        Self { scale, zero_point: 0 }
    }

    #[inline]
    pub fn quantize(&self, x: f64) -> i8 {
        quantize_value(x, self)
    }

    #[inline]
    pub fn dequantize(&self, q: i8) -> f64 {
        self.scale * (q as i32 - self.zero_point) as f64
    }

    pub fn is_valid(&self) -> bool {
        self.scale.is_finite() && self.scale > 0.0 && (QMIN..=QMAX).contains(&self.zero_point)
    }
}

/// Affine int8 parameters for a real range. The range is widened to contain
/// zero and the zero point is chosen so that the range minimum maps to -128.
pub fn compute_qparams(min_val: f64, max_val: f64) -> Result<QuantParams, OptimizeError> {
    if !min_val.is_finite() || !max_val.is_finite() {
        return Err(OptimizeError::NonFiniteRange { min: min_val, max: max_val });
    }
    if min_val > max_val {
        return Err(OptimizeError::InvertedRange { min: min_val, max: max_val });
    }
    let lo = min_val.min(0.0);
    let hi = max_val.max(0.0);
    let span = hi - lo;
    if span == 0.0 {
        return Ok(QuantParams { scale: 1.0, zero_point: QMIN });
    }
    let scale = span / 255.0;
    // lo / scale, computed without the rounding error of the stored scale
    let lo_steps = lo * 255.0 / span;
    let zero_point = (QMIN as f64 - round_half_away(lo_steps)).clamp(QMIN as f64, QMAX as f64) as i32;
    Ok(QuantParams { scale, zero_point })
}

#[inline]
pub fn quantize_value(x: f64, p: &QuantParams) -> i8 {
    let q = round_half_away(x / p.scale) + p.zero_point as f64;
    q.clamp(QMIN as f64, QMAX as f64) as i8
}

// ---------------------------------------------------------------------------
// Fixed-point requantization
// ---------------------------------------------------------------------------

/// `real ≈ m0 * 2^-31 * 2^-shift` with `m0` in `[2^30, 2^31)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequantMultiplier {
    pub m0: i32,
    pub shift: i32,
}

pub const M0_MIN: i64 = 1 << 30;
pub const SHIFT_RANGE: std::ops::RangeInclusive<i32> = -8..=40;

impl RequantMultiplier {
    pub fn realized(&self) -> f64 {
        self.m0 as f64 * 2f64.powi(-31 - self.shift)
    }

    pub fn is_valid(&self) -> bool {
        (self.m0 as i64) >= M0_MIN && SHIFT_RANGE.contains(&self.shift)
    }

    /// `round(acc * realized())`, half away from zero, in exact integer arithmetic.
    #[inline]
    pub fn apply(&self, acc: i32) -> i64 {
        let prod = acc as i128 * self.m0 as i128;
        let total = (31 + self.shift) as u32;
        let half = 1i128 << (total - 1);
        let mag = (prod.abs() + half) >> total;
        if prod < 0 {
            -(mag as i64)
        } else {
            mag as i64
        }
    }

    /// Requantizes an accumulator into the int8 domain with `zero_point`.
    #[inline]
    pub fn requantize(&self, acc: i32, zero_point: i32) -> i8 {
        (self.apply(acc) + zero_point as i64).clamp(QMIN as i64, QMAX as i64) as i8
    }
}

pub fn compute_requant(real_multiplier: f64) -> Result<RequantMultiplier, OptimizeError> {
    let lower = 2f64.powi(-40);
    let upper = 2f64.powi(8);
    if !(real_multiplier > lower && real_multiplier < upper) {
        return Err(OptimizeError::MultiplierOutOfRange(real_multiplier));
    }
    // normalize into [0.5, 1); exact since only powers of two are applied
    let mut frac = real_multiplier;
    let mut shift = 0i32;
    while frac >= 1.0 {
        frac *= 0.5;
        shift -= 1;
    }
    while frac < 0.5 {
        frac *= 2.0;
        shift += 1;
    }
    let m0 = round_half_away(frac * 2f64.powi(31)).min((i32::MAX) as f64) as i32;
    Ok(RequantMultiplier { m0, shift })
}

// ---------------------------------------------------------------------------
// Quantized model
// ---------------------------------------------------------------------------

/// Topology plus integer parameters; the content of a packed archive.
///
/// `graph` carries no float weights. Activation tensors are typed I8, weight
/// tensors I8 and bias tensors I32.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedModel {
    pub graph: ModelGraph<f32>,
    pub weight_q: BTreeMap<String, Vec<i8>>,
    pub bias_q: BTreeMap<String, Vec<i32>>,
    pub act_qparams: BTreeMap<String, QuantParams>,
    pub weight_qparams: BTreeMap<String, QuantParams>,
    pub requant: BTreeMap<String, RequantMultiplier>,
}

impl QuantizedModel {
    pub fn input_qparams(&self) -> Option<&QuantParams> {
        self.act_qparams.get(&self.graph.input.id)
    }

    pub fn output_qparams(&self) -> Option<&QuantParams> {
        self.act_qparams.get(&self.graph.output.id)
    }

    /// Structural invariants, including the int32 accumulator bound.
    pub fn check_invariants(&self) -> Result<(), OptimizeError> {
        let bad = |m: String| Err(OptimizeError::Invariant(m));
        let g = &self.graph;
        let inferred = infer_shapes(g)?;
        if &inferred != g {
            return bad("graph shapes are not inferred".into());
        }
        for id in g.activation_ids() {
            let spec = &g.tensors[id];
            if spec.dtype != DataType::I8 {
                return bad(format!("activation {id} is {:?}", spec.dtype));
            }
            match self.act_qparams.get(id) {
                Some(p) if p.is_valid() => {}
                Some(p) => return bad(format!("activation {id} has invalid qparams {p:?}")),
                None => return bad(format!("activation {id} has no qparams")),
            }
        }
        for node in &g.nodes {
            let qin = self.act_qparams[node.activation()];
            let qout = self.act_qparams[&node.output];
            match node.kind {
                OpKind::Relu | OpKind::MaxPool2D { .. } | OpKind::Flatten if qin != qout => {
                    return bad(format!("{} must keep its input qparams", node.id));
                }
                _ => {}
            }
            let (Some(wid), Some(bid)) = (node.weight_id(), node.bias_id()) else {
                continue;
            };
            let wspec = &g.tensors[wid];
            let bspec = &g.tensors[bid];
            if wspec.dtype != DataType::I8 || bspec.dtype != DataType::I32 {
                return bad(format!("{} parameters must be I8/I32", node.id));
            }
            let Some(wq) = self.weight_q.get(wid) else {
                return bad(format!("{} has no int8 weights", node.id));
            };
            let Some(bq) = self.bias_q.get(bid) else {
                return bad(format!("{} has no int32 bias", node.id));
            };
            if wq.len() != wspec.num_elements() || bq.len() != bspec.num_elements() {
                return bad(format!("{} parameter length mismatch", node.id));
            }
            match self.weight_qparams.get(wid) {
                Some(p) if p.is_valid() && p.zero_point == 0 => {}
                _ => return bad(format!("{wid} needs symmetric qparams")),
            }
            match self.requant.get(&node.id) {
                Some(r) if r.is_valid() => {}
                _ => return bad(format!("{} has no valid requant multiplier", node.id)),
            }
            // |q_in - zp| <= 255 and |q_w| <= 128 for every product
            let fan_in = (wspec.num_elements() / wspec.shape[0]) as i64;
            let max_bias = bq.iter().map(|b| (*b as i64).abs()).max().unwrap_or(0);
            if fan_in * 255 * 128 + max_bias > i32::MAX as i64 {
                return bad(format!("{} accumulator may overflow int32", node.id));
            }
        }
        Ok(())
    }
}

fn weight_scale(values: impl Iterator<Item = f64>) -> f64 {
    let max_abs = values.fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs == 0.0 {
        1.0
    } else {
        max_abs / 127.0
    }
}

/// Post-training quantization of a head-stripped float model.
pub fn quantize_model<T: Scalar>(model: &ModelGraph<T>, stats: &CalibrationStats) -> Result<QuantizedModel, OptimizeError> {
    let model = infer_shapes(model)?;
    for node in &model.nodes {
        if !INT8_KERNELS.contains(&node.kind.name()) {
            return Err(OptimizeError::UnsupportedOp { node: node.id.clone(), kind: node.kind.name().into() });
        }
    }
    let from_stats = |id: &str| -> Result<QuantParams, OptimizeError> {
        let s = stats.get(id).ok_or_else(|| OptimizeError::MissingStats(id.to_string()))?;
        compute_qparams(s.min_val, s.max_val)
    };

    let mut act_qparams = BTreeMap::new();
    act_qparams.insert(model.input.id.clone(), from_stats(&model.input.id)?);
    let mut weight_q = BTreeMap::new();
    let mut bias_q = BTreeMap::new();
    let mut weight_qparams = BTreeMap::new();
    let mut requant = BTreeMap::new();

    for node in &model.nodes {
        let qin = act_qparams[node.activation()];
        let qout = match node.kind {
            OpKind::Conv2D { .. } | OpKind::Dense => from_stats(&node.output)?,
            _ => qin,
        };
        if let (Some(wid), Some(bid)) = (node.weight_id(), node.bias_id()) {
            let w = model.weights.get(wid).ok_or_else(|| GraphError::MissingTensor(wid.to_string()))?;
            let b = model.weights.get(bid).ok_or_else(|| GraphError::MissingTensor(bid.to_string()))?;
            let wp = QuantParams::symmetric(weight_scale(w.iter().map(|v| v.to_f64_lossy())));
            weight_q.insert(wid.to_string(), w.iter().map(|v| wp.quantize(v.to_f64_lossy())).collect());
            let bias_scale = qin.scale * wp.scale;
            bias_q.insert(
                bid.to_string(),
                b.iter()
                    .map(|v| round_half_away(v.to_f64_lossy() / bias_scale).clamp(i32::MIN as f64, i32::MAX as f64) as i32)
                    .collect(),
            );
            weight_qparams.insert(wid.to_string(), wp);
            requant.insert(node.id.clone(), compute_requant(bias_scale / qout.scale)?);
        }
        act_qparams.insert(node.output.clone(), qout);
    }

    let mut graph: ModelGraph<f32> = model.cast();
    graph.weights.clear();
    let params: Vec<String> = graph.parameter_ids().into_iter().map(str::to_string).collect();
    for (id, spec) in graph.tensors.iter_mut() {
        spec.dtype = if params.contains(id) {
            if bias_q.contains_key(id) {
                DataType::I32
            } else {
                DataType::I8
            }
        } else {
            DataType::I8
        };
    }
    graph.input = graph.tensors[&graph.input.id].clone();
    graph.output = graph.tensors[&graph.output.id].clone();

    let qm = QuantizedModel { graph, weight_q, bias_q, act_qparams, weight_qparams, requant };
    qm.check_invariants()?;
    Ok(qm)
}

// ---------------------------------------------------------------------------
// Pruning
// ---------------------------------------------------------------------------

/// Zeroes the `floor(sparsity * n)` smallest-magnitude entries of every weight
/// tensor; ties go to the lower flat index. Biases are left alone.
pub fn prune_magnitude<T: Scalar>(model: &ModelGraph<T>, sparsity: f64) -> Result<ModelGraph<T>, OptimizeError> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(OptimizeError::InvalidSparsity(sparsity));
    }
    let mut out = model.clone();
    for id in model.weight_tensor_ids() {
        let Some(w) = out.weights.get_mut(id) else { continue };
        prune_tensor(w, sparsity);
    }
    Ok(out)
}

pub fn prune_tensor<T: Scalar>(w: &mut [T], sparsity: f64) {
    let count = (sparsity * w.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| w[a].abs().partial_cmp(&w[b].abs()).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    for &i in &order[..count] {
        w[i] = T::zero();
    }
}

// ---------------------------------------------------------------------------
// Clustering
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarKMeans {
    pub centroids: Vec<f64>,
    pub assignment: Vec<usize>,
    /// Sum of squared errors after the initial assignment and after every update.
    pub sse_history: Vec<f64>,
}

impl ScalarKMeans {
    pub fn quantized_values(&self) -> Vec<f64> {
        self.assignment.iter().map(|&c| self.centroids[c]).collect()
    }
}

fn nearest(centroids: &[f64], v: f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = (v - c).abs();
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

fn sse(values: &[f64], centroids: &[f64], assignment: &[usize]) -> f64 {
    values.iter().zip(assignment).map(|(v, &a)| (v - centroids[a]).powi(2)).sum()
}

/// Lloyd's algorithm on scalars with centroids initialized evenly on `[min, max]`.
pub fn kmeans_scalar(values: &[f64], k: usize, max_iters: usize) -> ScalarKMeans {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut centroids: Vec<f64> = if values.is_empty() {
        vec![0.0; k]
    } else {
        (0..k).map(|j| lo + (hi - lo) * j as f64 / (k - 1) as f64).collect()
    };
    let mut assignment: Vec<usize> = values.iter().map(|&v| nearest(&centroids, v)).collect();
    let mut sse_history = vec![sse(values, &centroids, &assignment)];
    for _ in 0..max_iters {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (v, &a) in values.iter().zip(&assignment) {
            sums[a] += v;
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j] / counts[j] as f64;
            }
        }
        sse_history.push(sse(values, &centroids, &assignment));
        let next: Vec<usize> = values.iter().map(|&v| nearest(&centroids, v)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    ScalarKMeans { centroids, assignment, sse_history }
}

pub fn distinct_count<T: Scalar>(values: &[T]) -> usize {
    let mut v: Vec<f64> = values.iter().map(|x| x.to_f64_lossy()).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    v.dedup();
    v.len()
}

/// Replaces every weight tensor with more than `k` distinct values by its
/// k-means centroids.
pub fn cluster_weights<T: Scalar>(model: &ModelGraph<T>, k: usize, max_iters: usize) -> Result<ModelGraph<T>, OptimizeError> {
    if k < 2 {
        return Err(OptimizeError::InvalidK(k));
    }
    let mut out = model.clone();
    for id in model.weight_tensor_ids() {
        let Some(w) = out.weights.get_mut(id) else { continue };
        if distinct_count(w) <= k {
            continue;
        }
        let values: Vec<f64> = w.iter().map(|x| x.to_f64_lossy()).collect();
        let km = kmeans_scalar(&values, k, max_iters);
        for (dst, v) in w.iter_mut().zip(km.quantized_values()) {
            *dst = T::from_f64_lossy(v);
        }
    }
    Ok(out)
}
