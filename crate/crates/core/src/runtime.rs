//! Executors and the host-side stages around them.
//!
//! `preprocess` and `postprocess` are host code. `run_quant` is the device
//! side: it only reads what a packed archive holds and uses integer
//! arithmetic exclusively.

use std::time::Instant;

use thiserror::Error;

use crate::graph::{op_output_shape, GraphError, ModelGraph, OpKind, Padding};
use crate::model_io::{ImageBuffer, Label};
use crate::optimize::{QuantParams, QuantizedModel, INT8_KERNELS};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("expected a 3-channel image, got {0} channel(s)")]
    WrongChannelCount(u8),
    #[error("input shape {actual:?} does not match model input {expected:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },
    #[error("node {node} ({kind}) cannot run on the int8 executor")]
    NotDeployable { node: String, kind: String },
    #[error("no images to time")]
    EmptyBatch,
    #[error("invalid quantized model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// NHWC float activation.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatTensor<T: Scalar = f32> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> FloatTensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![T::zero(); n] }
    }
}

// ---------------------------------------------------------------------------
// Host pre/post-processing
// ---------------------------------------------------------------------------

/// Bilinear resize with half-pixel centers and edge clamping. Returns
/// interleaved values in the source byte range.
pub fn resize_bilinear(img: &ImageBuffer, out_w: usize, out_h: usize) -> Vec<f64> {
    let c = img.channels as usize;
    let axis = |out: usize, src: usize| -> Vec<(usize, usize, f64)> {
        let ratio = src as f64 / out as f64;
        (0..out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
                let i0 = (pos.floor() as usize).min(src - 1);
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    };
    let xs = axis(out_w, img.width);
    let ys = axis(out_h, img.height);
    let mut out = Vec::with_capacity(out_w * out_h * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let top = img.get(x0, y0, ch) as f64 * (1.0 - fx) + img.get(x1, y0, ch) as f64 * fx;
                let bottom = img.get(x0, y1, ch) as f64 * (1.0 - fx) + img.get(x1, y1, ch) as f64 * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Resizes to `height x width` and maps bytes to `[0, 1]`.
pub fn preprocess_to<T: Scalar>(img: &ImageBuffer, height: usize, width: usize) -> Result<FloatTensor<T>, RuntimeError> {
    if img.channels != 3 {
        return Err(RuntimeError::WrongChannelCount(img.channels));
    }
    let data = if img.width == width && img.height == height {
        img.pixels.iter().map(|&p| T::from_f64_lossy(p as f64 / 255.0)).collect()
    } else {
        resize_bilinear(img, width, height).into_iter().map(|v| T::from_f64_lossy(v / 255.0)).collect()
    };
    Ok(FloatTensor::new(vec![1, height, width, 3], data))
}

/// Preprocessing for the 224x224 reference input.
pub fn preprocess<T: Scalar>(img: &ImageBuffer) -> Result<FloatTensor<T>, RuntimeError> {
    preprocess_to(img, crate::graph::REFERENCE_INPUT, crate::graph::REFERENCE_INPUT)
}

/// Preprocessing matched to a model's declared input.
pub fn preprocess_for<T: Scalar, U: Scalar>(img: &ImageBuffer, model: &ModelGraph<U>) -> Result<FloatTensor<T>, RuntimeError> {
    match model.input.shape.as_slice() {
        [1, h, w, 3] => preprocess_to(img, *h, *w),
        other => Err(RuntimeError::ShapeMismatch { expected: other.to_vec(), actual: vec![1, img.height, img.width, 3] }),
    }
}

/// Softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// First index of the maximum, so ties go to the lower class index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Raw device output: int8 logits in the output tensor's domain.
#[derive(Clone, Debug, PartialEq)]
pub struct RawOutput {
    pub logits_q: Vec<i8>,
    pub qparams: QuantParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub class_index: usize,
    pub label: Label,
}

impl Prediction {
    pub fn from_probs(probs: Vec<f64>) -> Self {
        let class_index = argmax(&probs);
        Self { probs, class_index, label: Label::from_index(class_index) }
    }
}

/// Dequantize, softmax, argmax.
pub fn postprocess(raw: &RawOutput) -> Prediction {
    let logits: Vec<f64> = raw.logits_q.iter().map(|&q| raw.qparams.dequantize(q)).collect();
    Prediction::from_probs(softmax(&logits))
}

// ---------------------------------------------------------------------------
// Float executor
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
struct ConvGeometry {
    in_h: usize,
    in_w: usize,
    in_c: usize,
    out_h: usize,
    out_w: usize,
    out_c: usize,
    k_h: usize,
    k_w: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], weight: &[usize], output: &[usize], stride: usize, padding: Padding) -> Self {
        let (in_h, in_w, in_c) = (input[1], input[2], input[3]);
        let (out_h, out_w, out_c) = (output[1], output[2], output[3]);
        let (k_h, k_w) = (weight[1], weight[2]);
        let pad = |out: usize, k: usize, inp: usize| match padding {
            Padding::Same => ((out - 1) * stride + k).saturating_sub(inp) / 2,
            Padding::Valid => 0,
        };
        Self {
            in_h,
            in_w,
            in_c,
            out_h,
            out_w,
            out_c,
            k_h,
            k_w,
            stride,
            pad_top: pad(out_h, k_h, in_h),
            pad_left: pad(out_w, k_w, in_w),
        }
    }

    /// Input row for output row `oy` and kernel row `ky`, if inside the image.
    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride + ky).checked_sub(self.pad_top).filter(|&y| y < self.in_h)
    }

    #[inline]
    fn in_col(&self, ox: usize, kx: usize) -> Option<usize> {
        (ox * self.stride + kx).checked_sub(self.pad_left).filter(|&x| x < self.in_w)
    }
}

fn conv2d_float<T: Scalar>(x: &[T], w: &[T], b: &[T], g: &ConvGeometry) -> Vec<T> {
    let mut out = vec![T::zero(); g.out_h * g.out_w * g.out_c];
    let k_stride = g.k_h * g.k_w * g.in_c;
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let acc = &mut out[(oy * g.out_w + ox) * g.out_c..][..g.out_c];
            acc.copy_from_slice(b);
            for ky in 0..g.k_h {
                let Some(iy) = g.in_row(oy, ky) else { continue };
                for kx in 0..g.k_w {
                    let Some(ix) = g.in_col(ox, kx) else { continue };
                    let px = &x[(iy * g.in_w + ix) * g.in_c..][..g.in_c];
                    let tap = (ky * g.k_w + kx) * g.in_c;
                    for (o, a) in acc.iter_mut().enumerate() {
                        let wrow = &w[o * k_stride + tap..][..g.in_c];
                        *a = *a + px.iter().zip(wrow).map(|(&p, &q)| p * q).sum::<T>();
                    }
                }
            }
        }
    }
    out
}

fn max_pool<V: Copy + PartialOrd>(x: &[V], input: &[usize], output: &[usize], window: usize, stride: usize) -> Vec<V> {
    let (in_w, c) = (input[2], input[3]);
    let (out_h, out_w) = (output[1], output[2]);
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        for ox in 0..out_w {
            for ch in 0..c {
                let mut best = x[((oy * stride) * in_w + ox * stride) * c + ch];
                for ky in 0..window {
                    for kx in 0..window {
                        let v = x[((oy * stride + ky) * in_w + ox * stride + kx) * c + ch];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

fn dense_float<T: Scalar>(x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let n = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bias)| bias + w[o * n..(o + 1) * n].iter().zip(x).map(|(&a, &v)| a * v).sum::<T>())
        .collect()
}

fn param<'a, T: Scalar>(model: &'a ModelGraph<T>, id: Option<&str>) -> Result<(&'a [T], &'a [usize]), RuntimeError> {
    let id = id.ok_or_else(|| GraphError::MissingTensor("<parameter>".into()))?;
    let data = model.weights.get(id).ok_or_else(|| GraphError::MissingTensor(id.to_string()))?;
    let spec = model.tensors.get(id).ok_or_else(|| GraphError::MissingTensor(id.to_string()))?;
    Ok((data, &spec.shape))
}

/// Float evaluation that reports every activation (graph input first) to `observe`.
pub fn run_float_observed<T: Scalar, F: FnMut(&str, &FloatTensor<T>)>(
    model: &ModelGraph<T>,
    input: &FloatTensor<T>,
    mut observe: F,
) -> Result<FloatTensor<T>, RuntimeError> {
    if input.shape != model.input.shape || input.data.len() != input.shape.iter().product::<usize>() {
        return Err(RuntimeError::ShapeMismatch { expected: model.input.shape.clone(), actual: input.shape.clone() });
    }
    observe(&model.input.id, input);
    let mut cur = input.clone();
    for node in &model.nodes {
        let weight = node.weight_id().map(|id| param(model, Some(id))).transpose()?;
        let out_shape = op_output_shape(&node.id, &node.kind, &cur.shape, weight.map(|(_, s)| s))?;
        let data = match node.kind {
            OpKind::Conv2D { stride, padding } => {
                let (w, ws) = weight.expect("conv has weights");
                let (b, _) = param(model, node.bias_id())?;
                conv2d_float(&cur.data, w, b, &ConvGeometry::new(&cur.shape, ws, &out_shape, stride, padding))
            }
            OpKind::MaxPool2D { window, stride } => max_pool(&cur.data, &cur.shape, &out_shape, window, stride),
            OpKind::Relu => cur.data.iter().map(|&v| v.max(T::zero())).collect(),
            OpKind::Flatten => std::mem::take(&mut cur.data),
            OpKind::Dense => {
                let (w, _) = weight.expect("dense has weights");
                let (b, _) = param(model, node.bias_id())?;
                dense_float(&cur.data, w, b)
            }
            OpKind::Softmax => {
                let logits: Vec<f64> = cur.data.iter().map(|v| v.to_f64_lossy()).collect();
                softmax(&logits).into_iter().map(T::from_f64_lossy).collect()
            }
        };
        cur = FloatTensor::new(out_shape, data);
        observe(&node.output, &cur);
    }
    Ok(cur)
}

pub fn run_float<T: Scalar>(model: &ModelGraph<T>, input: &FloatTensor<T>) -> Result<FloatTensor<T>, RuntimeError> {
    run_float_observed(model, input, |_, _| {})
}

// ---------------------------------------------------------------------------
// Integer executor
// ---------------------------------------------------------------------------

/// Conv as im2col rows times the int8 weight matrix, one output row at a time.
fn conv2d_int8(
    x: &[i8],
    zp_in: i32,
    w: &[i8],
    b: &[i32],
    g: &ConvGeometry,
    requant: impl Fn(i32) -> i8,
) -> Vec<i8> {
    let k = g.k_h * g.k_w * g.in_c;
    let mut patches = vec![0i32; g.out_w * k];
    let mut out = Vec::with_capacity(g.out_h * g.out_w * g.out_c);
    for oy in 0..g.out_h {
        patches.fill(0);
        for ox in 0..g.out_w {
            let row = &mut patches[ox * k..(ox + 1) * k];
            for ky in 0..g.k_h {
                let Some(iy) = g.in_row(oy, ky) else { continue };
                for kx in 0..g.k_w {
                    let Some(ix) = g.in_col(ox, kx) else { continue };
                    let src = &x[(iy * g.in_w + ix) * g.in_c..][..g.in_c];
                    let dst = &mut row[(ky * g.k_w + kx) * g.in_c..][..g.in_c];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s as i32 - zp_in;
                    }
                }
            }
        }
        for row in patches.chunks_exact(k) {
            for (o, &bias) in b.iter().enumerate() {
                let wrow = &w[o * k..(o + 1) * k];
                let acc = row.iter().zip(wrow).fold(bias, |a, (&p, &q)| a + p * q as i32);
                out.push(requant(acc));
            }
        }
    }
    out
}

fn dense_int8(x: &[i8], zp_in: i32, w: &[i8], b: &[i32], requant: impl Fn(i32) -> i8) -> Vec<i8> {
    let n = x.len();
    let centered: Vec<i32> = x.iter().map(|&v| v as i32 - zp_in).collect();
    b.iter()
        .enumerate()
        .map(|(o, &bias)| {
            let acc = w[o * n..(o + 1) * n].iter().zip(&centered).fold(bias, |a, (&q, &p)| a + p * q as i32);
            requant(acc)
        })
        .collect()
}

/// Checks that `qm` is well formed and only uses ops with int8 kernels.
pub fn check_deployable(qm: &QuantizedModel) -> Result<(), RuntimeError> {
    for node in &qm.graph.nodes {
        if !INT8_KERNELS.contains(&node.kind.name()) {
            return Err(RuntimeError::NotDeployable { node: node.id.clone(), kind: node.kind.name().into() });
        }
    }
    qm.check_invariants().map_err(|e| RuntimeError::InvalidModel(e.to_string()))
}

/// Integer-only evaluation from an already quantized input. Assumes
/// [`check_deployable`] has passed.
pub fn run_quant_int(qm: &QuantizedModel, input: &[i8]) -> Result<Vec<i8>, RuntimeError> {
    let g = &qm.graph;
    if input.len() != g.input.num_elements() {
        return Err(RuntimeError::ShapeMismatch { expected: g.input.shape.clone(), actual: vec![input.len()] });
    }
    let mut cur = input.to_vec();
    let mut shape = g.input.shape.clone();
    for node in &g.nodes {
        let out_shape = g.tensors[&node.output].shape.clone();
        let qin = qm.act_qparams[node.activation()];
        let qout = qm.act_qparams[&node.output];
        cur = match node.kind {
            OpKind::Conv2D { stride, padding } => {
                let wid = node.weight_id().unwrap_or_default();
                let geom = ConvGeometry::new(&shape, &g.tensors[wid].shape, &out_shape, stride, padding);
                let r = qm.requant[&node.id];
                conv2d_int8(&cur, qin.zero_point, &qm.weight_q[wid], &qm.bias_q[node.bias_id().unwrap_or_default()], &geom, |a| {
                    r.requantize(a, qout.zero_point)
                })
            }
            OpKind::Dense => {
                let r = qm.requant[&node.id];
                dense_int8(
                    &cur,
                    qin.zero_point,
                    &qm.weight_q[node.weight_id().unwrap_or_default()],
                    &qm.bias_q[node.bias_id().unwrap_or_default()],
                    |a| r.requantize(a, qout.zero_point),
                )
            }
            OpKind::MaxPool2D { window, stride } => max_pool(&cur, &shape, &out_shape, window, stride),
            OpKind::Relu => {
                let zp = qout.zero_point.clamp(-128, 127) as i8;
                cur.iter().map(|&q| q.max(zp)).collect()
            }
            OpKind::Flatten => cur,
            OpKind::Softmax => {
                return Err(RuntimeError::NotDeployable { node: node.id.clone(), kind: "Softmax".into() });
            }
        };
        shape = out_shape;
    }
    Ok(cur)
}

pub fn quantize_input<T: Scalar>(qm: &QuantizedModel, input: &FloatTensor<T>) -> Result<Vec<i8>, RuntimeError> {
    if input.shape != qm.graph.input.shape {
        return Err(RuntimeError::ShapeMismatch { expected: qm.graph.input.shape.clone(), actual: input.shape.clone() });
    }
    let p = qm.input_qparams().ok_or_else(|| RuntimeError::InvalidModel("input has no qparams".into()))?;
    Ok(input.data.iter().map(|v| p.quantize(v.to_f64_lossy())).collect())
}

/// Device-side inference: quantize the input, run the int8 graph, return raw logits.
pub fn run_quant<T: Scalar>(qm: &QuantizedModel, input: &FloatTensor<T>) -> Result<RawOutput, RuntimeError> {
    check_deployable(qm)?;
    let q = quantize_input(qm, input)?;
    let logits_q = run_quant_int(qm, &q)?;
    let qparams = *qm.output_qparams().ok_or_else(|| RuntimeError::InvalidModel("output has no qparams".into()))?;
    Ok(RawOutput { logits_q, qparams })
}

// ---------------------------------------------------------------------------
// Classification pipelines and timing
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimings {
    pub pre_ms: f64,
    pub infer_ms: f64,
    pub post_ms: f64,
}

impl StageTimings {
    pub fn total_ms(&self) -> f64 {
        self.pre_ms + self.infer_ms + self.post_ms
    }
}

#[inline]
fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Image in, prediction out, with per-stage wall-clock timings.
pub trait Classifier {
    fn classify(&self, img: &ImageBuffer) -> Result<(Prediction, StageTimings), RuntimeError>;
}

/// Host preprocessing, int8 device inference, host postprocessing.
pub struct QuantClassifier<'a> {
    qm: &'a QuantizedModel,
}

impl<'a> QuantClassifier<'a> {
    pub fn new(qm: &'a QuantizedModel) -> Result<Self, RuntimeError> {
        check_deployable(qm)?;
        Ok(Self { qm })
    }
}

impl Classifier for QuantClassifier<'_> {
    fn classify(&self, img: &ImageBuffer) -> Result<(Prediction, StageTimings), RuntimeError> {
        let t = Instant::now();
        let x: FloatTensor<f32> = preprocess_for(img, &self.qm.graph)?;
        let pre_ms = ms_since(t);

        let t = Instant::now();
        let q = quantize_input(self.qm, &x)?;
        let logits_q = run_quant_int(self.qm, &q)?;
        let infer_ms = ms_since(t);

        let t = Instant::now();
        let qparams = *self.qm.output_qparams().ok_or_else(|| RuntimeError::InvalidModel("output has no qparams".into()))?;
        let pred = postprocess(&RawOutput { logits_q, qparams });
        let post_ms = ms_since(t);
        Ok((pred, StageTimings { pre_ms, infer_ms, post_ms }))
    }
}

/// Float reference path. A trailing softmax is used as is; otherwise the
/// logits go through the host softmax.
pub struct FloatClassifier<'a, T: Scalar> {
    model: &'a ModelGraph<T>,
}

impl<'a, T: Scalar> FloatClassifier<'a, T> {
    pub fn new(model: &'a ModelGraph<T>) -> Self {
        Self { model }
    }
}

impl<T: Scalar> Classifier for FloatClassifier<'_, T> {
    fn classify(&self, img: &ImageBuffer) -> Result<(Prediction, StageTimings), RuntimeError> {
        let t = Instant::now();
        let x: FloatTensor<T> = preprocess_for(img, self.model)?;
        let pre_ms = ms_since(t);

        let t = Instant::now();
        let y = run_float(self.model, &x)?;
        let infer_ms = ms_since(t);

        let t = Instant::now();
        let values: Vec<f64> = y.data.iter().map(|v| v.to_f64_lossy()).collect();
        let probs = if matches!(self.model.nodes.last().map(|n| n.kind), Some(OpKind::Softmax)) {
            values
        } else {
            softmax(&values)
        };
        let pred = Prediction::from_probs(probs);
        let post_ms = ms_since(t);
        Ok((pred, StageTimings { pre_ms, infer_ms, post_ms }))
    }
}

/// Wraps a plain labeling function; timings are reported as inference time.
pub struct FnClassifier<F>(pub F);

impl<F: Fn(&ImageBuffer) -> Result<Label, RuntimeError>> Classifier for FnClassifier<F> {
    fn classify(&self, img: &ImageBuffer) -> Result<(Prediction, StageTimings), RuntimeError> {
        let t = Instant::now();
        let label = (self.0)(img)?;
        let infer_ms = ms_since(t);
        let mut probs = vec![0.0; 2];
        probs[label.index()] = 1.0;
        Ok((Prediction { probs, class_index: label.index(), label }, StageTimings { infer_ms, ..Default::default() }))
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LatencyStats {
    pub n: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub pre_ms: f64,
    pub infer_ms: f64,
    pub post_ms: f64,
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl LatencyStats {
    pub fn from_timings(samples: &[StageTimings]) -> Result<Self, RuntimeError> {
        if samples.is_empty() {
            return Err(RuntimeError::EmptyBatch);
        }
        let n = samples.len();
        let mut totals: Vec<f64> = samples.iter().map(StageTimings::total_ms).collect();
        totals.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let mean = |f: fn(&StageTimings) -> f64| samples.iter().map(f).sum::<f64>() / n as f64;
        Ok(Self {
            n,
            mean_ms: totals.iter().sum::<f64>() / n as f64,
            p50_ms: percentile(&totals, 0.5),
            p95_ms: percentile(&totals, 0.95),
            min_ms: totals[0],
            max_ms: totals[n - 1],
            pre_ms: mean(|t| t.pre_ms),
            infer_ms: mean(|t| t.infer_ms),
            post_ms: mean(|t| t.post_ms),
        })
    }
}

/// Times every image once after `warmup` untimed passes (cycling through the
/// images). Single-threaded.
pub fn time_classifier<C: Classifier + ?Sized>(c: &C, images: &[ImageBuffer], warmup: usize) -> Result<LatencyStats, RuntimeError> {
    if images.is_empty() {
        return Err(RuntimeError::EmptyBatch);
    }
    for img in images.iter().cycle().take(warmup) {
        c.classify(img)?;
    }
    let timings = images.iter().map(|img| c.classify(img).map(|(_, t)| t)).collect::<Result<Vec<_>, _>>()?;
    LatencyStats::from_timings(&timings)
}

pub fn time_pipeline(qm: &QuantizedModel, images: &[ImageBuffer], warmup: usize) -> Result<LatencyStats, RuntimeError> {
    time_classifier(&QuantClassifier::new(qm)?, images, warmup)
}
