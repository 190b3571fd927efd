//! Synthetic crack data, the hand-built reference classifier and evaluation.

use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{build_reference_net, ModelGraph, OpKind};
use crate::model_io::{write_image, ImageBuffer, Label, LabeledSample, ModelIoError};
use crate::runtime::{Classifier, LatencyStats, RuntimeError, StageTimings};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("i/o error at {path}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    ModelIo(#[from] ModelIoError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

// ---------------------------------------------------------------------------
// Synthetic dataset
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub crack_width_px: RangeInclusive<u32>,
    pub crack_count: RangeInclusive<u32>,
    /// Peak deviation of the background texture from its base gray.
    pub noise_amplitude: u8,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_per_class: 100,
            width: 227,
            height: 227,
            seed: 42,
            crack_width_px: 1..=4,
            crack_count: 1..=3,
            noise_amplitude: 40,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidConfig(m.to_string()));
        if self.width < 8 || self.height < 8 {
            return bad("images must be at least 8x8");
        }
        if self.crack_width_px.is_empty() || *self.crack_width_px.start() == 0 {
            return bad("crack width range must be non-empty and start at 1 or more");
        }
        if self.crack_count.is_empty() || *self.crack_count.start() == 0 {
            return bad("crack count range must be non-empty and start at 1 or more");
        }
        Ok(())
    }
}

/// Octave cell sizes (px) and their share of the noise amplitude.
const OCTAVES: [(usize, f64); 3] = [(32, 4.0 / 7.0), (8, 2.0 / 7.0), (2, 1.0 / 7.0)];

/// Stream ids: backgrounds are shared by the i-th negative and positive
/// image, so each pair differs only by its cracks.
fn background_stream(index: usize) -> u64 {
    (index as u64) << 1
}

fn crack_stream(index: usize) -> u64 {
    ((index as u64) << 1) | 1
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Value noise in [-1, 1]: random lattice values, smoothly interpolated.
fn value_noise(rng: &mut ChaCha8Rng, w: usize, h: usize, cell: usize) -> Vec<f64> {
    let gw = w / cell + 2;
    let gh = h / cell + 2;
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (gy, fy) = (y / cell, smoothstep((y % cell) as f64 / cell as f64));
        for x in 0..w {
            let (gx, fx) = (x / cell, smoothstep((x % cell) as f64 / cell as f64));
            let at = |i: usize, j: usize| lattice[j * gw + i];
            let top = at(gx, gy) * (1.0 - fx) + at(gx + 1, gy) * fx;
            let bottom = at(gx, gy + 1) * (1.0 - fx) + at(gx + 1, gy + 1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Textured concrete-like background as linear RGB values in [0, 255].
fn background(cfg: &SynthConfig, index: usize) -> Vec<f64> {
    let mut rng = rng_for(cfg.seed, background_stream(index));
    let (w, h) = (cfg.width, cfg.height);
    let base: f64 = rng.gen_range(120.0..=200.0);
    let tint: [f64; 3] = [rng.gen_range(-8.0..=8.0), rng.gen_range(-8.0..=8.0), rng.gen_range(-8.0..=8.0)];
    let amp = cfg.noise_amplitude as f64;
    let mut texture = vec![0.0; w * h];
    for (cell, share) in OCTAVES {
        for (t, n) in texture.iter_mut().zip(value_noise(&mut rng, w, h, cell)) {
            *t += amp * share * n;
        }
    }
    let mut rgb = Vec::with_capacity(w * h * 3);
    for t in texture {
        for tc in tint {
            rgb.push((base + tc + t).clamp(0.0, 255.0));
        }
    }
    rgb
}

fn segment_distance(px: f64, py: f64, (ax, ay): (f64, f64), (bx, by): (f64, f64)) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Jagged polyline entering at one border and heading through the central
/// region of the image.
fn crack_polyline(rng: &mut ChaCha8Rng, w: f64, h: f64) -> Vec<(f64, f64)> {
    let start = match rng.gen_range(0..4) {
        0 => (rng.gen_range(0.0..w), 0.0),
        1 => (rng.gen_range(0.0..w), h - 1.0),
        2 => (0.0, rng.gen_range(0.0..h)),
        _ => (w - 1.0, rng.gen_range(0.0..h)),
    };
    let target = (rng.gen_range(0.25 * w..=0.65 * w), rng.gen_range(0.25 * h..=0.65 * h));
    let mut heading = (target.1 - start.1).atan2(target.0 - start.0);
    let mut points = vec![start];
    let (mut x, mut y) = start;
    let max_len = 1.5 * (w + h);
    let mut travelled = 0.0;
    while travelled < max_len {
        let step = rng.gen_range(6.0..=20.0);
        heading += rng.gen_range(-0.35..=0.35);
        x += step * heading.cos();
        y += step * heading.sin();
        travelled += step;
        points.push((x, y));
        if x < -4.0 || y < -4.0 || x > w + 3.0 || y > h + 3.0 {
            break;
        }
    }
    points
}

/// Darkens every pixel whose center lies within `width / 2` of the polyline.
fn draw_crack(rgb: &mut [f64], w: usize, h: usize, points: &[(f64, f64)], width: f64, darkness: f64) {
    let r = width / 2.0;
    for seg in points.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let x0 = (a.0.min(b.0) - r).floor().max(0.0) as usize;
        let x1 = ((a.0.max(b.0) + r).ceil().max(0.0) as usize).min(w - 1);
        let y0 = (a.1.min(b.1) - r).floor().max(0.0) as usize;
        let y1 = ((a.1.max(b.1) + r).ceil().max(0.0) as usize).min(h - 1);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for y in y0..=y1 {
            for x in x0..=x1 {
                if segment_distance(x as f64, y as f64, a, b) <= r {
                    let i = (y * w + x) * 3;
                    // Mark with a negative sentinel so overlapping segments darken once.
                    for v in &mut rgb[i..i + 3] {
                        if *v >= 0.0 {
                            *v = -(*v * darkness) - 1.0;
                        }
                    }
                }
            }
        }
    }
}

fn to_image(rgb: Vec<f64>, w: usize, h: usize) -> ImageBuffer {
    let pixels = rgb
        .into_iter()
        .map(|v| {
            let v = if v < 0.0 { -v - 1.0 } else { v };
            v.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    ImageBuffer { width: w, height: h, channels: 3, pixels }
}

/// The `index`-th image of class `label`. Pure function of its arguments.
pub fn synth_image(cfg: &SynthConfig, index: usize, label: Label) -> ImageBuffer {
    let (w, h) = (cfg.width, cfg.height);
    let mut rgb = background(cfg, index);
    if label == Label::Positive {
        let mut rng = rng_for(cfg.seed, crack_stream(index));
        let count = rng.gen_range(cfg.crack_count.clone());
        for _ in 0..count {
            let width = rng.gen_range(cfg.crack_width_px.clone()) as f64;
            let darkness = rng.gen_range(0.15..=0.45);
            let points = crack_polyline(&mut rng, w as f64, h as f64);
            draw_crack(&mut rgb, w, h, &points, width, darkness);
        }
    }
    to_image(rgb, w, h)
}

/// All samples in memory: negatives first, then positives.
pub fn synth_samples(cfg: &SynthConfig) -> Result<Vec<LabeledSample>, HarnessError> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(2 * cfg.n_per_class);
    for label in [Label::Negative, Label::Positive] {
        for i in 0..cfg.n_per_class {
            out.push(LabeledSample { image: synth_image(cfg, i, label), label, source: sample_path(label, i) });
        }
    }
    Ok(out)
}

fn sample_path(label: Label, index: usize) -> String {
    let prefix = match label {
        Label::Negative => "neg",
        Label::Positive => "pos",
    };
    format!("{}/{prefix}_{index:05}.ppm", label.dir_name())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `negative/` and `positive/` PPM trees plus `manifest.json`.
pub fn gen_synthetic_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest, HarnessError> {
    cfg.validate()?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| HarnessError::Io { path, source }
    };
    let mut entries = Vec::with_capacity(2 * cfg.n_per_class);
    for label in [Label::Negative, Label::Positive] {
        let dir = out_dir.join(label.dir_name());
        std::fs::create_dir_all(&dir).map_err(io(&dir))?;
        for i in 0..cfg.n_per_class {
            let rel = sample_path(label, i);
            write_image(&synth_image(cfg, i, label), &out_dir.join(&rel))?;
            entries.push(ManifestEntry { path: rel, label });
        }
    }
    let manifest = Manifest { config: cfg.clone(), entries };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(io(&path))?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Hand-built reference classifier
// ---------------------------------------------------------------------------

/// Constants of the hand-built classifier.
///
/// Every conv layer has eight channels: for each of the four line
/// orientations a pair `(relu(s), relu(s - 1))`. The next layer reads the
/// pair's difference, which is `min(s, 1)` for `s >= 0`, so evidence is
/// amplified up to a cap instead of growing without bound.
#[derive(Clone, Debug, PartialEq)]
pub struct HandcraftedParams {
    pub hidden: usize,
    /// Minimum first-layer contrast (input units, 0..1) counted as a line.
    pub line_threshold: f64,
    /// Gain applied to first-layer contrast above the threshold.
    pub line_gain: f64,
    /// Weight of the three taps lying on a channel's own orientation.
    pub along_weight: f64,
    /// Weight of the other six taps of the same orientation.
    pub off_weight: f64,
    /// Weight of every tap of the other orientations.
    pub cross_weight: f64,
    /// Bias subtracted at each aggregation layer (conv2..conv6).
    pub layer_bias: f64,
    /// Summed capped evidence above which an image is called a crack.
    pub decision_threshold: f64,
    /// Logit scale of the final layer.
    pub logit_gain: f64,
}

impl Default for HandcraftedParams {
    fn default() -> Self {
        Self {
            hidden: 4,
            line_threshold: 0.05,
            line_gain: 10.0,
            along_weight: 0.6,
            off_weight: 0.4,
            cross_weight: 0.0,
            layer_bias: 0.5,
            decision_threshold: 0.5,
            logit_gain: 4.0,
        }
    }
}

/// Whether tap (ky, kx) of a 3x3 window lies on orientation `o`:
/// 0 vertical, 1 horizontal, 2 main diagonal, 3 anti-diagonal.
fn on_line(o: usize, ky: usize, kx: usize) -> bool {
    match o {
        0 => kx == 1,
        1 => ky == 1,
        2 => ky == kx,
        _ => ky + kx == 2,
    }
}

pub const ORIENTATIONS: usize = 4;
/// Conv width of the hand-built model: a capped pair per orientation.
pub const HANDCRAFTED_CHANNELS: usize = 2 * ORIENTATIONS;

/// Reference topology with analytically chosen weights.
pub fn build_handcrafted_model<T: Scalar>() -> ModelGraph<T> {
    build_handcrafted_model_with(&HandcraftedParams::default())
}

pub fn build_handcrafted_model_with<T: Scalar>(p: &HandcraftedParams) -> ModelGraph<T> {
    assert!(p.hidden >= 1);
    const C: usize = HANDCRAFTED_CHANNELS;
    let mut g: ModelGraph<T> = build_reference_net(&[C; 6], p.hidden).expect("reference topology is valid");
    let t = |v: f64| T::from_f64_lossy(v);
    // Channel 2o is relu(s), channel 2o + 1 is relu(s - 1).
    let pair_bias = |bias: f64| -> Vec<T> { (0..C).map(|c| t(bias - (c % 2) as f64)).collect() };

    // conv1: dark-line detectors on the gray image (mean of RGB). The on-line
    // taps average to -1/3, the six flanking taps to +1/6, so a flat patch
    // gives zero.
    let mut w1 = vec![T::zero(); C * 9 * 3];
    for oc in 0..C {
        let o = oc / 2;
        for ky in 0..3 {
            for kx in 0..3 {
                let tap = if on_line(o, ky, kx) { -1.0 / 3.0 } else { 1.0 / 6.0 };
                for c in 0..3 {
                    w1[((oc * 3 + ky) * 3 + kx) * 3 + c] = t(p.line_gain * tap / 3.0);
                }
            }
        }
    }
    g.set_weights("conv1.weight", w1).expect("conv1 weight shape");
    g.set_weights("conv1.bias", pair_bias(-p.line_gain * p.line_threshold)).expect("conv1 bias shape");

    // conv2..conv6: each orientation is smoothed along its own direction, so
    // continuous lines survive and isolated specks fall below the bias.
    let mut w = vec![T::zero(); C * 9 * C];
    for oc in 0..C {
        let o = oc / 2;
        for ky in 0..3 {
            for kx in 0..3 {
                for i in 0..ORIENTATIONS {
                    let v = if i != o {
                        p.cross_weight
                    } else if on_line(o, ky, kx) {
                        p.along_weight
                    } else {
                        p.off_weight
                    };
                    let base = ((oc * 3 + ky) * 3 + kx) * C + 2 * i;
                    w[base] = t(v);
                    w[base + 1] = t(-v);
                }
            }
        }
    }
    for n in 2..=6 {
        g.set_weights(&format!("conv{n}.weight"), w.clone()).expect("conv weight shape");
        g.set_weights(&format!("conv{n}.bias"), pair_bias(-p.layer_bias)).expect("conv bias shape");
    }

    // fc1 unit 0 sums the capped evidence of every pooled cell.
    let features = 9 * C;
    let mut fc1 = vec![T::zero(); p.hidden * features];
    for (i, v) in fc1[..features].iter_mut().enumerate() {
        *v = if i % 2 == 0 { T::one() } else { -T::one() };
    }
    g.set_weights("fc1.weight", fc1).expect("fc1 weight shape");
    g.set_weights("fc1.bias", vec![T::zero(); p.hidden]).expect("fc1 bias shape");

    // fc2: negative logit fixed at 0, positive logit = gain * (evidence - threshold).
    let mut fc2 = vec![T::zero(); 2 * p.hidden];
    fc2[p.hidden] = t(p.logit_gain);
    g.set_weights("fc2.weight", fc2).expect("fc2 weight shape");
    g.set_weights("fc2.bias", vec![T::zero(), t(-p.logit_gain * p.decision_threshold)]).expect("fc2 bias shape");
    g.name = "handcrafted_crack_net".into();
    debug_assert!(matches!(g.nodes.last().map(|n| n.kind), Some(OpKind::Softmax)));
    g
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Binary confusion matrix, Positive = crack.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn record(&mut self, actual: Label, predicted: Label) {
        match (actual, predicted) {
            (Label::Positive, Label::Positive) => self.tp += 1,
            (Label::Negative, Label::Positive) => self.fp += 1,
            (Label::Positive, Label::Negative) => self.fn_ += 1,
            (Label::Negative, Label::Negative) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// (tp + tn) / total; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => (self.tp + self.tn) as f64 / n as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub dataset: String,
    #[serde(flatten)]
    pub matrix: ConfusionMatrix,
    pub accuracy: f64,
    pub latency: LatencyStats,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Per-sample predictions alongside the report, in sample order.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub predictions: Vec<Label>,
}

/// Classifies every sample in order and tallies the confusion matrix.
pub fn evaluate<C: Classifier + ?Sized>(
    classifier: &C,
    samples: &[LabeledSample],
    model: &str,
    dataset: &str,
) -> Result<Evaluation, HarnessError> {
    if samples.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    let mut matrix = ConfusionMatrix::default();
    let mut timings: Vec<StageTimings> = Vec::with_capacity(samples.len());
    let mut predictions = Vec::with_capacity(samples.len());
    for s in samples {
        let (pred, t) = classifier.classify(&s.image)?;
        matrix.record(s.label, pred.label);
        predictions.push(pred.label);
        timings.push(t);
    }
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let report = EvalReport {
        model: model.to_string(),
        dataset: dataset.to_string(),
        matrix,
        accuracy: matrix.accuracy(),
        latency: LatencyStats::from_timings(&timings)?,
        timestamp,
    };
    Ok(Evaluation { report, predictions })
}
