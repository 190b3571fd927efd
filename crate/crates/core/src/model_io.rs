//! Float model exchange format, PPM/PGM images and class-per-directory datasets.
//!
//! A model is two files: a JSON graph descriptor and a blob of little-endian
//! `f32` values holding every parameter tensor in declaration order (for each
//! weighted node, its weight then its bias).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    feature_len, infer_shapes, op_output_shape, validate_graph, DataType, ModelGraph, NodeSpec, OpKind, Padding,
    TensorSpec,
};
use crate::scalar::Scalar;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("parse error at {at}: {message}")]
    Parse { at: String, message: String },
    #[error("weights blob holds {actual} bytes, graph declares {expected}")]
    WeightLengthMismatch { expected: usize, actual: usize },
    #[error("unknown op kind {0:?}")]
    UnknownOpKind(String),
    #[error("unsupported maxval {0} (only 255 is supported)")]
    UnsupportedMaxval(u32),
    #[error("missing class directory {0}")]
    MissingClassDir(PathBuf),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl ModelIoError {
    fn parse(at: impl Into<String>, message: impl Into<String>) -> Self {
        ModelIoError::Parse { at: at.into(), message: message.into() }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        ModelIoError::Io { path: path.to_path_buf(), source }
    }
}

// ---------------------------------------------------------------------------
// Graph descriptor
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    format_version: u32,
    name: String,
    input: InputDoc,
    nodes: Vec<NodeDoc>,
}

fn default_input_id() -> String {
    "input".to_string()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InputDoc {
    #[serde(default = "default_input_id")]
    id: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    params: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    output: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvParams {
    filters: usize,
    kernel: [usize; 2],
    stride: usize,
    padding: Padding,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolParams {
    window: usize,
    stride: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DenseParams {
    units: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NoParams {}

fn json_error(context: &str, e: serde_json::Error) -> ModelIoError {
    ModelIoError::parse(format!("{context} line {}, column {}", e.line(), e.column()), e.to_string())
}

fn params_of<P: for<'de> Deserialize<'de>>(node: &NodeDoc) -> Result<P, ModelIoError> {
    let value = node.params.clone().unwrap_or_else(|| serde_json::Value::Object(Default::default()));
    serde_json::from_value(value)
        .map_err(|e| ModelIoError::parse(format!("node {}", node.id), format!("bad params: {e}")))
}

/// Renders the graph descriptor for `graph`. Fails if the graph is invalid.
pub fn graph_descriptor<T: Scalar>(graph: &ModelGraph<T>) -> Result<String, ModelIoError> {
    let violations = validate_graph(graph);
    if let Some(v) = violations.first() {
        return Err(ModelIoError::InvalidGraph(v.to_string()));
    }
    let nodes = graph
        .nodes
        .iter()
        .map(|n| {
            let params = match n.kind {
                OpKind::Conv2D { stride, padding } => {
                    let ws = &graph.tensors[n.weight_id().unwrap_or_default()].shape;
                    Some(serde_json::to_value(ConvParams { filters: ws[0], kernel: [ws[1], ws[2]], stride, padding }))
                }
                OpKind::MaxPool2D { window, stride } => Some(serde_json::to_value(PoolParams { window, stride })),
                OpKind::Dense => {
                    let ws = &graph.tensors[n.weight_id().unwrap_or_default()].shape;
                    Some(serde_json::to_value(DenseParams { units: ws[0] }))
                }
                _ => None,
            }
            .transpose()
            .map_err(|e| ModelIoError::InvalidGraph(e.to_string()))?;
            Ok(NodeDoc {
                id: n.id.clone(),
                kind: n.kind.name().to_string(),
                params,
                weight_id: n.weight_id().map(str::to_string),
                bias_id: n.bias_id().map(str::to_string),
                output: Some(n.output.clone()),
            })
        })
        .collect::<Result<Vec<_>, ModelIoError>>()?;
    let doc = GraphDoc {
        format_version: FORMAT_VERSION,
        name: graph.name.clone(),
        input: InputDoc { id: graph.input.id.clone(), shape: graph.input.shape.clone() },
        nodes,
    };
    let mut text = serde_json::to_string_pretty(&doc).map_err(|e| ModelIoError::InvalidGraph(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

/// Concatenated little-endian `f32` parameter data in declaration order.
pub fn weights_blob<T: Scalar>(graph: &ModelGraph<T>) -> Vec<u8> {
    let mut out = Vec::new();
    for id in graph.parameter_ids() {
        if let Some(data) = graph.weights.get(id) {
            for v in data {
                out.extend_from_slice(&v.to_blob().to_le_bytes());
            }
        }
    }
    out
}

/// Builds a model from descriptor text and a weights blob.
pub fn parse_model<T: Scalar>(descriptor: &str, blob: &[u8]) -> Result<ModelGraph<T>, ModelIoError> {
    let doc: GraphDoc = serde_json::from_str(descriptor).map_err(|e| json_error("graph", e))?;
    if doc.format_version != FORMAT_VERSION {
        return Err(ModelIoError::parse("format_version", format!("unsupported version {}", doc.format_version)));
    }
    let input = TensorSpec::new(doc.input.id.clone(), doc.input.shape.clone(), DataType::F32);
    let mut tensors = BTreeMap::new();
    tensors.insert(input.id.clone(), input.clone());
    let mut nodes = Vec::with_capacity(doc.nodes.len());
    let mut param_shapes: Vec<(String, Vec<usize>)> = Vec::new();
    let mut shape = doc.input.shape.clone();
    let mut current = input.id.clone();

    for nd in &doc.nodes {
        let kind = match nd.kind.as_str() {
            "Conv2D" => {
                let p: ConvParams = params_of(nd)?;
                OpKind::Conv2D { stride: p.stride, padding: p.padding }
            }
            "MaxPool2D" => {
                let p: PoolParams = params_of(nd)?;
                OpKind::MaxPool2D { window: p.window, stride: p.stride }
            }
            "Dense" => {
                let _: DenseParams = params_of(nd)?;
                OpKind::Dense
            }
            "Relu" | "Flatten" | "Softmax" => {
                let _: NoParams = params_of(nd)?;
                match nd.kind.as_str() {
                    "Relu" => OpKind::Relu,
                    "Flatten" => OpKind::Flatten,
                    _ => OpKind::Softmax,
                }
            }
            other => return Err(ModelIoError::UnknownOpKind(other.to_string())),
        };
        let mut inputs = vec![current.clone()];
        let weight_shape = if kind.has_weights() {
            let (Some(wid), Some(bid)) = (nd.weight_id.clone(), nd.bias_id.clone()) else {
                return Err(ModelIoError::parse(format!("node {}", nd.id), "weighted op needs weight_id and bias_id"));
            };
            let ws = match nd.kind.as_str() {
                "Conv2D" => {
                    let p: ConvParams = params_of(nd)?;
                    vec![p.filters, p.kernel[0], p.kernel[1], *shape.last().unwrap_or(&0)]
                }
                _ => {
                    let p: DenseParams = params_of(nd)?;
                    vec![p.units, feature_len(&shape)]
                }
            };
            param_shapes.push((wid.clone(), ws.clone()));
            param_shapes.push((bid.clone(), vec![ws[0]]));
            inputs.push(wid);
            inputs.push(bid);
            Some(ws)
        } else {
            if nd.weight_id.is_some() || nd.bias_id.is_some() {
                return Err(ModelIoError::parse(format!("node {}", nd.id), format!("{} takes no parameters", nd.kind)));
            }
            None
        };
        shape = op_output_shape(&nd.id, &kind, &shape, weight_shape.as_deref())
            .map_err(|e| ModelIoError::InvalidGraph(e.to_string()))?;
        let output = nd.output.clone().unwrap_or_else(|| format!("{}.out", nd.id));
        if tensors.contains_key(&output) {
            return Err(ModelIoError::InvalidGraph(format!("tensor id {output} declared twice")));
        }
        tensors.insert(output.clone(), TensorSpec::new(output.clone(), shape.clone(), DataType::F32));
        nodes.push(NodeSpec { id: nd.id.clone(), kind, inputs, output: output.clone() });
        current = output;
    }

    let expected: usize = param_shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum::<usize>() * 4;
    if blob.len() != expected {
        return Err(ModelIoError::WeightLengthMismatch { expected, actual: blob.len() });
    }
    let mut weights = BTreeMap::new();
    let mut offset = 0;
    for (id, s) in param_shapes {
        let n: usize = s.iter().product();
        let data: Vec<T> = blob[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| T::from_blob(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        offset += 4 * n;
        if tensors.contains_key(&id) {
            return Err(ModelIoError::InvalidGraph(format!("tensor id {id} declared twice")));
        }
        tensors.insert(id.clone(), TensorSpec::new(id.clone(), s, DataType::F32));
        weights.insert(id, data);
    }

    let output = tensors[&current].clone();
    let graph = ModelGraph { name: doc.name, input, output, nodes, tensors, weights };
    if let Some(v) = validate_graph(&graph).first() {
        return Err(ModelIoError::InvalidGraph(v.to_string()));
    }
    infer_shapes(&graph).map_err(|e| ModelIoError::InvalidGraph(e.to_string()))
}

pub fn load_model<T: Scalar>(graph_path: &Path, weights_path: &Path) -> Result<ModelGraph<T>, ModelIoError> {
    let text = fs::read_to_string(graph_path).map_err(|e| ModelIoError::io(graph_path, e))?;
    let blob = fs::read(weights_path).map_err(|e| ModelIoError::io(weights_path, e))?;
    parse_model(&text, &blob)
}

pub fn save_model<T: Scalar>(graph: &ModelGraph<T>, graph_path: &Path, weights_path: &Path) -> Result<(), ModelIoError> {
    let text = graph_descriptor(graph)?;
    fs::write(graph_path, text).map_err(|e| ModelIoError::io(graph_path, e))?;
    fs::write(weights_path, weights_blob(graph)).map_err(|e| ModelIoError::io(weights_path, e))
}

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

/// Row-major interleaved 8-bit image with one (gray) or three (RGB) channels.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: u8,
    pub pixels: Vec<u8>,
}

impl fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageBuffer")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .field("pixels", &format_args!("[{} bytes]", self.pixels.len()))
            .finish()
    }
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: u8, pixels: Vec<u8>) -> Result<Self, ModelIoError> {
        if width == 0 || height == 0 {
            return Err(ModelIoError::InvalidImage("zero-sized image".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(ModelIoError::InvalidImage(format!("{channels} channels")));
        }
        if pixels.len() != width * height * channels as usize {
            return Err(ModelIoError::InvalidImage(format!(
                "{} bytes for {width}x{height}x{channels}",
                pixels.len()
            )));
        }
        Ok(Self { width, height, channels, pixels })
    }

    pub fn filled(width: usize, height: usize, channels: u8, value: u8) -> Self {
        Self { width, height, channels, pixels: vec![value; width * height * channels as usize] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels as usize + c]
    }

    /// Mean over all samples of all channels.
    pub fn mean_luminance(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len() as f64
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32, ModelIoError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(ModelIoError::parse(format!("byte {start}"), format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse::<u32>().ok())
            .ok_or_else(|| ModelIoError::parse(format!("byte {start}"), format!("{what} out of range")))
    }
}

/// Decodes a binary PPM (P6) or PGM (P5) image with maxval 255.
pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer, ModelIoError> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3u8,
        Some(b"P5") => 1u8,
        _ => return Err(ModelIoError::parse("byte 0", "expected P5 or P6 magic")),
    };
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number("width")? as usize;
    let height = cur.number("height")? as usize;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(ModelIoError::parse(format!("byte {}", cur.pos), "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(ModelIoError::parse(format!("byte {}", cur.pos), format!("invalid maxval {maxval}")));
    }
    if maxval != 255 {
        return Err(ModelIoError::UnsupportedMaxval(maxval));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(ModelIoError::parse(format!("byte {}", cur.pos), "expected whitespace after maxval")),
    }
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels as usize))
        .ok_or_else(|| ModelIoError::parse("header", "image too large"))?;
    let payload = bytes
        .get(cur.pos..)
        .filter(|p| p.len() >= len)
        .ok_or_else(|| ModelIoError::parse(format!("byte {}", cur.pos), format!("truncated payload, need {len} bytes")))?;
    Ok(ImageBuffer { width, height, channels, pixels: payload[..len].to_vec() })
}

pub fn encode_image(img: &ImageBuffer) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn read_image(path: &Path) -> Result<ImageBuffer, ModelIoError> {
    let bytes = fs::read(path).map_err(|e| ModelIoError::io(path, e))?;
    decode_image(&bytes)
}

pub fn write_image(img: &ImageBuffer, path: &Path) -> Result<(), ModelIoError> {
    fs::write(path, encode_image(img)).map_err(|e| ModelIoError::io(path, e))
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// Class label. Negative is class index 0, Positive (crack) is index 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 1 {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Label::Negative => "negative",
            Label::Positive => "positive",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Negative => "Negative",
            Label::Positive => "Positive",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSample {
    pub image: ImageBuffer,
    pub label: Label,
    pub source: String,
}

#[derive(Debug, Default)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
    /// Files that failed to decode, with the reason.
    pub skipped: Vec<(String, String)>,
}

fn error_chain(e: &dyn std::error::Error) -> String {
    let mut text = e.to_string();
    let mut cause = e.source();
    while let Some(c) = cause {
        text.push_str(": ");
        text.push_str(&c.to_string());
        cause = c.source();
    }
    text
}

/// Loads `root/negative/*` then `root/positive/*`, each in file name order.
pub fn load_dataset_dir(root: &Path) -> Result<Dataset, ModelIoError> {
    let mut dataset = Dataset::default();
    for label in [Label::Negative, Label::Positive] {
        let dir = root.join(label.dir_name());
        if !dir.is_dir() {
            return Err(ModelIoError::MissingClassDir(dir));
        }
        let mut files = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| ModelIoError::io(&dir, e))? {
            let entry = entry.map_err(|e| ModelIoError::io(&dir, e))?;
            let path = entry.path();
            if path.is_file() {
                files.push(path);
            }
        }
        files.sort();
        for path in files {
            let source = path.display().to_string();
            match read_image(&path) {
                Ok(image) => dataset.samples.push(LabeledSample { image, label, source }),
                Err(e) => dataset.skipped.push((source, error_chain(&e))),
            }
        }
    }
    Ok(dataset)
}
