//! Device profiles, deployability checks and the head-stripping pass.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::graph::{Violation, ViolationCode};
use crate::graph::{infer_shapes, validate_graph, ModelGraph, NodeSpec, GRAPH_SCOPE};
use crate::scalar::Scalar;

/// 32 MiB of SDRAM.
pub const KL520_MEMORY_BYTES: u64 = 33_554_432;

#[derive(Debug, Error)]
pub enum CompatError {
    #[error("tensor {0} has no inferred shape")]
    ShapesNotInferred(String),
    #[error("every node is unsupported; nothing left after stripping")]
    EmptyGraphAfterStrip,
    #[error("invalid device profile: {0}")]
    InvalidProfile(String),
    #[error("cannot read profile {path}: {message}")]
    ProfileIo { path: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub name: String,
    /// Op kind names, see [`crate::graph::OpKind::name`].
    pub supported_ops: BTreeSet<String>,
    /// Peak bytes of a single node's input plus output activation.
    pub max_activation_bytes: u64,
    pub memory_budget_bytes: u64,
    /// Largest allowed height or width of any activation.
    pub max_spatial_dim: usize,
}

impl DeviceProfile {
    pub fn supports(&self, op: &str) -> bool {
        self.supported_ops.contains(op)
    }

    pub fn validate(&self) -> Result<(), CompatError> {
        if self.memory_budget_bytes == 0 {
            return Err(CompatError::InvalidProfile("memory_budget_bytes must be > 0".into()));
        }
        if self.supported_ops.is_empty() {
            return Err(CompatError::InvalidProfile("supported_ops is empty".into()));
        }
        if let Some(op) = self.supported_ops.iter().find(|op| !crate::graph::OpKind::NAMES.contains(&op.as_str())) {
            return Err(CompatError::InvalidProfile(format!("unknown op {op:?}")));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, CompatError> {
        let p: DeviceProfile = serde_json::from_str(text).map_err(|e| CompatError::InvalidProfile(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, CompatError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CompatError::ProfileIo { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }
}

impl Default for DeviceProfile {
    fn default() -> Self {
        default_kl520_profile()
    }
}

/// The KL520 model: everything this IR defines except Softmax, 32 MiB budget.
pub fn default_kl520_profile() -> DeviceProfile {
    DeviceProfile {
        name: "kl520".into(),
        supported_ops: ["Conv2D", "MaxPool2D", "Relu", "Flatten", "Dense"].into_iter().map(String::from).collect(),
        max_activation_bytes: 8 * 1024 * 1024,
        memory_budget_bytes: KL520_MEMORY_BYTES,
        max_spatial_dim: 1024,
    }
}

fn shape_of<'a, T: Scalar>(graph: &'a ModelGraph<T>, id: &str) -> Result<&'a [usize], CompatError> {
    match graph.tensors.get(id) {
        Some(t) if t.is_inferred() => Ok(&t.shape),
        _ => Err(CompatError::ShapesNotInferred(id.to_string())),
    }
}

fn elems(shape: &[usize]) -> u64 {
    shape.iter().map(|&d| d as u64).product()
}

/// Largest input-plus-output activation element count over all nodes.
fn peak_activation_elems<T: Scalar>(graph: &ModelGraph<T>) -> Result<u64, CompatError> {
    let mut peak = 0;
    for node in &graph.nodes {
        let pair = elems(shape_of(graph, node.activation())?) + elems(shape_of(graph, &node.output)?);
        peak = peak.max(pair);
    }
    Ok(peak)
}

/// Parameter bytes plus the peak single-node activation footprint.
///
/// Float: 4 bytes per element everywhere. Quantized: 1 byte per parameter
/// element plus 8 bytes of qparams per parameter tensor, 1 byte per
/// activation element.
pub fn estimate_memory<T: Scalar>(graph: &ModelGraph<T>, quantized: bool) -> Result<u64, CompatError> {
    let mut params = 0u64;
    for id in graph.parameter_ids() {
        let n = elems(shape_of(graph, id)?);
        params += if quantized { n + 8 } else { 4 * n };
    }
    let act_bytes = if quantized { 1 } else { 4 };
    Ok(params + act_bytes * peak_activation_elems(graph)?)
}

/// Every reason `graph` cannot be deployed on `profile`, in node order with
/// graph-level findings last. Empty means deployable.
pub fn check_compat<T: Scalar>(graph: &ModelGraph<T>, profile: &DeviceProfile) -> Vec<Violation> {
    let mut out = validate_graph(graph);
    let graph = match infer_shapes(graph) {
        Ok(g) => g,
        Err(e) => {
            out.push(Violation::new(GRAPH_SCOPE, ViolationCode::ShapeMismatch, e.to_string()));
            return out;
        }
    };
    for node in &graph.nodes {
        if !profile.supports(node.kind.name()) {
            out.push(Violation::new(
                &node.id,
                ViolationCode::UnsupportedOp,
                format!("{} is not supported by {}", node.kind, profile.name),
            ));
        }
    }
    for id in graph.activation_ids() {
        if let Some((h, w)) = graph.tensors[id].spatial() {
            if h.max(w) > profile.max_spatial_dim {
                let owner = graph.nodes.iter().find(|n| n.output == id).map_or(GRAPH_SCOPE, |n| n.id.as_str());
                out.push(Violation::new(
                    owner,
                    ViolationCode::DimExceeded,
                    format!("{id} is {h}x{w}, limit {}", profile.max_spatial_dim),
                ));
            }
        }
    }
    for node in &graph.nodes {
        let bytes = elems(&graph.tensors[node.activation()].shape) + elems(&graph.tensors[node.output.as_str()].shape);
        if bytes > profile.max_activation_bytes {
            out.push(Violation::new(
                &node.id,
                ViolationCode::MemoryExceeded,
                format!("activations need {bytes} bytes, limit {}", profile.max_activation_bytes),
            ));
        }
    }
    if let Ok(total) = estimate_memory(&graph, true) {
        if total > profile.memory_budget_bytes {
            out.push(Violation::new(
                GRAPH_SCOPE,
                ViolationCode::MemoryExceeded,
                format!("model needs {total} bytes, budget {}", profile.memory_budget_bytes),
            ));
        }
    }
    out
}

/// Removes the maximal trailing run of unsupported nodes and rebinds the
/// graph output. Interior unsupported nodes stay.
pub fn strip_unsupported_head<T: Scalar>(
    graph: &ModelGraph<T>,
    profile: &DeviceProfile,
) -> Result<(ModelGraph<T>, Vec<NodeSpec>), CompatError> {
    let keep = graph.nodes.iter().rposition(|n| profile.supports(n.kind.name())).map_or(0, |i| i + 1);
    if keep == 0 && !graph.nodes.is_empty() {
        return Err(CompatError::EmptyGraphAfterStrip);
    }
    let mut g = graph.clone();
    let removed: Vec<NodeSpec> = g.nodes.drain(keep..).collect();
    for node in &removed {
        g.tensors.remove(&node.output);
        for pid in node.inputs.iter().skip(1) {
            g.tensors.remove(pid);
            g.weights.remove(pid);
        }
    }
    if !removed.is_empty() {
        let last = g.nodes.last().map_or(g.input.id.clone(), |n| n.output.clone());
        g.output = g.tensors[&last].clone();
    }
    Ok((g, removed))
}
