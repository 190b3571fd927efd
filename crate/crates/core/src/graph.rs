//! Graph IR: a single-input single-output chain of tensor operations.
//!
//! Activations use NHWC with a batch of one (`[1, H, W, C]`), flattened
//! activations are `[1, N]` and dense outputs are rank one `[N]`. Conv weights
//! are `[out_c, k_h, k_w, in_c]`, dense weights `[out, in]`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DataType {
    F32,
    I8,
    I32,
}

impl DataType {
    pub fn size_bytes(self) -> usize {
        match self {
            DataType::F32 | DataType::I32 => 4,
            DataType::I8 => 1,
        }
    }
}

/// A declared tensor. An empty `shape` means the shape has not been inferred yet.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub id: String,
    pub shape: Vec<usize>,
    pub dtype: DataType,
}

impl TensorSpec {
    pub fn new(id: impl Into<String>, shape: Vec<usize>, dtype: DataType) -> Self {
        Self { id: id.into(), shape, dtype }
    }

    /// Activation spec whose shape is filled in by [`infer_shapes`].
    pub fn pending(id: impl Into<String>) -> Self {
        Self::new(id, Vec::new(), DataType::F32)
    }

    pub fn is_inferred(&self) -> bool {
        !self.shape.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }

    /// `(H, W)` for rank-4 NHWC activations.
    pub fn spatial(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [_, h, w, _] => Some((*h, *w)),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Conv2D { stride: usize, padding: Padding },
    MaxPool2D { window: usize, stride: usize },
    Relu,
    Flatten,
    Dense,
    Softmax,
}

impl OpKind {
    pub const NAMES: [&'static str; 6] = ["Conv2D", "MaxPool2D", "Relu", "Flatten", "Dense", "Softmax"];

    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Conv2D { .. } => "Conv2D",
            OpKind::MaxPool2D { .. } => "MaxPool2D",
            OpKind::Relu => "Relu",
            OpKind::Flatten => "Flatten",
            OpKind::Dense => "Dense",
            OpKind::Softmax => "Softmax",
        }
    }

    /// Conv2D and Dense carry a weight and a bias tensor.
    pub fn has_weights(&self) -> bool {
        matches!(self, OpKind::Conv2D { .. } | OpKind::Dense)
    }

    pub fn arity(&self) -> usize {
        if self.has_weights() {
            3
        } else {
            1
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One operation. `inputs[0]` is the activation; weighted ops follow it with
/// the weight id and the bias id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub kind: OpKind,
    pub inputs: Vec<String>,
    pub output: String,
}

impl NodeSpec {
    pub fn activation(&self) -> &str {
        &self.inputs[0]
    }

    pub fn weight_id(&self) -> Option<&str> {
        if self.kind.has_weights() {
            self.inputs.get(1).map(String::as_str)
        } else {
            None
        }
    }

    pub fn bias_id(&self) -> Option<&str> {
        if self.kind.has_weights() {
            self.inputs.get(2).map(String::as_str)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ModelGraph<T: Scalar = f32> {
    pub name: String,
    pub input: TensorSpec,
    pub output: TensorSpec,
    pub nodes: Vec<NodeSpec>,
    /// Every declared tensor (activations and parameters) by id.
    pub tensors: BTreeMap<String, TensorSpec>,
    /// Flat parameter data by tensor id.
    pub weights: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> ModelGraph<T> {
    pub fn tensor(&self, id: &str) -> Option<&TensorSpec> {
        self.tensors.get(id)
    }

    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Activation tensor ids in execution order, graph input first.
    pub fn activation_ids(&self) -> Vec<&str> {
        std::iter::once(self.input.id.as_str())
            .chain(self.nodes.iter().map(|n| n.output.as_str()))
            .collect()
    }

    /// Parameter tensor ids in declaration order (weight then bias per node).
    pub fn parameter_ids(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| n.kind.has_weights())
            .flat_map(|n| n.inputs[1..].iter().map(String::as_str))
            .collect()
    }

    /// Weight (not bias) tensor ids in declaration order.
    pub fn weight_tensor_ids(&self) -> Vec<&str> {
        self.nodes.iter().filter_map(|n| n.weight_id()).collect()
    }

    /// Spatial height of the graph input followed by every pooling output.
    pub fn pool_trace(&self) -> Vec<usize> {
        let mut trace: Vec<usize> = self.input.spatial().map(|(h, _)| h).into_iter().collect();
        for node in &self.nodes {
            if let OpKind::MaxPool2D { .. } = node.kind {
                if let Some((h, _)) = self.tensors.get(&node.output).and_then(|t| t.spatial()) {
                    trace.push(h);
                }
            }
        }
        trace
    }

    pub fn contains_kind(&self, name: &str) -> bool {
        self.nodes.iter().any(|n| n.kind.name() == name)
    }

    /// Same topology with the parameter data converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph {
            name: self.name.clone(),
            input: self.input.clone(),
            output: self.output.clone(),
            nodes: self.nodes.clone(),
            tensors: self.tensors.clone(),
            weights: self
                .weights
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect()))
                .collect(),
        }
    }

    pub fn set_weights(&mut self, id: &str, data: Vec<T>) -> Result<(), GraphError> {
        let spec = self
            .tensors
            .get(id)
            .ok_or_else(|| GraphError::MissingTensor(id.to_string()))?;
        if spec.num_elements() != data.len() {
            return Err(GraphError::ShapeMismatch {
                node: id.to_string(),
                detail: format!("expected {} elements, got {}", spec.num_elements(), data.len()),
            });
        }
        self.weights.insert(id.to_string(), data);
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("shape mismatch at {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("non-positive dimension in tensor {0}")]
    NonPositiveDim(String),
    #[error("invalid arity: {0}")]
    InvalidArity(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("graph is not a single-path chain: {0}")]
    NotAChain(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViolationCode {
    UnsupportedOp,
    MemoryExceeded,
    DimExceeded,
    MissingTensor,
    DuplicateId,
    ShapeMismatch,
}

/// A structural or deployability problem. `node_id` is `"<graph>"` for
/// graph-level findings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub node_id: String,
    pub code: ViolationCode,
    pub detail: String,
}

pub const GRAPH_SCOPE: &str = "<graph>";

impl Violation {
    pub fn new(node_id: impl Into<String>, code: ViolationCode, detail: impl Into<String>) -> Self {
        Self { node_id: node_id.into(), code, detail: detail.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at {}: {}", self.code, self.node_id, self.detail)
    }
}

fn mismatch(node: &str, detail: impl Into<String>) -> GraphError {
    GraphError::ShapeMismatch { node: node.to_string(), detail: detail.into() }
}

/// Output shape of a single op. `weight` is the declared weight shape for
/// Conv2D and Dense.
pub fn op_output_shape(
    node_id: &str,
    kind: &OpKind,
    input: &[usize],
    weight: Option<&[usize]>,
) -> Result<Vec<usize>, GraphError> {
    if input.is_empty() || input.contains(&0) {
        return Err(GraphError::NonPositiveDim(node_id.to_string()));
    }
    match *kind {
        OpKind::Conv2D { stride, padding } => {
            let [n, h, w, c] = rank4(node_id, input)?;
            let weight = weight.ok_or_else(|| mismatch(node_id, "missing weight shape"))?;
            let &[out_c, kh, kw, in_c] = weight else {
                return Err(mismatch(node_id, format!("conv weight must be rank 4, got {weight:?}")));
            };
            if weight.contains(&0) || stride == 0 {
                return Err(GraphError::NonPositiveDim(node_id.to_string()));
            }
            if in_c != c {
                return Err(mismatch(node_id, format!("weight in_c {in_c} != activation channels {c}")));
            }
            let (oh, ow) = match padding {
                Padding::Same => (h.div_ceil(stride), w.div_ceil(stride)),
                Padding::Valid => (
                    valid_extent(node_id, h, kh, stride)?,
                    valid_extent(node_id, w, kw, stride)?,
                ),
            };
            Ok(vec![n, oh, ow, out_c])
        }
        OpKind::MaxPool2D { window, stride } => {
            let [n, h, w, c] = rank4(node_id, input)?;
            if window == 0 || stride == 0 {
                return Err(GraphError::NonPositiveDim(node_id.to_string()));
            }
            Ok(vec![
                n,
                valid_extent(node_id, h, window, stride)?,
                valid_extent(node_id, w, window, stride)?,
                c,
            ])
        }
        OpKind::Relu | OpKind::Softmax => Ok(input.to_vec()),
        OpKind::Flatten => Ok(vec![1, feature_len(input)]),
        OpKind::Dense => {
            let weight = weight.ok_or_else(|| mismatch(node_id, "missing weight shape"))?;
            let &[out, inp] = weight else {
                return Err(mismatch(node_id, format!("dense weight must be rank 2, got {weight:?}")));
            };
            if out == 0 || inp == 0 {
                return Err(GraphError::NonPositiveDim(node_id.to_string()));
            }
            let len = feature_len(input);
            if len != inp {
                return Err(mismatch(node_id, format!("dense expects {inp} inputs, got {len}")));
            }
            Ok(vec![out])
        }
    }
}

/// Element count excluding the leading batch dimension (rank > 1).
pub fn feature_len(shape: &[usize]) -> usize {
    match shape {
        [n] => *n,
        [_, rest @ ..] => rest.iter().product(),
        [] => 0,
    }
}

fn rank4(node_id: &str, shape: &[usize]) -> Result<[usize; 4], GraphError> {
    match *shape {
        [1, h, w, c] => Ok([1, h, w, c]),
        _ => Err(mismatch(node_id, format!("expected NHWC activation with batch 1, got {shape:?}"))),
    }
}

fn valid_extent(node_id: &str, size: usize, window: usize, stride: usize) -> Result<usize, GraphError> {
    if size < window {
        return Err(GraphError::NonPositiveDim(node_id.to_string()));
    }
    Ok((size - window) / stride + 1)
}

/// Fills in every activation shape. Fails on a broken chain, a zero
/// dimension or inconsistent parameter shapes.
pub fn infer_shapes<T: Scalar>(graph: &ModelGraph<T>) -> Result<ModelGraph<T>, GraphError> {
    let mut g = graph.clone();
    if g.input.shape.is_empty() || g.input.shape.contains(&0) {
        return Err(GraphError::NonPositiveDim(g.input.id.clone()));
    }
    if !matches!(g.input.shape.len(), 1 | 2 | 4) {
        return Err(mismatch(&g.input.id, format!("unsupported input rank {}", g.input.shape.len())));
    }
    g.tensors.insert(g.input.id.clone(), g.input.clone());

    let mut current = g.input.id.clone();
    let mut shape = g.input.shape.clone();
    for node in &g.nodes {
        if node.inputs.len() != node.kind.arity() {
            return Err(GraphError::InvalidArity(format!(
                "{} ({}) takes {} inputs, got {}",
                node.id,
                node.kind,
                node.kind.arity(),
                node.inputs.len()
            )));
        }
        if node.activation() != current {
            return Err(GraphError::NotAChain(format!(
                "node {} reads {} but the chain is at {}",
                node.id,
                node.activation(),
                current
            )));
        }
        let weight_shape = match node.weight_id() {
            Some(wid) => {
                let spec = g.tensors.get(wid).ok_or_else(|| GraphError::MissingTensor(wid.to_string()))?;
                if spec.shape.contains(&0) {
                    return Err(GraphError::NonPositiveDim(wid.to_string()));
                }
                Some(spec.shape.clone())
            }
            None => None,
        };
        let out = op_output_shape(&node.id, &node.kind, &shape, weight_shape.as_deref())?;
        if let (Some(bid), Some(ws)) = (node.bias_id(), weight_shape.as_ref()) {
            let spec = g.tensors.get(bid).ok_or_else(|| GraphError::MissingTensor(bid.to_string()))?;
            if spec.shape != [ws[0]] {
                return Err(mismatch(&node.id, format!("bias shape {:?} != [{}]", spec.shape, ws[0])));
            }
        }
        let entry = g
            .tensors
            .entry(node.output.clone())
            .or_insert_with(|| TensorSpec::pending(node.output.clone()));
        entry.shape = out.clone();
        shape = out;
        current = node.output.clone();
    }
    if g.output.id != current {
        return Err(GraphError::NotAChain(format!(
            "graph output {} is not the chain end {}",
            g.output.id, current
        )));
    }
    g.input = g.tensors[&g.input.id].clone();
    g.output = g.tensors[&current].clone();
    Ok(g)
}

/// Structural check. Returns every problem found; an empty list means the
/// chain is ordered, ids are unique and every referenced tensor exists.
pub fn validate_graph<T: Scalar>(graph: &ModelGraph<T>) -> Vec<Violation> {
    use ViolationCode::*;
    let mut out = Vec::new();

    let mut node_ids = HashSet::new();
    for node in &graph.nodes {
        if !node_ids.insert(node.id.as_str()) {
            out.push(Violation::new(&node.id, DuplicateId, format!("node id {} declared twice", node.id)));
        }
    }

    let params: HashSet<&str> = graph.parameter_ids().into_iter().collect();
    let mut produced: HashSet<&str> = HashSet::new();
    produced.insert(graph.input.id.as_str());
    if params.contains(graph.input.id.as_str()) {
        out.push(Violation::new(GRAPH_SCOPE, DuplicateId, format!("input id {} reused as parameter", graph.input.id)));
    }
    if !graph.tensors.contains_key(&graph.input.id) {
        out.push(Violation::new(GRAPH_SCOPE, MissingTensor, format!("input {} not declared", graph.input.id)));
    }

    let mut current = graph.input.id.as_str();
    for node in &graph.nodes {
        if node.inputs.len() != node.kind.arity() {
            out.push(Violation::new(
                &node.id,
                ShapeMismatch,
                format!("{} takes {} inputs, got {}", node.kind, node.kind.arity(), node.inputs.len()),
            ));
        }
        if let Some(act) = node.inputs.first() {
            if !graph.tensors.contains_key(act) {
                out.push(Violation::new(&node.id, MissingTensor, format!("activation {act} not declared")));
            } else if act != current {
                out.push(Violation::new(
                    &node.id,
                    MissingTensor,
                    format!("activation {act} is not available here (chain is at {current})"),
                ));
            }
        }
        for pid in node.inputs.iter().skip(1) {
            match (graph.tensors.get(pid), graph.weights.get(pid)) {
                (None, _) => out.push(Violation::new(&node.id, MissingTensor, format!("parameter {pid} not declared"))),
                (Some(_), None) => out.push(Violation::new(&node.id, MissingTensor, format!("no data for parameter {pid}"))),
                (Some(spec), Some(data)) => {
                    if spec.num_elements() != data.len() {
                        out.push(Violation::new(
                            &node.id,
                            ShapeMismatch,
                            format!("{pid} declares {} elements but holds {}", spec.num_elements(), data.len()),
                        ));
                    }
                }
            }
        }
        if !produced.insert(node.output.as_str()) || params.contains(node.output.as_str()) {
            out.push(Violation::new(&node.id, DuplicateId, format!("tensor id {} produced twice", node.output)));
        }
        if !graph.tensors.contains_key(&node.output) {
            out.push(Violation::new(&node.id, MissingTensor, format!("output {} not declared", node.output)));
        }
        current = node.output.as_str();
    }
    if graph.output.id != current {
        out.push(Violation::new(
            GRAPH_SCOPE,
            MissingTensor,
            format!("graph output {} is not the chain end {current}", graph.output.id),
        ));
    }
    out
}

/// Incremental chain construction with eager shape tracking.
pub struct GraphBuilder<T: Scalar> {
    graph: ModelGraph<T>,
    shape: Vec<usize>,
}

impl<T: Scalar> GraphBuilder<T> {
    pub fn new(name: impl Into<String>, input_id: impl Into<String>, input_shape: Vec<usize>) -> Self {
        let input = TensorSpec::new(input_id, input_shape.clone(), DataType::F32);
        let mut tensors = BTreeMap::new();
        tensors.insert(input.id.clone(), input.clone());
        Self {
            graph: ModelGraph {
                name: name.into(),
                output: input.clone(),
                input,
                nodes: Vec::new(),
                tensors,
                weights: BTreeMap::new(),
            },
            shape: input_shape,
        }
    }

    pub fn current_shape(&self) -> &[usize] {
        &self.shape
    }

    fn push(&mut self, id: &str, kind: OpKind, params: &[(String, Vec<usize>)]) -> Result<(), GraphError> {
        let weight_shape = params.first().map(|(_, s)| s.as_slice());
        let out_shape = op_output_shape(id, &kind, &self.shape, weight_shape)?;
        let output = format!("{id}.out");
        let mut inputs = vec![self.graph.output.id.clone()];
        for (pid, shape) in params {
            self.graph.tensors.insert(pid.clone(), TensorSpec::new(pid.clone(), shape.clone(), DataType::F32));
            self.graph.weights.insert(pid.clone(), vec![T::zero(); shape.iter().product()]);
            inputs.push(pid.clone());
        }
        let spec = TensorSpec::new(output.clone(), out_shape.clone(), DataType::F32);
        self.graph.tensors.insert(output.clone(), spec.clone());
        self.graph.nodes.push(NodeSpec { id: id.to_string(), kind, inputs, output });
        self.graph.output = spec;
        self.shape = out_shape;
        Ok(())
    }

    /// Adds a zero-initialized conv with a square kernel.
    pub fn conv2d(mut self, id: &str, filters: usize, kernel: usize, stride: usize, padding: Padding) -> Result<Self, GraphError> {
        let in_c = *self.shape.last().unwrap_or(&0);
        self.push(
            id,
            OpKind::Conv2D { stride, padding },
            &[(format!("{id}.weight"), vec![filters, kernel, kernel, in_c]), (format!("{id}.bias"), vec![filters])],
        )?;
        Ok(self)
    }

    pub fn max_pool(mut self, id: &str, window: usize, stride: usize) -> Result<Self, GraphError> {
        self.push(id, OpKind::MaxPool2D { window, stride }, &[])?;
        Ok(self)
    }

    pub fn relu(mut self, id: &str) -> Result<Self, GraphError> {
        self.push(id, OpKind::Relu, &[])?;
        Ok(self)
    }

    pub fn flatten(mut self, id: &str) -> Result<Self, GraphError> {
        self.push(id, OpKind::Flatten, &[])?;
        Ok(self)
    }

    pub fn softmax(mut self, id: &str) -> Result<Self, GraphError> {
        self.push(id, OpKind::Softmax, &[])?;
        Ok(self)
    }

    pub fn dense(mut self, id: &str, units: usize) -> Result<Self, GraphError> {
        let inp = feature_len(&self.shape);
        self.push(
            id,
            OpKind::Dense,
            &[(format!("{id}.weight"), vec![units, inp]), (format!("{id}.bias"), vec![units])],
        )?;
        Ok(self)
    }

    pub fn finish(self) -> ModelGraph<T> {
        self.graph
    }
}

/// Input side of the reference network.
pub const REFERENCE_INPUT: usize = 224;

/// Six conv/relu/pool stages, a hidden dense layer with relu, a two-way
/// dense output and a softmax head, all parameters zero.
pub fn build_reference_net<T: Scalar>(channels: &[usize], hidden: usize) -> Result<ModelGraph<T>, GraphError> {
    if channels.len() != 6 {
        return Err(GraphError::InvalidArity(format!("expected 6 conv widths, got {}", channels.len())));
    }
    if channels.contains(&0) || hidden == 0 {
        return Err(GraphError::InvalidArity("layer widths must be >= 1".into()));
    }
    let mut b = GraphBuilder::new("reference_net", "input", vec![1, REFERENCE_INPUT, REFERENCE_INPUT, 3]);
    for (i, &c) in channels.iter().enumerate() {
        let n = i + 1;
        b = b
            .conv2d(&format!("conv{n}"), c, 3, 1, Padding::Same)?
            .relu(&format!("relu{n}"))?
            .max_pool(&format!("pool{n}"), 2, 2)?;
    }
    let g = b
        .flatten("flatten")?
        .dense("fc1", hidden)?
        .relu("fc1_relu")?
        .dense("fc2", 2)?
        .softmax("softmax")?
        .finish();
    infer_shapes(&g)
}
