//! Declarative layer-graph IR for the detector architecture.
//!
//! A [`LayerGraph`] is an acyclic list of [`LayerSpec`] nodes in topological
//! order plus named input/output references. Everything downstream keys off
//! node names: shape inference, parameter/FLOP accounting, the JSON export,
//! and the weight container consumed by the executor.

mod build;

pub use build::{
    build_blite, build_fdlite, BackboneConfig, CcpmVariant, DetectorConfig, FruVariant,
    ANCHORS_PER_CELL, BRANCH_OUTPUT_NAMES, DEFAULT_FPN_CHANNELS, HEAD_DIMS,
};

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use thiserror::Error;

/// Epsilon used by every batch-norm node at inference time.
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("node '{node}': {msg}")]
    Structure { node: String, msg: String },
    #[error("graph format error: {0}")]
    Format(String),
}

impl GraphError {
    fn at(node: &str, msg: impl Into<String>) -> Self {
        GraphError::Structure {
            node: node.to_string(),
            msg: msg.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    BatchNorm,
    LeakyReLU,
    MaxPool,
    UpsampleNearest2x,
    Concat,
    Add,
    Reshape,
}

/// Axis for `Concat` nodes: `Channel` fuses feature maps, `Row` stacks
/// already-flattened per-anchor rows (the head's vertical concatenation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConcatAxis {
    #[default]
    Channel,
    Row,
}

/// One architecture node. Kernel/stride/padding/groups are meaningful for
/// `Conv` and `MaxPool`; other kinds keep the neutral defaults so the shared
/// invariants (stride >= 1, groups >= 1, ...) hold uniformly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Producer node names (or the graph input name), in consumption order.
    pub inputs: Vec<String>,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub has_bias: bool,
    /// Key into the weight container. Defaults to the node name; detector
    /// head nodes of both branches share one key per level (weight sharing).
    pub weight_key: String,
    /// Negative slope, used by `LeakyReLU` nodes only.
    pub slope: f32,
}

impl LayerSpec {
    /// Neutral spec of the given kind; callers fill in what the kind uses.
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        let name = name.into();
        LayerSpec {
            weight_key: name.clone(),
            name,
            kind,
            inputs: Vec::new(),
            kernel_h: 1,
            kernel_w: 1,
            in_channels: 1,
            out_channels: 1,
            stride: 1,
            padding: 0,
            groups: 1,
            has_bias: false,
            slope: 0.0,
        }
    }

    fn validate(&self) -> Result<(), GraphError> {
        if self.groups < 1 || self.stride < 1 {
            return Err(GraphError::at(&self.name, "stride and groups must be >= 1"));
        }
        if !self.in_channels.is_multiple_of(self.groups)
            || !self.out_channels.is_multiple_of(self.groups)
        {
            return Err(GraphError::at(
                &self.name,
                format!(
                    "channels {}->{} not divisible by groups {}",
                    self.in_channels, self.out_channels, self.groups
                ),
            ));
        }
        if self.kind == LayerKind::MaxPool && self.padding >= self.kernel_h.min(self.kernel_w) {
            return Err(GraphError::at(&self.name, "pool padding must be < kernel"));
        }
        if self.kind == LayerKind::LeakyReLU && !(self.slope > 0.0 && self.slope < 1.0) {
            return Err(GraphError::at(&self.name, "leaky slope must be in (0,1)"));
        }
        let arity_ok = match self.kind {
            LayerKind::Concat | LayerKind::Add => self.inputs.len() >= 2,
            LayerKind::UpsampleNearest2x => !self.inputs.is_empty() && self.inputs.len() <= 2,
            _ => self.inputs.len() == 1,
        };
        if !arity_ok {
            return Err(GraphError::at(
                &self.name,
                format!("{:?} given {} inputs", self.kind, self.inputs.len()),
            ));
        }
        Ok(())
    }
}

/// Shape of a dense N-D buffer in fixed N,H,W,C order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorShape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl TensorShape {
    pub fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        debug_assert!(n >= 1 && h >= 1 && w >= 1 && c >= 1);
        TensorShape { n, h, w, c }
    }

    pub fn elements(&self) -> usize {
        self.n * self.h * self.w * self.c
    }
}

impl std::fmt::Display for TensorShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.h, self.w, self.c)
    }
}

/// Per-node cost line in a [`BudgetReport`]. A node whose `weight_key`
/// aliases an earlier node reports zero parameters (shared weights are
/// counted once); FLOPs are always per executed node.
#[derive(Debug, Clone, Serialize)]
pub struct NodeBudget {
    pub name: String,
    pub params: u64,
    /// Running statistics (batch-norm mean/var): stored, not learned.
    pub non_learned: u64,
    pub flops: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BudgetReport {
    pub per_node: Vec<NodeBudget>,
    pub total_params: u64,
    pub total_non_learned: u64,
    pub total_flops: u64,
    /// Multiply-accumulate convention: conv terms halved, elementwise terms
    /// unchanged. For comparison against tables that count MACs as "FLOPs".
    pub total_macs: u64,
    pub input_shape: Option<TensorShape>,
}

impl BudgetReport {
    fn from_nodes(per_node: Vec<NodeBudget>, input_shape: Option<TensorShape>) -> Self {
        let total_params = per_node.iter().map(|n| n.params).sum();
        let total_non_learned = per_node.iter().map(|n| n.non_learned).sum();
        let total_flops = per_node.iter().map(|n| n.flops).sum();
        let total_macs = per_node.iter().map(|n| n.macs).sum();
        BudgetReport {
            per_node,
            total_params,
            total_non_learned,
            total_flops,
            total_macs,
            input_shape,
        }
    }
}

/// Directed acyclic layer graph. Nodes are stored in topological order (the
/// only order `add` accepts) and evaluation order is exactly this list.
#[derive(Debug, Clone)]
pub struct LayerGraph {
    nodes: Vec<LayerSpec>,
    concat_axes: HashMap<String, ConcatAxis>,
    index: HashMap<String, usize>,
    pub input_name: String,
    pub input_channels: usize,
    pub outputs: Vec<String>,
    pub metadata: BTreeMap<String, String>,
}

impl LayerGraph {
    pub fn new(input_name: impl Into<String>, input_channels: usize) -> Self {
        LayerGraph {
            nodes: Vec::new(),
            concat_axes: HashMap::new(),
            index: HashMap::new(),
            input_name: input_name.into(),
            input_channels,
            outputs: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }

    /// Append a node. Every input must already exist (graph input or an
    /// earlier node), which keeps the node list acyclic by construction.
    pub fn add(&mut self, spec: LayerSpec) -> Result<(), GraphError> {
        spec.validate()?;
        if spec.name == self.input_name || self.index.contains_key(&spec.name) {
            return Err(GraphError::at(&spec.name, "duplicate node name"));
        }
        for input in &spec.inputs {
            if *input != self.input_name && !self.index.contains_key(input) {
                return Err(GraphError::at(
                    &spec.name,
                    format!("unknown producer '{input}'"),
                ));
            }
        }
        self.index.insert(spec.name.clone(), self.nodes.len());
        self.nodes.push(spec);
        Ok(())
    }

    pub fn add_concat(&mut self, spec: LayerSpec, axis: ConcatAxis) -> Result<(), GraphError> {
        let name = spec.name.clone();
        self.add(spec)?;
        self.concat_axes.insert(name, axis);
        Ok(())
    }

    pub fn concat_axis(&self, name: &str) -> ConcatAxis {
        self.concat_axes.get(name).copied().unwrap_or_default()
    }

    pub fn nodes(&self) -> &[LayerSpec] {
        &self.nodes
    }

    pub fn node(&self, name: &str) -> Option<&LayerSpec> {
        self.index.get(name).map(|&i| &self.nodes[i])
    }

    /// All producer -> consumer pairs.
    pub fn edges(&self) -> Vec<(String, String)> {
        self.nodes
            .iter()
            .flat_map(|n| n.inputs.iter().map(|i| (i.clone(), n.name.clone())))
            .collect()
    }

    pub fn set_outputs(&mut self, outputs: Vec<String>) -> Result<(), GraphError> {
        for name in &outputs {
            if !self.index.contains_key(name) {
                return Err(GraphError::at(name, "declared output is not a node"));
            }
        }
        self.outputs = outputs;
        Ok(())
    }

    /// Number of consumers per node; the executor frees buffers at zero.
    pub fn consumer_counts(&self) -> HashMap<String, usize> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for node in &self.nodes {
            for input in &node.inputs {
                *counts.entry(input.clone()).or_default() += 1;
            }
        }
        counts
    }

    pub fn to_json(&self) -> String {
        let doc = GraphDoc {
            format: GRAPH_FORMAT.to_string(),
            input: GraphInput {
                name: self.input_name.clone(),
                channels: self.input_channels,
            },
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeDoc {
                    spec: n.clone(),
                    concat_axis: self.concat_axis(&n.name),
                })
                .collect(),
            edges: self.edges(),
            outputs: self.outputs.clone(),
            metadata: self.metadata.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("graph serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let doc: GraphDoc =
            serde_json::from_str(text).map_err(|e| GraphError::Format(e.to_string()))?;
        if doc.format != GRAPH_FORMAT {
            return Err(GraphError::Format(format!(
                "unsupported graph format '{}'",
                doc.format
            )));
        }
        let mut graph = LayerGraph::new(doc.input.name, doc.input.channels);
        for node in doc.nodes {
            let axis = node.concat_axis;
            let mut spec = node.spec;
            if spec.weight_key.is_empty() {
                spec.weight_key = spec.name.clone();
            }
            if spec.kind == LayerKind::Concat {
                graph.add_concat(spec, axis)?;
            } else {
                graph.add(spec)?;
            }
        }
        graph.set_outputs(doc.outputs)?;
        graph.metadata = doc.metadata;
        Ok(graph)
    }
}

const GRAPH_FORMAT: &str = "fdlite-graph-v1";

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    format: String,
    input: GraphInput,
    nodes: Vec<NodeDoc>,
    edges: Vec<(String, String)>,
    outputs: Vec<String>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct GraphInput {
    name: String,
    channels: usize,
}

#[derive(Serialize, Deserialize)]
struct NodeDoc {
    #[serde(flatten)]
    spec: LayerSpec,
    #[serde(default)]
    concat_axis: ConcatAxis,
}

/// Spatial size of a conv/pool output: floor((in + 2p - k)/s) + 1, with
/// symmetric zero (or -inf) padding.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Infer the output shape of every node for the given input shape.
pub fn shape_infer(
    graph: &LayerGraph,
    input: TensorShape,
) -> Result<BTreeMap<String, TensorShape>, GraphError> {
    if input.c != graph.input_channels {
        return Err(GraphError::at(
            &graph.input_name,
            format!(
                "input has {} channels, graph expects {}",
                input.c, graph.input_channels
            ),
        ));
    }
    let mut shapes: BTreeMap<String, TensorShape> = BTreeMap::new();
    shapes.insert(graph.input_name.clone(), input);
    for node in graph.nodes() {
        let shape = infer_node(graph, node, &shapes)?;
        shapes.insert(node.name.clone(), shape);
    }
    Ok(shapes)
}

fn infer_node(
    graph: &LayerGraph,
    node: &LayerSpec,
    shapes: &BTreeMap<String, TensorShape>,
) -> Result<TensorShape, GraphError> {
    let input_shapes: Vec<TensorShape> = node
        .inputs
        .iter()
        .map(|i| {
            shapes
                .get(i)
                .copied()
                .ok_or_else(|| GraphError::at(&node.name, format!("missing producer '{i}'")))
        })
        .collect::<Result<_, _>>()?;
    let first = input_shapes[0];
    match node.kind {
        LayerKind::Conv | LayerKind::MaxPool => {
            if first.c != node.in_channels {
                return Err(GraphError::at(
                    &node.name,
                    format!(
                        "expected {} input channels, got {}",
                        node.in_channels, first.c
                    ),
                ));
            }
            let h = conv_out_dim(first.h, node.kernel_h, node.stride, node.padding)
                .ok_or_else(|| GraphError::at(&node.name, "kernel exceeds padded input"))?;
            let w = conv_out_dim(first.w, node.kernel_w, node.stride, node.padding)
                .ok_or_else(|| GraphError::at(&node.name, "kernel exceeds padded input"))?;
            let c = if node.kind == LayerKind::Conv {
                node.out_channels
            } else {
                first.c
            };
            Ok(TensorShape::new(first.n, h, w, c))
        }
        LayerKind::BatchNorm | LayerKind::LeakyReLU => {
            if first.c != node.in_channels {
                return Err(GraphError::at(
                    &node.name,
                    format!(
                        "expected {} input channels, got {}",
                        node.in_channels, first.c
                    ),
                ));
            }
            Ok(first)
        }
        LayerKind::UpsampleNearest2x => {
            if first.c != node.in_channels {
                return Err(GraphError::at(
                    &node.name,
                    format!(
                        "expected {} input channels, got {}",
                        node.in_channels, first.c
                    ),
                ));
            }
            // Optional second input: upsample 2x then center-crop/pad to its
            // spatial size (the FPN top-down path against a ceil-sized lateral).
            match input_shapes.get(1) {
                Some(reference) => {
                    if reference.n != first.n {
                        return Err(GraphError::at(&node.name, "batch mismatch with reference"));
                    }
                    Ok(TensorShape::new(first.n, reference.h, reference.w, first.c))
                }
                None => Ok(TensorShape::new(first.n, first.h * 2, first.w * 2, first.c)),
            }
        }
        LayerKind::Concat => match graph.concat_axis(&node.name) {
            ConcatAxis::Channel => {
                let c: usize = input_shapes.iter().map(|s| s.c).sum();
                for s in &input_shapes {
                    if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                        return Err(GraphError::at(
                            &node.name,
                            "channel concat inputs disagree on n/h/w",
                        ));
                    }
                }
                if c != node.in_channels || c != node.out_channels {
                    return Err(GraphError::at(
                        &node.name,
                        format!(
                            "concat produces {} channels, spec says {}",
                            c, node.out_channels
                        ),
                    ));
                }
                Ok(TensorShape::new(first.n, first.h, first.w, c))
            }
            ConcatAxis::Row => {
                let h: usize = input_shapes.iter().map(|s| s.h).sum();
                for s in &input_shapes {
                    if (s.n, s.w, s.c) != (first.n, first.w, first.c) {
                        return Err(GraphError::at(
                            &node.name,
                            "row concat inputs disagree on n/w/c",
                        ));
                    }
                }
                Ok(TensorShape::new(first.n, h, first.w, first.c))
            }
        },
        LayerKind::Add => {
            for s in &input_shapes {
                if *s != first {
                    return Err(GraphError::at(
                        &node.name,
                        format!("add inputs disagree: {} vs {}", first, s),
                    ));
                }
            }
            Ok(first)
        }
        LayerKind::Reshape => {
            // Flatten (n,h,w,a*d) feature maps into per-anchor rows (n, h*w*a, 1, d).
            let d = node.out_channels;
            if first.c != node.in_channels {
                return Err(GraphError::at(
                    &node.name,
                    format!(
                        "expected {} input channels, got {}",
                        node.in_channels, first.c
                    ),
                ));
            }
            if d == 0 || !first.c.is_multiple_of(d) {
                return Err(GraphError::at(
                    &node.name,
                    format!("channels {} not divisible by row width {}", first.c, d),
                ));
            }
            let rows = first.h * first.w * (first.c / d);
            Ok(TensorShape::new(first.n, rows, 1, d))
        }
    }
}

/// Learned parameter count per node: conv k_h*k_w*(in/g)*out (+out bias),
/// batch-norm 2c learned scale/shift (running stats reported as non-learned).
/// Shared `weight_key`s are counted at their first occurrence only.
pub fn count_params(graph: &LayerGraph) -> BudgetReport {
    let mut seen_keys: HashSet<&str> = HashSet::new();
    let per_node = graph
        .nodes()
        .iter()
        .map(|node| {
            let owns_weights = node.kind == LayerKind::Conv || node.kind == LayerKind::BatchNorm;
            let first_use = owns_weights && seen_keys.insert(node.weight_key.as_str());
            let (params, non_learned) = if !first_use {
                (0, 0)
            } else {
                match node.kind {
                    LayerKind::Conv => {
                        let weights = node.kernel_h
                            * node.kernel_w
                            * (node.in_channels / node.groups)
                            * node.out_channels;
                        let bias = if node.has_bias { node.out_channels } else { 0 };
                        ((weights + bias) as u64, 0)
                    }
                    LayerKind::BatchNorm => (
                        (2 * node.out_channels) as u64,
                        (2 * node.out_channels) as u64,
                    ),
                    _ => (0, 0),
                }
            };
            NodeBudget {
                name: node.name.clone(),
                params,
                non_learned,
                flops: 0,
                macs: 0,
            }
        })
        .collect();
    BudgetReport::from_nodes(per_node, None)
}

/// FLOP accounting for one forward pass at the given input shape.
/// Conv counts multiply-add as 2 FLOPs; the MAC column halves conv terms.
pub fn count_flops(graph: &LayerGraph, input: TensorShape) -> Result<BudgetReport, GraphError> {
    let shapes = shape_infer(graph, input)?;
    let params = count_params(graph);
    let per_node = graph
        .nodes()
        .iter()
        .zip(params.per_node)
        .map(|(node, pnode)| {
            let out = shapes[&node.name];
            let elements = out.elements() as u64;
            let (flops, macs) = match node.kind {
                LayerKind::Conv => {
                    let weights = (node.kernel_h
                        * node.kernel_w
                        * (node.in_channels / node.groups)
                        * node.out_channels) as u64;
                    let spatial = (out.n * out.h * out.w) as u64;
                    let flops = 2 * weights * spatial;
                    (flops, flops / 2)
                }
                LayerKind::BatchNorm => (2 * elements, 2 * elements),
                LayerKind::LeakyReLU | LayerKind::Add => (elements, elements),
                LayerKind::MaxPool => {
                    let cmp = (node.kernel_h * node.kernel_w - 1) as u64;
                    (cmp * elements, cmp * elements)
                }
                LayerKind::UpsampleNearest2x | LayerKind::Concat | LayerKind::Reshape => (0, 0),
            };
            NodeBudget {
                flops,
                macs,
                ..pnode
            }
        })
        .collect();
    Ok(BudgetReport::from_nodes(per_node, Some(input)))
}
