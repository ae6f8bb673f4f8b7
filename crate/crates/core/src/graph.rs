//! CNN compute graph: layer data model, validation and shape inference.
//!
//! Graph inputs are named tensors, not layers. Layers reference their
//! producers by name (either a graph input or another layer). Batch is
//! fixed at 1, so every tensor is `[channels, height, width]`.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

/// `[C, H, W]` tensor shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TensorShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TensorShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        TensorShape { channels, height, width }
    }

    pub const fn elements(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    pub const fn is_positive(&self) -> bool {
        self.channels >= 1 && self.height >= 1 && self.width >= 1
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{},{}]", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvParams {
    pub out_channels: usize,
    /// Filled in by shape inference from the producer when absent.
    pub in_channels: Option<usize>,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub pad: usize,
    pub stride: usize,
    pub group: usize,
    pub has_bias: bool,
    pub activation: Activation,
}

impl ConvParams {
    /// Dense square convolution with bias and no activation.
    pub fn new(out_channels: usize, kernel: usize, pad: usize, stride: usize) -> Self {
        ConvParams {
            out_channels,
            in_channels: None,
            kernel_h: kernel,
            kernel_w: kernel,
            pad,
            stride,
            group: 1,
            has_bias: true,
            activation: Activation::None,
        }
    }

    pub fn with_group(mut self, group: usize) -> Self {
        self.group = group;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.has_bias = false;
        self
    }

    /// Input channel count. Panics before shape inference.
    pub fn in_ch(&self) -> usize {
        self.in_channels.expect("conv in_channels is known after shape inference")
    }

    pub fn in_per_group(&self) -> usize {
        self.in_ch() / self.group
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.group
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1
    }

    /// Filter element count `[out, in/group, kh, kw]`.
    pub fn filter_len(&self) -> usize {
        self.out_channels * self.in_per_group() * self.kernel_h * self.kernel_w
    }

    pub fn bias_len(&self) -> usize {
        if self.has_bias {
            self.out_channels
        } else {
            0
        }
    }

    /// Multiply-accumulates needed for one output point across all output channels.
    pub fn macs_per_point(&self) -> usize {
        self.out_channels * self.in_per_group() * self.kernel_h * self.kernel_w
    }

    fn check(&self) -> Result<(), &'static str> {
        if self.out_channels == 0 {
            return Err("out_channels must be positive");
        }
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err("kernel dimensions must be positive");
        }
        if self.stride == 0 {
            return Err("stride must be positive");
        }
        if self.group == 0 {
            return Err("group must be positive");
        }
        if !self.out_channels.is_multiple_of(self.group) {
            return Err("out_channels not divisible by group");
        }
        if let Some(c) = self.in_channels {
            if c == 0 {
                return Err("in_channels must be positive");
            }
            if c % self.group != 0 {
                return Err("in_channels not divisible by group");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolParams {
    pub kind: PoolKind,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Op {
    Conv(ConvParams),
    Pool(PoolParams),
    Relu,
    Add,
    Concat,
}

impl Op {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Op::Conv(_) => "conv",
            Op::Pool(_) => "pool",
            Op::Relu => "relu",
            Op::Add => "add",
            Op::Concat => "concat",
        }
    }

    pub fn as_conv(&self) -> Option<&ConvParams> {
        match self {
            Op::Conv(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layer {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<String>,
    /// Output shape, present after shape inference.
    pub shape: Option<TensorShape>,
}

impl Layer {
    pub fn new(name: impl Into<String>, op: Op, inputs: &[&str]) -> Self {
        Layer {
            name: name.into(),
            op,
            inputs: inputs.iter().map(|s| String::from(*s)).collect(),
            shape: None,
        }
    }

    pub fn conv(&self) -> Option<&ConvParams> {
        self.op.as_conv()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphInput {
    pub name: String,
    pub shape: TensorShape,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    pub name: String,
    pub inputs: Vec<GraphInput>,
    pub layers: Vec<Layer>,
    pub outputs: Vec<String>,
}

/// One broken graph invariant. Validation collects all of them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DuplicateName(String),
    DanglingInput { layer: String, input: String },
    UnknownOutput(String),
    Arity { layer: String, kind: &'static str, found: usize },
    BadParams { layer: String, reason: &'static str },
    Cycle { layers: Vec<String> },
    ShapeMismatch { layer: String, left: TensorShape, right: TensorShape },
    SpatialMismatch { layer: String, shapes: Vec<TensorShape> },
    ChannelMismatch { layer: String, expected: usize, found: usize },
    GroupMismatch { layer: String, channels: usize, group: usize },
    NonPositiveOutput { layer: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateName(n) => write!(f, "duplicate name `{n}`"),
            Violation::DanglingInput { layer, input } => {
                write!(f, "layer `{layer}` references unknown producer `{input}`")
            }
            Violation::UnknownOutput(n) => write!(f, "output `{n}` does not name a layer or input"),
            Violation::Arity { layer, kind, found } => {
                write!(f, "{kind} layer `{layer}` has {found} inputs")
            }
            Violation::BadParams { layer, reason } => write!(f, "layer `{layer}`: {reason}"),
            Violation::Cycle { layers } => write!(f, "cycle through layers {layers:?}"),
            Violation::ShapeMismatch { layer, left, right } => {
                write!(f, "add `{layer}` operands differ: {left} vs {right}")
            }
            Violation::SpatialMismatch { layer, shapes } => {
                write!(f, "concat `{layer}` operands differ spatially: {shapes:?}")
            }
            Violation::ChannelMismatch { layer, expected, found } => {
                write!(f, "conv `{layer}` expects {expected} input channels, producer has {found}")
            }
            Violation::GroupMismatch { layer, channels, group } => {
                write!(f, "conv `{layer}`: {channels} input channels not divisible by group {group}")
            }
            Violation::NonPositiveOutput { layer } => {
                write!(f, "layer `{layer}` has a non-positive output dimension")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("invalid graph: {0}")]
    Invalid(Violation),
    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),
}

fn conv_out(extent: usize, kernel: usize, pad: usize, stride: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl Graph {
    pub fn new(name: impl Into<String>) -> Self {
        Graph {
            name: name.into(),
            inputs: Vec::new(),
            layers: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn with_input(mut self, name: &str, shape: TensorShape) -> Self {
        self.inputs.push(GraphInput { name: name.into(), shape });
        self
    }

    pub fn with_layer(mut self, layer: Layer) -> Self {
        self.layers.push(layer);
        self
    }

    pub fn with_output(mut self, name: &str) -> Self {
        self.outputs.push(name.into());
        self
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn input(&self, name: &str) -> Option<&GraphInput> {
        self.inputs.iter().find(|i| i.name == name)
    }

    /// Shape of a named tensor (graph input or inferred layer output).
    pub fn shape_of(&self, name: &str) -> Option<TensorShape> {
        if let Some(i) = self.input(name) {
            return Some(i.shape);
        }
        self.layer(name).and_then(|l| l.shape)
    }

    /// Indices of layers reading `name`, in layer order. A layer reading the
    /// same tensor twice appears once.
    pub fn consumers(&self, name: &str) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.inputs.iter().any(|i| i == name))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_output(&self, name: &str) -> bool {
        self.outputs.iter().any(|o| o == name)
    }

    /// Topological order of layer indices. Among ready layers the earliest in
    /// document order goes first, so an already sorted document is unchanged.
    pub fn topo_order(&self) -> Result<Vec<usize>, GraphError> {
        let index: BTreeMap<&str, usize> = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| (l.name.as_str(), i))
            .collect();
        let mut indegree = alloc::vec![0usize; self.layers.len()];
        let mut succ: Vec<Vec<usize>> = alloc::vec![Vec::new(); self.layers.len()];
        for (i, l) in self.layers.iter().enumerate() {
            let producers: BTreeSet<usize> =
                l.inputs.iter().filter_map(|n| index.get(n.as_str()).copied()).collect();
            for p in producers {
                indegree[i] += 1;
                succ[p].push(i);
            }
        }
        let mut ready: BTreeSet<usize> =
            (0..self.layers.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(self.layers.len());
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &s in &succ[i] {
                indegree[s] -= 1;
                if indegree[s] == 0 {
                    ready.insert(s);
                }
            }
        }
        if order.len() != self.layers.len() {
            let stuck = (0..self.layers.len())
                .filter(|i| indegree[*i] > 0)
                .map(|i| self.layers[i].name.clone())
                .collect();
            return Err(GraphError::Invalid(Violation::Cycle { layers: stuck }));
        }
        Ok(order)
    }

    /// Structural checks only: names, references, arity, parameters, cycles.
    pub fn structural_violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        for name in self.inputs.iter().map(|i| &i.name).chain(self.layers.iter().map(|l| &l.name)) {
            if !seen.insert(name.as_str()) {
                out.push(Violation::DuplicateName(name.clone()));
            }
        }
        for l in &self.layers {
            for i in &l.inputs {
                if !seen.contains(i.as_str()) {
                    out.push(Violation::DanglingInput { layer: l.name.clone(), input: i.clone() });
                }
            }
            let n = l.inputs.len();
            let arity_ok = match l.op {
                Op::Conv(_) | Op::Pool(_) | Op::Relu => n == 1,
                Op::Add => n == 2,
                Op::Concat => n >= 2,
            };
            if !arity_ok {
                out.push(Violation::Arity { layer: l.name.clone(), kind: l.op.kind_name(), found: n });
            }
            match &l.op {
                Op::Conv(c) => {
                    if let Err(reason) = c.check() {
                        out.push(Violation::BadParams { layer: l.name.clone(), reason });
                    }
                }
                Op::Pool(p)
                    if (p.kernel == 0 || p.stride == 0) => {
                        out.push(Violation::BadParams {
                            layer: l.name.clone(),
                            reason: "pool kernel and stride must be positive",
                        });
                    }
                _ => {}
            }
        }
        for o in &self.outputs {
            if !seen.contains(o.as_str()) {
                out.push(Violation::UnknownOutput(o.clone()));
            }
        }
        if let Err(GraphError::Invalid(v)) = self.topo_order() {
            out.push(v);
        }
        out
    }

    /// Every invariant violation, structural and shape-level.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = self.structural_violations();
        if out.iter().any(|v| matches!(v, Violation::Cycle { .. })) {
            return out;
        }
        let (_, shape_violations) = self.propagate_shapes();
        out.extend(shape_violations);
        out
    }

    /// Returns a copy with every layer's output shape (and conv
    /// `in_channels`) filled in. Deterministic and idempotent.
    pub fn infer_shapes(&self) -> Result<Graph, GraphError> {
        if let Some(v) = self.structural_violations().into_iter().next() {
            return Err(GraphError::Invalid(v));
        }
        let (g, violations) = self.propagate_shapes();
        match violations.into_iter().next() {
            Some(v) => Err(GraphError::Invalid(v)),
            None => Ok(g),
        }
    }

    /// Best-effort shape propagation that records violations and keeps
    /// going; layers depending on a failed layer stay unshaped.
    fn propagate_shapes(&self) -> (Graph, Vec<Violation>) {
        let mut g = self.clone();
        let mut violations = Vec::new();
        let order = match g.topo_order() {
            Ok(o) => o,
            Err(_) => return (g, violations),
        };
        let mut known: BTreeMap<String, TensorShape> =
            g.inputs.iter().map(|i| (i.name.clone(), i.shape)).collect();
        for idx in order {
            let layer = &mut g.layers[idx];
            layer.shape = None;
            let ins: Option<Vec<TensorShape>> =
                layer.inputs.iter().map(|n| known.get(n).copied()).collect();
            let Some(ins) = ins else { continue };
            let name = layer.name.clone();
            let shape = match &mut layer.op {
                Op::Conv(c) => {
                    let [x] = ins[..] else { continue };
                    let mut ok = true;
                    match c.in_channels {
                        Some(e) if e != x.channels => {
                            violations.push(Violation::ChannelMismatch {
                                layer: name.clone(),
                                expected: e,
                                found: x.channels,
                            });
                            ok = false;
                        }
                        _ => {}
                    }
                    if c.group == 0 || x.channels % c.group != 0 {
                        violations.push(Violation::GroupMismatch {
                            layer: name.clone(),
                            channels: x.channels,
                            group: c.group,
                        });
                        ok = false;
                    }
                    if !ok || c.stride == 0 {
                        continue;
                    }
                    c.in_channels = Some(x.channels);
                    let h = conv_out(x.height, c.kernel_h, c.pad, c.stride);
                    let w = conv_out(x.width, c.kernel_w, c.pad, c.stride);
                    h.zip(w).map(|(h, w)| TensorShape::new(c.out_channels, h, w))
                }
                Op::Pool(p) => {
                    let [x] = ins[..] else { continue };
                    if p.stride == 0 {
                        continue;
                    }
                    let h = conv_out(x.height, p.kernel, p.pad, p.stride);
                    let w = conv_out(x.width, p.kernel, p.pad, p.stride);
                    h.zip(w).map(|(h, w)| TensorShape::new(x.channels, h, w))
                }
                Op::Relu => match ins[..] {
                    [x] => Some(x),
                    _ => continue,
                },
                Op::Add => {
                    let [a, b] = ins[..] else { continue };
                    if a != b {
                        violations.push(Violation::ShapeMismatch { layer: name.clone(), left: a, right: b });
                        continue;
                    }
                    Some(a)
                }
                Op::Concat => {
                    if ins.len() < 2 {
                        continue;
                    }
                    let first = ins[0];
                    if ins.iter().any(|s| s.height != first.height || s.width != first.width) {
                        violations.push(Violation::SpatialMismatch { layer: name.clone(), shapes: ins });
                        continue;
                    }
                    Some(TensorShape::new(
                        ins.iter().map(|s| s.channels).sum(),
                        first.height,
                        first.width,
                    ))
                }
            };
            match shape {
                Some(s) if s.is_positive() => {
                    layer.shape = Some(s);
                    known.insert(name, s);
                }
                _ => violations.push(Violation::NonPositiveOutput { layer: name }),
            }
        }
        (g, violations)
    }

    /// Shape of a tensor that must exist after inference.
    pub fn require_shape(&self, name: &str) -> Result<TensorShape, GraphError> {
        self.shape_of(name).ok_or_else(|| GraphError::UnknownTensor(name.into()))
    }
}
