//! TOML graph documents.
//!
//! ```toml
//! name = "a.1"
//! outputs = ["conv2"]
//!
//! [[inputs]]
//! name = "data"
//! shape = [192, 28, 28]
//!
//! [[layers]]
//! name = "conv1"
//! kind = "conv"
//! inputs = ["data"]
//! params = { out_channels = 16, kernel = [1, 1], pad = 0, stride = 1 }
//! ```
//!
//! Conv params: `out_channels`, `kernel`, `pad`, `stride`, `group` (1),
//! `bias` (true), `activation` ("none"). Pool params: `pool` ("max" or
//! "avg"), `kernel`, `stride`, `pad`.

use std::ops::Range;

use layerfuse_core::graph::{GraphInput, Violation};
use layerfuse_core::{Activation, ConvParams, Graph, Layer, Op, PoolKind, PoolParams, TensorShape};
use serde::{Deserialize, Serialize};
use toml::Spanned;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DocError {
    #[error("line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("line {line}: layer `{layer}`: {message}")]
    Layer { line: usize, layer: String, message: String },
    #[error("line {line}: {violation}")]
    Invalid { line: usize, violation: String },
}

impl DocError {
    pub fn line(&self) -> usize {
        match self {
            DocError::Syntax { line, .. } | DocError::Layer { line, .. } | DocError::Invalid { line, .. } => *line,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphIn {
    name: String,
    #[serde(default)]
    inputs: Vec<InputDoc>,
    #[serde(default)]
    layers: Vec<LayerIn>,
    #[serde(default)]
    outputs: Vec<Spanned<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InputDoc {
    name: String,
    shape: [usize; 3],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerIn {
    name: Spanned<String>,
    kind: Spanned<String>,
    #[serde(default)]
    inputs: Vec<String>,
    params: Option<Spanned<ParamsDoc>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsDoc {
    #[serde(skip_serializing_if = "Option::is_none")]
    out_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kernel: Option<KernelDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pad: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    group: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bias: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    activation: Option<Activation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pool: Option<PoolKind>,
}

/// `kernel = 3` or `kernel = [kh, kw]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
enum KernelDoc {
    Square(usize),
    Rect([usize; 2]),
}

impl KernelDoc {
    fn dims(self) -> (usize, usize) {
        match self {
            KernelDoc::Square(k) => (k, k),
            KernelDoc::Rect([h, w]) => (h, w),
        }
    }
}

#[derive(Serialize)]
struct GraphOut<'a> {
    name: &'a str,
    outputs: &'a [String],
    inputs: Vec<InputDoc>,
    layers: Vec<LayerOut<'a>>,
}

#[derive(Serialize)]
struct LayerOut<'a> {
    name: &'a str,
    kind: &'static str,
    inputs: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    params: Option<ParamsDoc>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

fn column_of(text: &str, offset: usize) -> usize {
    let offset = offset.min(text.len());
    offset - text[..offset].rfind('\n').map_or(0, |i| i + 1) + 1
}

fn layer_err(text: &str, span: Range<usize>, layer: &str, message: impl Into<String>) -> DocError {
    DocError::Layer { line: line_of(text, span.start), layer: layer.to_string(), message: message.into() }
}

fn to_op(text: &str, l: &LayerIn) -> Result<Op, DocError> {
    let name = l.name.get_ref();
    let kind = l.kind.get_ref().as_str();
    let params = l.params.as_ref().map(|p| p.get_ref().clone());
    let need = |field: &str| layer_err(text, l.name.span(), name, format!("missing `params.{field}`"));
    let unexpected = |field: &str| layer_err(text, l.name.span(), name, format!("`{field}` does not apply to a {kind} layer"));
    match kind {
        "conv" => {
            let p = params.ok_or_else(|| need("out_channels"))?;
            if p.pool.is_some() {
                return Err(unexpected("pool"));
            }
            let (kh, kw) = p.kernel.ok_or_else(|| need("kernel"))?.dims();
            Ok(Op::Conv(ConvParams {
                out_channels: p.out_channels.ok_or_else(|| need("out_channels"))?,
                in_channels: None,
                kernel_h: kh,
                kernel_w: kw,
                pad: p.pad.unwrap_or(0),
                stride: p.stride.unwrap_or(1),
                group: p.group.unwrap_or(1),
                has_bias: p.bias.unwrap_or(true),
                activation: p.activation.unwrap_or_default(),
            }))
        }
        "pool" => {
            let p = params.ok_or_else(|| need("pool"))?;
            for (set, field) in [
                (p.out_channels.is_some(), "out_channels"),
                (p.group.is_some(), "group"),
                (p.bias.is_some(), "bias"),
                (p.activation.is_some(), "activation"),
            ] {
                if set {
                    return Err(unexpected(field));
                }
            }
            let (kh, kw) = p.kernel.ok_or_else(|| need("kernel"))?.dims();
            if kh != kw {
                return Err(layer_err(text, l.name.span(), name, "pool windows must be square"));
            }
            Ok(Op::Pool(PoolParams {
                kind: p.pool.ok_or_else(|| need("pool"))?,
                kernel: kh,
                stride: p.stride.unwrap_or(kh),
                pad: p.pad.unwrap_or(0),
            }))
        }
        "relu" | "add" | "concat" => {
            if l.params.is_some() {
                return Err(unexpected("params"));
            }
            Ok(match kind {
                "relu" => Op::Relu,
                "add" => Op::Add,
                _ => Op::Concat,
            })
        }
        other => Err(layer_err(text, l.kind.span(), name, format!("unknown layer kind `{other}`"))),
    }
}

fn locate(text: &str, doc: &GraphIn, v: &Violation) -> usize {
    let layer_line = |name: &str| {
        doc.layers.iter().find(|l| l.name.get_ref() == name).map(|l| line_of(text, l.name.span().start))
    };
    let found = match v {
        Violation::DuplicateName(n) => doc
            .layers
            .iter()
            .filter(|l| l.name.get_ref() == n)
            .map(|l| line_of(text, l.name.span().start))
            .next_back(),
        Violation::UnknownOutput(n) => doc.outputs.iter().find(|o| o.get_ref() == n).map(|o| line_of(text, o.span().start)),
        Violation::Cycle { layers } => layers.first().and_then(|l| layer_line(l)),
        Violation::DanglingInput { layer, .. }
        | Violation::Arity { layer, .. }
        | Violation::BadParams { layer, .. }
        | Violation::ShapeMismatch { layer, .. }
        | Violation::SpatialMismatch { layer, .. }
        | Violation::ChannelMismatch { layer, .. }
        | Violation::GroupMismatch { layer, .. }
        | Violation::NonPositiveOutput { layer } => layer_line(layer),
    };
    found.unwrap_or(1)
}

/// Parses a graph document. The result is structurally valid but carries
/// no inferred shapes.
pub fn parse_graph(text: &str) -> Result<Graph, DocError> {
    let doc: GraphIn = toml::from_str(text).map_err(|e| {
        let start = e.span().map_or(0, |s| s.start);
        DocError::Syntax { line: line_of(text, start), column: column_of(text, start), message: e.message().to_string() }
    })?;
    let mut g = Graph::new(doc.name.clone());
    for i in &doc.inputs {
        let [c, h, w] = i.shape;
        g.inputs.push(GraphInput { name: i.name.clone(), shape: TensorShape::new(c, h, w) });
    }
    for l in &doc.layers {
        let op = to_op(text, l)?;
        let inputs: Vec<&str> = l.inputs.iter().map(String::as_str).collect();
        g.layers.push(Layer::new(l.name.get_ref().clone(), op, &inputs));
    }
    g.outputs = doc.outputs.iter().map(|o| o.get_ref().clone()).collect();
    if let Some(v) = g.structural_violations().into_iter().next() {
        return Err(DocError::Invalid { line: locate(text, &doc, &v), violation: v.to_string() });
    }
    if let Some(i) = g.inputs.iter().find(|i| !i.shape.is_positive()) {
        return Err(DocError::Invalid { line: 1, violation: format!("input `{}` has a zero dimension", i.name) });
    }
    Ok(g)
}

/// Parses and shape-infers, locating shape errors at the offending layer.
pub fn load_graph(text: &str) -> Result<Graph, DocError> {
    let g = parse_graph(text)?;
    g.infer_shapes().map_err(|e| {
        let doc: Option<GraphIn> = toml::from_str(text).ok();
        match (e, doc) {
            (layerfuse_core::graph::GraphError::Invalid(v), Some(doc)) => {
                DocError::Invalid { line: locate(text, &doc, &v), violation: v.to_string() }
            }
            (other, _) => DocError::Invalid { line: 1, violation: other.to_string() },
        }
    })
}

fn params_of(op: &Op) -> Option<ParamsDoc> {
    match op {
        Op::Conv(c) => Some(ParamsDoc {
            out_channels: Some(c.out_channels),
            kernel: Some(if c.kernel_h == c.kernel_w {
                KernelDoc::Square(c.kernel_h)
            } else {
                KernelDoc::Rect([c.kernel_h, c.kernel_w])
            }),
            pad: Some(c.pad),
            stride: Some(c.stride),
            group: Some(c.group),
            bias: Some(c.has_bias),
            activation: Some(c.activation),
            pool: None,
        }),
        Op::Pool(p) => Some(ParamsDoc {
            pool: Some(p.kind),
            kernel: Some(KernelDoc::Square(p.kernel)),
            stride: Some(p.stride),
            pad: Some(p.pad),
            ..ParamsDoc::default()
        }),
        _ => None,
    }
}

/// Renders a graph as a document `parse_graph` accepts. Inferred shapes
/// and conv input channels are not written.
pub fn serialize_graph(g: &Graph) -> String {
    let doc = GraphOut {
        name: &g.name,
        outputs: &g.outputs,
        inputs: g
            .inputs
            .iter()
            .map(|i| InputDoc { name: i.name.clone(), shape: [i.shape.channels, i.shape.height, i.shape.width] })
            .collect(),
        layers: g
            .layers
            .iter()
            .map(|l| LayerOut { name: &l.name, kind: l.op.kind_name(), inputs: &l.inputs, params: params_of(&l.op) })
            .collect(),
    };
    toml::to_string(&doc).expect("graph documents always serialize")
}
