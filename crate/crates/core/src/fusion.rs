//! Fusion planning: fold relu into convolutions, then partition the graph
//! into two-stage fusion blocks (straight, split, merge) and singletons.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::graph::{Activation, ConvParams, Graph, Op};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// One producer, one consumer.
    Straight,
    /// One producer, two consumers.
    Split,
    /// Two producers, one consumer.
    Merge,
    Unfused,
}

impl FusionMode {
    pub fn letter(&self) -> char {
        match self {
            FusionMode::Straight => 'a',
            FusionMode::Split => 'b',
            FusionMode::Merge => 'c',
            FusionMode::Unfused => '-',
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::Straight => "straight",
            FusionMode::Split => "split",
            FusionMode::Merge => "merge",
            FusionMode::Unfused => "unfused",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The operation a fused stage performs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FusedOp {
    /// Convolution with its folded bias and activation.
    Conv(ConvParams),
    /// Bare element-wise add terminating a merge block.
    AddSink,
}

impl FusedOp {
    pub fn of(op: &Op) -> Option<FusedOp> {
        match op {
            Op::Conv(c) => Some(FusedOp::Conv(c.clone())),
            Op::Add => Some(FusedOp::AddSink),
            _ => None,
        }
    }

    pub fn folded_activation(&self) -> Activation {
        match self {
            FusedOp::Conv(c) => c.activation,
            FusedOp::AddSink => Activation::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionBlock {
    pub id: usize,
    pub mode: FusionMode,
    /// Producers followed by consumers, each group in topological order.
    pub members: Vec<String>,
    /// Stage-1 layers whose outputs live in shared memory.
    pub producers: Vec<String>,
    /// Stage-2 layers reading the staged outputs.
    pub consumers: Vec<String>,
    /// Producers whose output is also needed outside the block and must be
    /// written to global memory as well.
    pub escaping: Vec<String>,
}

impl FusionBlock {
    pub fn singleton(id: usize, layer: &str) -> Self {
        FusionBlock {
            id,
            mode: FusionMode::Unfused,
            members: alloc::vec![layer.into()],
            producers: Vec::new(),
            consumers: Vec::new(),
            escaping: Vec::new(),
        }
    }

    pub fn is_fused(&self) -> bool {
        self.mode != FusionMode::Unfused
    }

    /// Tensors the block writes to global memory.
    pub fn stored_tensors(&self) -> Vec<String> {
        if !self.is_fused() {
            return self.members.clone();
        }
        self.escaping.iter().chain(self.consumers.iter()).cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Rejection {
    #[error("layer `{0}` is not in the graph")]
    UnknownLayer(String),
    #[error("candidate is not a connected two-stage subgraph")]
    NotConnected,
    #[error("on-chip reuse depth would exceed two stages")]
    DepthExceeded,
    #[error("layer `{layer}` of kind {kind} cannot be fused in this position")]
    UnsupportedKind { layer: String, kind: &'static str },
    #[error("candidate shape matches none of the straight/split/merge modes")]
    NoMode,
    #[error("split consumers differ in output extent or stride")]
    ConsumerMismatch,
    #[error("a path leaves the block and re-enters it")]
    NotConvex,
    #[error("escaping intermediate `{0}` is not fully computed by the in-block consumers")]
    EscapeNotCovered(String),
}

/// Absorbs every `relu` whose producer is a conv that feeds only that relu
/// (and is not itself a graph output) into the conv's activation. Consumers
/// and outputs of the relu are rewired to the conv.
pub fn fold_elementwise(g: &Graph) -> Graph {
    let mut g = g.clone();
    loop {
        let target = g.layers.iter().enumerate().find_map(|(ri, r)| {
            if r.op != Op::Relu || r.inputs.len() != 1 {
                return None;
            }
            let pi = g.layer_index(&r.inputs[0])?;
            let p = &g.layers[pi];
            let foldable = matches!(&p.op, Op::Conv(c) if c.activation == Activation::None)
                && g.consumers(&p.name) == [ri]
                && !g.is_output(&p.name);
            foldable.then_some((ri, pi))
        });
        let Some((ri, pi)) = target else { break };
        let relu = g.layers[ri].name.clone();
        let conv = g.layers[pi].name.clone();
        if let Op::Conv(c) = &mut g.layers[pi].op {
            c.activation = Activation::Relu;
        }
        g.layers.remove(ri);
        for l in &mut g.layers {
            for i in &mut l.inputs {
                if *i == relu {
                    *i = conv.clone();
                }
            }
        }
        for o in &mut g.outputs {
            if *o == relu {
                *o = conv.clone();
            }
        }
    }
    g
}

/// Outcome of classifying a candidate member set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Classified {
    pub mode: FusionMode,
    pub producers: Vec<String>,
    pub consumers: Vec<String>,
    pub escaping: Vec<String>,
}

/// Classifies a candidate set of layers as one of the three fusion modes.
///
/// Stage 1 is every member without an in-block producer; every other
/// member must read only stage-1 members.
pub fn classify_mode(g: &Graph, members: &[&str]) -> Result<Classified, Rejection> {
    let set: BTreeSet<&str> = members.iter().copied().collect();
    if set.len() != members.len() || members.len() < 2 {
        return Err(Rejection::NotConnected);
    }
    let mut idx = BTreeMap::new();
    for m in members {
        let i = g.layer_index(m).ok_or_else(|| Rejection::UnknownLayer((*m).into()))?;
        idx.insert(*m, i);
    }
    let order = g.topo_order().map_err(|_| Rejection::NotConvex)?;
    let pos: BTreeMap<usize, usize> = order.iter().enumerate().map(|(p, i)| (*i, p)).collect();
    let mut sorted: Vec<&str> = members.to_vec();
    sorted.sort_by_key(|m| pos[&idx[m]]);

    let in_block = |l: &str| -> Vec<&str> {
        g.layers[idx[l]].inputs.iter().map(|s| s.as_str()).filter(|i| set.contains(i)).collect()
    };
    let stage1: Vec<&str> = sorted.iter().copied().filter(|m| in_block(m).is_empty()).collect();
    let stage2: Vec<&str> = sorted.iter().copied().filter(|m| !in_block(m).is_empty()).collect();
    for c in &stage2 {
        if in_block(c).iter().any(|p| stage2.contains(p)) {
            return Err(Rejection::DepthExceeded);
        }
    }
    if stage2.is_empty() {
        return Err(Rejection::NotConnected);
    }
    for p in &stage1 {
        let feeds = stage2.iter().any(|c| in_block(c).contains(p));
        if !feeds {
            return Err(Rejection::NotConnected);
        }
    }
    for p in &stage1 {
        if !matches!(g.layers[idx[p]].op, Op::Conv(_)) {
            return Err(Rejection::UnsupportedKind {
                layer: (*p).into(),
                kind: g.layers[idx[p]].op.kind_name(),
            });
        }
    }
    for c in &stage2 {
        let op = &g.layers[idx[c]].op;
        let ok = matches!(op, Op::Conv(_)) || (matches!(op, Op::Add) && stage1.len() == 2);
        if !ok {
            return Err(Rejection::UnsupportedKind { layer: (*c).into(), kind: op.kind_name() });
        }
    }

    let mode = match (stage1.len(), stage2.len()) {
        (1, 1) => FusionMode::Straight,
        (1, 2) => {
            let a = g.shape_of(stage2[0]);
            let b = g.shape_of(stage2[1]);
            let stride = |c: &str| g.layers[idx[c]].conv().map(|c| c.stride);
            match (a, b) {
                (Some(a), Some(b))
                    if a.height == b.height && a.width == b.width && stride(stage2[0]) == stride(stage2[1]) => {}
                _ => return Err(Rejection::ConsumerMismatch),
            }
            FusionMode::Split
        }
        (2, 1) => {
            let sink = &g.layers[idx[stage2[0]]];
            let reads_both = sink.op == Op::Add
                && stage1.iter().all(|p| sink.inputs.iter().any(|i| i == p));
            if !reads_both {
                return Err(Rejection::NoMode);
            }
            FusionMode::Merge
        }
        _ => return Err(Rejection::NoMode),
    };

    if !is_convex(g, &set) {
        return Err(Rejection::NotConvex);
    }

    let mut escaping = Vec::new();
    for p in &stage1 {
        let outside = g.is_output(p)
            || g.consumers(p).iter().any(|&c| !set.contains(g.layers[c].name.as_str()));
        if !outside {
            continue;
        }
        let covered = stage2.iter().filter(|c| in_block(c).contains(p)).any(|c| {
            match &g.layers[idx[c]].op {
                Op::Conv(cp) => covers_intermediate(g, p, cp),
                _ => true,
            }
        });
        if !covered {
            return Err(Rejection::EscapeNotCovered((*p).into()));
        }
        escaping.push(String::from(*p));
    }

    Ok(Classified {
        mode,
        producers: stage1.iter().map(|s| String::from(*s)).collect(),
        consumers: stage2.iter().map(|s| String::from(*s)).collect(),
        escaping,
    })
}

/// True when a consumer conv's receptive fields jointly cover every element
/// of its input, so the block computes the whole intermediate on-chip.
fn covers_intermediate(g: &Graph, producer: &str, consumer: &ConvParams) -> bool {
    let (Some(mid), Some(_)) = (g.shape_of(producer), consumer.in_channels) else {
        return false;
    };
    let dim_ok = |extent: usize, k: usize| {
        if consumer.stride > k {
            return false;
        }
        let out = (extent + 2 * consumer.pad - k) / consumer.stride + 1;
        (out - 1) * consumer.stride + k >= extent + consumer.pad
    };
    dim_ok(mid.height, consumer.kernel_h) && dim_ok(mid.width, consumer.kernel_w)
}

/// No path leaves the member set and comes back.
fn is_convex(g: &Graph, set: &BTreeSet<&str>) -> bool {
    let mut stack: Vec<usize> = Vec::new();
    for m in set {
        for c in g.consumers(m) {
            if !set.contains(g.layers[c].name.as_str()) {
                stack.push(c);
            }
        }
    }
    let mut seen = BTreeSet::new();
    while let Some(i) = stack.pop() {
        if !seen.insert(i) {
            continue;
        }
        for c in g.consumers(&g.layers[i].name) {
            if set.contains(g.layers[c].name.as_str()) {
                return false;
            }
            stack.push(c);
        }
    }
    true
}

/// Greedy first-fit partition in topological order. At each unassigned conv
/// the planner tries split, then merge, then straight; anything that does
/// not classify becomes a singleton. Blocks are returned in an executable
/// (topological) order with ids matching their position.
pub fn detect_fusion_blocks(g: &Graph) -> Vec<FusionBlock> {
    let Ok(order) = g.topo_order() else {
        return Vec::new();
    };
    let mut assigned: BTreeSet<usize> = BTreeSet::new();
    let mut blocks: Vec<FusionBlock> = Vec::new();
    let is_conv = |i: usize| matches!(g.layers[i].op, Op::Conv(_));

    for &li in &order {
        if assigned.contains(&li) {
            continue;
        }
        let name = g.layers[li].name.as_str();
        let mut chosen: Option<Classified> = None;
        if is_conv(li) {
            let free_convs: Vec<usize> = order
                .iter()
                .copied()
                .filter(|c| g.consumers(name).contains(c) && !assigned.contains(c) && is_conv(*c))
                .collect();
            let mut candidates: Vec<Vec<&str>> = Vec::new();
            for (i, a) in free_convs.iter().enumerate() {
                for b in &free_convs[i + 1..] {
                    candidates.push(alloc::vec![name, &g.layers[*a].name, &g.layers[*b].name]);
                }
            }
            for &ci in &order {
                let sink = &g.layers[ci];
                if assigned.contains(&ci) || sink.op != Op::Add || !sink.inputs.iter().any(|i| i == name) {
                    continue;
                }
                let Some(other) = sink.inputs.iter().find(|i| *i != name) else { continue };
                if let Some(oi) = g.layer_index(other) {
                    if !assigned.contains(&oi) && is_conv(oi) {
                        candidates.push(alloc::vec![name, other.as_str(), sink.name.as_str()]);
                    }
                }
            }
            for c in &free_convs {
                candidates.push(alloc::vec![name, &g.layers[*c].name]);
            }
            chosen = candidates.iter().find_map(|c| classify_mode(g, c).ok());
        }
        let id = blocks.len();
        match chosen {
            Some(c) => {
                let members: Vec<String> = c.producers.iter().chain(c.consumers.iter()).cloned().collect();
                for m in &members {
                    assigned.insert(g.layer_index(m).expect("member exists"));
                }
                blocks.push(FusionBlock {
                    id,
                    mode: c.mode,
                    members,
                    producers: c.producers,
                    consumers: c.consumers,
                    escaping: c.escaping,
                });
            }
            None => {
                assigned.insert(li);
                blocks.push(FusionBlock::singleton(id, name));
            }
        }
    }
    schedule_blocks(g, blocks)
}

/// Orders blocks so every block runs after the blocks producing its inputs.
fn schedule_blocks(g: &Graph, blocks: Vec<FusionBlock>) -> Vec<FusionBlock> {
    let owner: BTreeMap<&str, usize> = blocks
        .iter()
        .enumerate()
        .flat_map(|(b, blk)| blk.members.iter().map(move |m| (m.as_str(), b)))
        .collect();
    let n = blocks.len();
    let mut deps: Vec<BTreeSet<usize>> = alloc::vec![BTreeSet::new(); n];
    for (b, blk) in blocks.iter().enumerate() {
        for m in &blk.members {
            let layer = g.layer(m).expect("member exists");
            for i in &layer.inputs {
                if let Some(&ob) = owner.get(i.as_str()) {
                    if ob != b {
                        deps[b].insert(ob);
                    }
                }
            }
        }
    }
    let mut done = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let next = (0..n)
            .find(|b| !done.contains(b) && deps[*b].iter().all(|d| done.contains(d)))
            .expect("convex blocks form an acyclic schedule");
        done.insert(next);
        out.push(next);
    }
    out.into_iter()
        .enumerate()
        .map(|(id, b)| FusionBlock { id, ..blocks[b].clone() })
        .collect()
}

/// Counts of fused blocks by mode: (straight, split, merge).
pub fn mode_counts(blocks: &[FusionBlock]) -> (usize, usize, usize) {
    let count = |m| blocks.iter().filter(|b| b.mode == m).count();
    (count(FusionMode::Straight), count(FusionMode::Split), count(FusionMode::Merge))
}

/// Text report mapping each layer to its block id and mode.
pub fn assignment_report(g: &Graph, blocks: &[FusionBlock]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# block assignment for graph `{}`", g.name);
    let _ = writeln!(out, "{:<32} {:>6}  mode", "layer", "block");
    let order = g.topo_order().unwrap_or_default();
    for li in order {
        let name = &g.layers[li].name;
        if let Some(b) = blocks.iter().find(|b| b.members.contains(name)) {
            let role = if b.producers.contains(name) {
                " (producer)"
            } else if b.consumers.contains(name) {
                " (consumer)"
            } else {
                ""
            };
            let _ = writeln!(out, "{:<32} {:>6}  {}{}", name, b.id, b.mode, role);
        }
    }
    let (a, s, m) = mode_counts(blocks);
    let _ = writeln!(
        out,
        "{}",
        format!("# fused blocks: {a} straight, {s} split, {m} merge; {} total blocks", blocks.len())
    );
    out
}
