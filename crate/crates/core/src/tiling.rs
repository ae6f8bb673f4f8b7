//! Overlapped tiling of fusion blocks: halo extents, redundancy, shared
//! buffer layouts, tile enumeration and per-block resource feasibility.
//!
//! Tiles partition the block's output plane along height and width only;
//! channels are looped inside each thread. Because every tile is an
//! axis-aligned product of a row interval and a column interval, per-tile
//! regions factor per axis and most counts reduce to products of 1-D sums.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::device::{DeviceSpec, ELEM_BYTES};
use crate::fusion::{FusionBlock, FusionMode};
use crate::graph::{ConvParams, Graph, Op, TensorShape};

/// Inclusive integer interval, empty when `lo > hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub lo: i64,
    pub hi: i64,
}

impl Span {
    pub const fn new(lo: i64, hi: i64) -> Self {
        Span { lo, hi }
    }

    pub fn len(&self) -> usize {
        if self.hi < self.lo {
            0
        } else {
            (self.hi - self.lo + 1) as usize
        }
    }

    pub fn is_empty(&self) -> bool {
        self.hi < self.lo
    }

    pub fn clip(&self, extent: usize) -> Span {
        Span::new(self.lo.max(0), self.hi.min(extent as i64 - 1))
    }

    pub fn hull(&self, other: &Span) -> Span {
        if self.is_empty() {
            return *other;
        }
        if other.is_empty() {
            return *self;
        }
        Span::new(self.lo.min(other.lo), self.hi.max(other.hi))
    }

    /// Input positions read by a sliding window producing this span.
    pub fn receptive(&self, kernel: usize, stride: usize, pad: usize) -> Span {
        if self.is_empty() {
            return *self;
        }
        let (k, s, p) = (kernel as i64, stride as i64, pad as i64);
        Span::new(self.lo * s - p, self.hi * s - p + k - 1)
    }
}

/// Size of the union of a sequence of spans.
fn union_len(spans: &[Span]) -> usize {
    let mut sorted: Vec<Span> = spans.iter().copied().filter(|s| !s.is_empty()).collect();
    sorted.sort_by_key(|s| s.lo);
    let mut total = 0usize;
    let mut cur: Option<Span> = None;
    for s in sorted {
        cur = match cur {
            Some(c) if s.lo <= c.hi + 1 => Some(Span::new(c.lo, c.hi.max(s.hi))),
            Some(c) => {
                total += c.len();
                Some(s)
            }
            None => Some(s),
        };
    }
    total + cur.map_or(0, |c| c.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Axis {
    H,
    W,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileGeometry {
    pub tile_h: usize,
    pub tile_w: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// One tile's clipped output rectangle, half-open.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileRect {
    pub row: usize,
    pub col: usize,
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl TileRect {
    pub fn span(&self, axis: Axis) -> Span {
        match axis {
            Axis::H => Span::new(self.y0 as i64, self.y1 as i64 - 1),
            Axis::W => Span::new(self.x0 as i64, self.x1 as i64 - 1),
        }
    }

    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

impl TileGeometry {
    pub const fn new(tile_h: usize, tile_w: usize, grid_h: usize, grid_w: usize) -> Self {
        TileGeometry { tile_h, tile_w, grid_h, grid_w }
    }

    /// Square tile `t×t` on a `g×g` grid, the `(t, g)` notation of the tuner.
    pub const fn square(tile: usize, grid: usize) -> Self {
        Self::new(tile, tile, grid, grid)
    }

    pub const fn full(h: usize, w: usize) -> Self {
        Self::new(h, w, 1, 1)
    }

    /// Grid is exactly the number of tiles needed: no empty trailing tile.
    pub fn covers(&self, h: usize, w: usize) -> bool {
        self.tile_h >= 1
            && self.tile_w >= 1
            && self.grid_h == h.div_ceil(self.tile_h)
            && self.grid_w == w.div_ceil(self.tile_w)
    }

    pub fn tile_count(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Per-axis clipped tile spans for an output extent.
    pub fn axis_spans(&self, axis: Axis, extent: usize) -> Vec<Span> {
        let (t, g) = match axis {
            Axis::H => (self.tile_h, self.grid_h),
            Axis::W => (self.tile_w, self.grid_w),
        };
        (0..g)
            .map(|i| Span::new((i * t) as i64, ((i + 1) * t).min(extent) as i64 - 1))
            .collect()
    }

    /// Tiles in row-major order, clipped to `h × w`.
    pub fn tiles(&self, h: usize, w: usize) -> Vec<TileRect> {
        let mut out = Vec::with_capacity(self.tile_count());
        for row in 0..self.grid_h {
            for col in 0..self.grid_w {
                let y0 = row * self.tile_h;
                let x0 = col * self.tile_w;
                out.push(TileRect {
                    row,
                    col,
                    y0,
                    y1: (y0 + self.tile_h).min(h),
                    x0,
                    x1: (x0 + self.tile_w).min(w),
                });
            }
        }
        out
    }
}

/// Per-stage input region `(h, w)` needed to produce one output tile.
/// `regions[i]` is the input region of stage `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HaloExtent {
    pub regions: Vec<(usize, usize)>,
}

impl HaloExtent {
    /// Region of the first stage's input.
    pub fn input_region(&self) -> (usize, usize) {
        self.regions.first().copied().unwrap_or((0, 0))
    }
}

/// Receptive-field recursion `r_k = (r_{k+1} - 1)·stride_k + kernel_k`,
/// seeded with the tile size at the last stage.
pub fn halo_extent(tile: (usize, usize), stages: &[ConvParams]) -> HaloExtent {
    let mut regions = alloc::vec![(0, 0); stages.len()];
    let (mut h, mut w) = tile;
    for (i, s) in stages.iter().enumerate().rev() {
        h = (h - 1) * s.stride + s.kernel_h;
        w = (w - 1) * s.stride + s.kernel_w;
        regions[i] = (h, w);
    }
    HaloExtent { regions }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Redundancy {
    /// Input elements staged by more than one tile, counted per extra copy.
    pub replicated_elements: usize,
    /// Multiply-accumulates spent recomputing intermediate points owned by
    /// neighbouring tiles.
    pub redundant_macs: usize,
}

fn conv_extent(extent: usize, kernel: usize, pad: usize, stride: usize) -> usize {
    (extent + 2 * pad - kernel) / stride + 1
}

/// Replication and recomputation of a linear conv chain tiled by `geometry`
/// over its final output. `input` is the chain's input tensor.
pub fn redundancy_count(geometry: &TileGeometry, stages: &[ConvParams], input: TensorShape) -> Redundancy {
    if stages.is_empty() {
        return Redundancy::default();
    }
    // Spatial extents at each stage boundary; extents[i] is stage i's input.
    let mut extents = alloc::vec![(input.height, input.width)];
    for s in stages {
        let (h, w) = *extents.last().expect("seeded");
        extents.push((conv_extent(h, s.kernel_h, s.pad, s.stride), conv_extent(w, s.kernel_w, s.pad, s.stride)));
    }
    let (out_h, out_w) = *extents.last().expect("seeded");
    let axis_chain = |axis: Axis, out: usize| -> Vec<Vec<Span>> {
        // per stage boundary (0 = chain input), spans per tile index
        let mut per_level: Vec<Vec<Span>> = alloc::vec![Vec::new(); stages.len() + 1];
        per_level[stages.len()] = geometry.axis_spans(axis, out);
        for (i, s) in stages.iter().enumerate().rev() {
            let (k, ext) = match axis {
                Axis::H => (s.kernel_h, extents[i].0),
                Axis::W => (s.kernel_w, extents[i].1),
            };
            per_level[i] = per_level[i + 1]
                .iter()
                .map(|sp| sp.receptive(k, s.stride, s.pad).clip(ext))
                .collect();
        }
        per_level
    };
    let hs = axis_chain(Axis::H, out_h);
    let ws = axis_chain(Axis::W, out_w);
    let excess = |level: usize| -> usize {
        let total_h: usize = hs[level].iter().map(Span::len).sum();
        let total_w: usize = ws[level].iter().map(Span::len).sum();
        total_h * total_w - union_len(&hs[level]) * union_len(&ws[level])
    };
    let replicated_elements = input.channels * excess(0);
    let mut channels = input.channels;
    let mut redundant_macs = 0;
    for (i, s) in stages.iter().enumerate().take(stages.len() - 1) {
        let mut s = s.clone();
        s.in_channels = Some(channels);
        redundant_macs += s.macs_per_point() * excess(i + 1);
        channels = s.out_channels;
    }
    Redundancy { replicated_elements, redundant_macs }
}

/// Tile candidates for one axis as `(tile, grid)` pairs: nontrivial factor
/// pairs of the extent, or of the next composite number when the extent is
/// prime. Pairs that would leave an empty trailing tile are dropped.
fn axis_candidates(n: usize) -> Vec<(usize, usize)> {
    let is_prime = |v: usize| v >= 2 && (2..).take_while(|d| d * d <= v).all(|d| !v.is_multiple_of(d));
    let mut basis = n;
    if is_prime(n) {
        while is_prime(basis) {
            basis += 1;
        }
    }
    (2..basis)
        .filter(|t| basis.is_multiple_of(*t))
        .map(|t| (t, basis / t))
        .filter(|&(t, g)| n.div_ceil(t) == g)
        .collect()
}

/// Tuner search space for an output plane. Square outputs use square tiles;
/// other outputs combine each axis's candidates. Falls back to one full
/// tile when no nontrivial factorization exists.
pub fn enumerate_tilings(out_h: usize, out_w: usize) -> Vec<TileGeometry> {
    let hs = axis_candidates(out_h);
    let mut out = Vec::new();
    if out_h == out_w {
        out.extend(hs.iter().map(|&(t, g)| TileGeometry::square(t, g)));
    } else {
        let ws = axis_candidates(out_w);
        if !(hs.is_empty() && ws.is_empty()) {
            let hs = if hs.is_empty() { alloc::vec![(out_h, 1)] } else { hs };
            let ws = if ws.is_empty() { alloc::vec![(out_w, 1)] } else { ws };
            for &(th, gh) in &hs {
                for &(tw, gw) in &ws {
                    out.push(TileGeometry::new(th, tw, gh, gw));
                }
            }
        }
    }
    if out.is_empty() {
        out.push(TileGeometry::full(out_h, out_w));
    }
    out
}

/// Stage-1 convolution of a fusion block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProducerStage {
    pub name: String,
    pub conv: ConvParams,
    pub input: String,
    pub input_shape: TensorShape,
    pub output_shape: TensorShape,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ConsumerOp {
    Conv(ConvParams),
    Add,
}

impl ConsumerOp {
    /// `(kernel_h, kernel_w, stride, pad)` of the window over staged data.
    pub fn window(&self) -> (usize, usize, usize, usize) {
        match self {
            ConsumerOp::Conv(c) => (c.kernel_h, c.kernel_w, c.stride, c.pad),
            ConsumerOp::Add => (1, 1, 1, 0),
        }
    }

    pub fn conv(&self) -> Option<&ConvParams> {
        match self {
            ConsumerOp::Conv(c) => Some(c),
            ConsumerOp::Add => None,
        }
    }
}

/// Stage-2 operation reading one or two staged producer outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsumerStage {
    pub name: String,
    pub op: ConsumerOp,
    /// Indices into the block's producer list.
    pub reads: Vec<usize>,
    pub output_shape: TensorShape,
}

/// A fusion block resolved against its graph: concrete stage parameters
/// and shapes, with the per-tile region arithmetic shared by the planner,
/// cost model, simulator and code generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockStages {
    pub producers: Vec<ProducerStage>,
    pub consumers: Vec<ConsumerStage>,
    pub out_h: usize,
    pub out_w: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("block {0} is not a fused block")]
    NotFused(usize),
    #[error("block layer `{0}` is missing from the graph or has no inferred shape")]
    MissingLayer(String),
    #[error("block structure does not match the graph: {0}")]
    Mismatch(String),
    #[error("geometry {geometry:?} does not tile a {out_h}x{out_w} output")]
    BadGeometry { geometry: TileGeometry, out_h: usize, out_w: usize },
    #[error("infeasible: {needed} shared bytes per block exceed the {limit}-byte limit")]
    SharedOverflow { needed: usize, limit: usize },
    #[error("internal inconsistency: thread block {x}x{y} exceeds the device thread limit")]
    ThreadLimits { x: usize, y: usize },
}

impl BlockStages {
    pub fn resolve(g: &Graph, block: &FusionBlock) -> Result<Self, PlanError> {
        if !block.is_fused() {
            return Err(PlanError::NotFused(block.id));
        }
        let mut producers = Vec::new();
        for name in &block.producers {
            let l = g.layer(name).ok_or_else(|| PlanError::MissingLayer(name.clone()))?;
            let Op::Conv(conv) = &l.op else {
                return Err(PlanError::Mismatch(alloc::format!("producer `{name}` is not a conv")));
            };
            let input = l.inputs[0].clone();
            let input_shape = g.shape_of(&input).ok_or_else(|| PlanError::MissingLayer(input.clone()))?;
            let output_shape = l.shape.ok_or_else(|| PlanError::MissingLayer(name.clone()))?;
            producers.push(ProducerStage { name: name.clone(), conv: conv.clone(), input, input_shape, output_shape });
        }
        let mut consumers = Vec::new();
        for name in &block.consumers {
            let l = g.layer(name).ok_or_else(|| PlanError::MissingLayer(name.clone()))?;
            let op = match &l.op {
                Op::Conv(c) => ConsumerOp::Conv(c.clone()),
                Op::Add => ConsumerOp::Add,
                other => {
                    return Err(PlanError::Mismatch(alloc::format!(
                        "consumer `{name}` has unsupported kind {}",
                        other.kind_name()
                    )))
                }
            };
            let mut reads = Vec::new();
            for i in &l.inputs {
                let p = producers
                    .iter()
                    .position(|p| &p.name == i)
                    .ok_or_else(|| PlanError::Mismatch(alloc::format!("consumer `{name}` reads `{i}` from outside the block")))?;
                reads.push(p);
            }
            let output_shape = l.shape.ok_or_else(|| PlanError::MissingLayer(name.clone()))?;
            consumers.push(ConsumerStage { name: name.clone(), op, reads, output_shape });
        }
        let first = consumers.first().ok_or_else(|| PlanError::Mismatch("block has no consumer".into()))?;
        let (out_h, out_w) = (first.output_shape.height, first.output_shape.width);
        if consumers.iter().any(|c| c.output_shape.height != out_h || c.output_shape.width != out_w) {
            return Err(PlanError::Mismatch("consumers disagree on output extent".into()));
        }
        Ok(BlockStages { producers, consumers, out_h, out_w })
    }

    /// Distinct block input tensors with their shapes, in producer order.
    pub fn inputs(&self) -> Vec<(String, TensorShape)> {
        let mut seen = BTreeSet::new();
        self.producers
            .iter()
            .filter(|p| seen.insert(p.input.clone()))
            .map(|p| (p.input.clone(), p.input_shape))
            .collect()
    }

    fn extent(shape: &TensorShape, axis: Axis) -> usize {
        match axis {
            Axis::H => shape.height,
            Axis::W => shape.width,
        }
    }

    /// Unclipped span of producer `p`'s output that the consumers of the
    /// tile span `out` read (includes zero-padding positions).
    pub fn producer_span(&self, p: usize, axis: Axis, out: Span) -> Span {
        let mut acc = Span::new(0, -1);
        for c in self.consumers.iter().filter(|c| c.reads.contains(&p)) {
            let (kh, kw, s, pad) = c.op.window();
            let k = if axis == Axis::H { kh } else { kw };
            acc = acc.hull(&out.receptive(k, s, pad));
        }
        acc
    }

    /// Producer output positions actually computed for a tile span.
    pub fn computed_span(&self, p: usize, axis: Axis, out: Span) -> Span {
        self.producer_span(p, axis, out)
            .clip(Self::extent(&self.producers[p].output_shape, axis))
    }

    /// Unclipped input span read by producer `p` for a tile span.
    pub fn producer_input_span(&self, p: usize, axis: Axis, out: Span) -> Span {
        let c = &self.producers[p].conv;
        let k = if axis == Axis::H { c.kernel_h } else { c.kernel_w };
        self.computed_span(p, axis, out).receptive(k, c.stride, c.pad)
    }

    /// Unclipped span of block input `input` staged for a tile span: the
    /// hull over producers reading it.
    pub fn staged_span(&self, input: &str, axis: Axis, out: Span) -> Span {
        (0..self.producers.len())
            .filter(|&p| self.producers[p].input == input)
            .fold(Span::new(0, -1), |acc, p| acc.hull(&self.producer_input_span(p, axis, out)))
    }

    /// In-image elements of `input` loaded from global memory for one tile.
    pub fn staged_elements(&self, input: &str, shape: &TensorShape, tile: &TileRect) -> usize {
        let h = self.staged_span(input, Axis::H, tile.span(Axis::H)).clip(shape.height).len();
        let w = self.staged_span(input, Axis::W, tile.span(Axis::W)).clip(shape.width).len();
        shape.channels * h * w
    }

    fn axis_spans<F: Fn(Span) -> Span>(&self, geometry: &TileGeometry, axis: Axis, f: F) -> Vec<Span> {
        let extent = if axis == Axis::H { self.out_h } else { self.out_w };
        geometry.axis_spans(axis, extent).into_iter().map(f).collect()
    }

    /// `(total staged, unique)` in-image elements of one block input over all tiles.
    pub fn input_load_elements(&self, geometry: &TileGeometry, input: &str, shape: &TensorShape) -> (usize, usize) {
        let hs = self.axis_spans(geometry, Axis::H, |s| self.staged_span(input, Axis::H, s).clip(shape.height));
        let ws = self.axis_spans(geometry, Axis::W, |s| self.staged_span(input, Axis::W, s).clip(shape.width));
        let total = hs.iter().map(Span::len).sum::<usize>() * ws.iter().map(Span::len).sum::<usize>();
        (shape.channels * total, shape.channels * union_len(&hs) * union_len(&ws))
    }

    /// `(total computed, unique)` output points of producer `p` over all tiles.
    pub fn producer_points(&self, geometry: &TileGeometry, p: usize) -> (usize, usize) {
        let hs = self.axis_spans(geometry, Axis::H, |s| self.computed_span(p, Axis::H, s));
        let ws = self.axis_spans(geometry, Axis::W, |s| self.computed_span(p, Axis::W, s));
        let total = hs.iter().map(Span::len).sum::<usize>() * ws.iter().map(Span::len).sum::<usize>();
        (total, union_len(&hs) * union_len(&ws))
    }

    pub fn redundancy(&self, geometry: &TileGeometry) -> Redundancy {
        let mut r = Redundancy::default();
        for (name, shape) in self.inputs() {
            let (total, unique) = self.input_load_elements(geometry, &name, &shape);
            r.replicated_elements += total - unique;
        }
        for (p, stage) in self.producers.iter().enumerate() {
            let (total, unique) = self.producer_points(geometry, p);
            r.redundant_macs += (total - unique) * stage.conv.macs_per_point();
        }
        r
    }

    /// Largest unclipped staged region of producer `p` over all tiles.
    pub fn max_region(&self, geometry: &TileGeometry, p: usize) -> (usize, usize) {
        let h = self.axis_spans(geometry, Axis::H, |s| self.producer_span(p, Axis::H, s));
        let w = self.axis_spans(geometry, Axis::W, |s| self.producer_span(p, Axis::W, s));
        (
            h.iter().map(Span::len).max().unwrap_or(0),
            w.iter().map(Span::len).max().unwrap_or(0),
        )
    }

    /// Zero rim around producer `p`'s staged data: the largest padding of
    /// any consumer reading it.
    pub fn border(&self, p: usize) -> usize {
        self.consumers
            .iter()
            .filter(|c| c.reads.contains(&p))
            .map(|c| c.op.window().3)
            .max()
            .unwrap_or(0)
    }

    /// Filter + bias bytes of every conv in the block.
    pub fn weight_bytes(&self) -> usize {
        let convs = self
            .producers
            .iter()
            .map(|p| &p.conv)
            .chain(self.consumers.iter().filter_map(|c| c.op.conv()));
        convs.map(|c| (c.filter_len() + c.bias_len()) * ELEM_BYTES).sum()
    }

    /// Multiply-accumulates of the unfused layers.
    pub fn useful_macs(&self) -> usize {
        let p: usize = self.producers.iter().map(|p| p.conv.macs_per_point() * p.output_shape.plane()).sum();
        let c: usize = self
            .consumers
            .iter()
            .filter_map(|c| c.op.conv().map(|conv| conv.macs_per_point() * c.output_shape.plane()))
            .sum();
        p + c
    }
}

/// Shared-memory staging buffer holding one producer's output region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedLayout {
    /// Producer layer whose output this buffer stages.
    pub buffer: String,
    pub channels: usize,
    /// Logical extent without the zero border.
    pub height: usize,
    pub width: usize,
    /// Zero-filled rim consumed by the next stage's padding.
    pub border: usize,
    pub pad_rows: usize,
    pub pad_cols: usize,
}

impl SharedLayout {
    /// Staged rows including the border.
    pub fn region_h(&self) -> usize {
        self.height + 2 * self.border
    }

    pub fn region_w(&self) -> usize {
        self.width + 2 * self.border
    }

    /// Physical row pitch in elements.
    pub fn pitch(&self) -> usize {
        self.region_w() + self.pad_cols
    }

    pub fn rows(&self) -> usize {
        self.region_h() + self.pad_rows
    }

    pub fn channel_stride(&self) -> usize {
        self.rows() * self.pitch()
    }

    pub fn physical_elements(&self) -> usize {
        self.channels * self.channel_stride()
    }

    pub fn bytes(&self) -> usize {
        self.physical_elements() * ELEM_BYTES
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreadBlock {
    pub x: usize,
    pub y: usize,
    /// Per-thread loop trip counts when the tile exceeds the block shape.
    pub loops_x: usize,
    pub loops_y: usize,
}

impl ThreadBlock {
    pub fn threads(&self) -> usize {
        self.x * self.y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightPlacement {
    ConstantMemory,
    ReadonlyCachedGlobal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageWeights {
    pub layer: String,
    pub placement: WeightPlacement,
    pub bytes: usize,
}

/// Input region of one stage for a full (unclipped) tile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRegion {
    pub layer: String,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PlanOptions {
    /// Pad a row as well as a column of every staging buffer.
    pub pad_rows: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilingPlan {
    pub block_id: usize,
    pub graph: String,
    pub mode: FusionMode,
    pub device: String,
    pub geometry: TileGeometry,
    pub stages: BlockStages,
    /// Tensors written to global memory: escaping intermediates, then consumer outputs.
    pub stored: Vec<String>,
    pub halo: Vec<StageRegion>,
    pub shared: Vec<SharedLayout>,
    pub shared_bytes: usize,
    pub threads: ThreadBlock,
    pub redundancy: Redundancy,
    pub weights: Vec<StageWeights>,
}

impl TilingPlan {
    pub fn kernel_name(&self) -> String {
        alloc::format!(
            "fused_{}_{}_{}x{}",
            self.block_id,
            self.mode.as_str(),
            self.geometry.tile_h,
            self.geometry.tile_w
        )
    }

    pub fn weights_in_constant(&self) -> bool {
        self.weights.iter().all(|w| w.placement == WeightPlacement::ConstantMemory)
    }
}

/// Builds the tiling plan of a fused block for one geometry.
pub fn plan_tiling(
    g: &Graph,
    block: &FusionBlock,
    geometry: TileGeometry,
    device: &DeviceSpec,
    options: PlanOptions,
) -> Result<TilingPlan, PlanError> {
    let stages = BlockStages::resolve(g, block)?;
    if !geometry.covers(stages.out_h, stages.out_w) {
        return Err(PlanError::BadGeometry { geometry, out_h: stages.out_h, out_w: stages.out_w });
    }

    let mut shared = Vec::new();
    for (p, stage) in stages.producers.iter().enumerate() {
        let (rh, rw) = stages.max_region(&geometry, p);
        let border = stages.border(p).min((rh.min(rw).max(1) - 1) / 2);
        shared.push(SharedLayout {
            buffer: stage.name.clone(),
            channels: stage.output_shape.channels,
            height: rh - 2 * border,
            width: rw - 2 * border,
            border,
            pad_rows: usize::from(options.pad_rows),
            pad_cols: 1,
        });
    }
    let shared_bytes: usize = shared.iter().map(SharedLayout::bytes).sum();
    if shared_bytes > device.shared_per_block_max {
        return Err(PlanError::SharedOverflow { needed: shared_bytes, limit: device.shared_per_block_max });
    }

    let mut halo = Vec::new();
    for (p, stage) in stages.producers.iter().enumerate() {
        let c = &stage.conv;
        let full = |axis, t: usize, k| {
            stages.producer_span(p, axis, Span::new(0, t as i64 - 1)).receptive(k, c.stride, c.pad).len()
        };
        halo.push(StageRegion {
            layer: stage.name.clone(),
            height: full(Axis::H, geometry.tile_h, c.kernel_h),
            width: full(Axis::W, geometry.tile_w, c.kernel_w),
        });
    }
    for c in &stages.consumers {
        let (kh, kw, s, _) = c.op.window();
        halo.push(StageRegion {
            layer: c.name.clone(),
            height: (geometry.tile_h - 1) * s + kh,
            width: (geometry.tile_w - 1) * s + kw,
        });
    }

    let limit = device.max_threads_per_block;
    let x = geometry.tile_w.min(limit);
    let y = geometry.tile_h.min((limit / x).max(1));
    if x * y > limit {
        return Err(PlanError::ThreadLimits { x, y });
    }
    let threads = ThreadBlock {
        x,
        y,
        loops_x: geometry.tile_w.div_ceil(x),
        loops_y: geometry.tile_h.div_ceil(y),
    };

    let constant = stages.weight_bytes() <= device.constant_capacity;
    let placement = if constant {
        WeightPlacement::ConstantMemory
    } else {
        WeightPlacement::ReadonlyCachedGlobal
    };
    let mut weights: Vec<StageWeights> = stages
        .producers
        .iter()
        .map(|p| StageWeights {
            layer: p.name.clone(),
            placement,
            bytes: (p.conv.filter_len() + p.conv.bias_len()) * ELEM_BYTES,
        })
        .collect();
    weights.extend(stages.consumers.iter().filter_map(|c| {
        c.op.conv().map(|conv| StageWeights {
            layer: c.name.clone(),
            placement,
            bytes: (conv.filter_len() + conv.bias_len()) * ELEM_BYTES,
        })
    }));

    Ok(TilingPlan {
        block_id: block.id,
        graph: g.name.clone(),
        mode: block.mode,
        device: device.name.clone(),
        geometry,
        redundancy: stages.redundancy(&geometry),
        stored: block.stored_tensors(),
        stages,
        halo,
        shared,
        shared_bytes,
        threads,
        weights,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancyReport {
    pub blocks_per_sm: usize,
    /// Plan shared bytes over per-SM capacity.
    pub shared_fraction: f64,
    /// More than a third of the SM's shared memory per block.
    pub exceeds_third: bool,
    /// Only one resident block per SM: latency cannot be hidden.
    pub latency_risk: bool,
}

pub fn check_resources(plan: &TilingPlan, device: &DeviceSpec) -> OccupancyReport {
    occupancy(plan.shared_bytes, device)
}

pub fn occupancy(shared_bytes: usize, device: &DeviceSpec) -> OccupancyReport {
    let by_shared = if shared_bytes == 0 {
        device.max_blocks_per_sm
    } else {
        device.shared_per_sm / shared_bytes
    };
    let blocks_per_sm = by_shared.min(device.max_blocks_per_sm);
    OccupancyReport {
        blocks_per_sm,
        shared_fraction: shared_bytes as f64 / device.shared_per_sm as f64,
        exceeds_third: shared_bytes * 3 > device.shared_per_sm,
        latency_risk: blocks_per_sm == 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::detect_fusion_blocks;
    use crate::graph::Layer;
    use alloc::vec;

    fn k(kernel: usize, stride: usize, pad: usize) -> ConvParams {
        ConvParams::new(1, kernel, pad, stride)
    }

    #[test]
    fn halo_examples() {
        assert_eq!(halo_extent((3, 3), &[k(3, 1, 0)]).input_region(), (5, 5));
        let h = halo_extent((4, 4), &[k(1, 1, 0), k(5, 1, 2)]);
        assert_eq!(h.regions, vec![(8, 8), (8, 8)]);
        assert_eq!(halo_extent((1, 1), &[k(3, 1, 0), k(3, 1, 0)]).input_region(), (5, 5));
    }

    #[test]
    fn fig7_replication() {
        // 2x2 grid of 3x3 input tiles overlapping by one on a 5x5 input.
        let r = redundancy_count(&TileGeometry::square(1, 2), &[k(3, 2, 0)], TensorShape::new(1, 5, 5));
        assert_eq!(r.replicated_elements, 11);
        assert_eq!(r.redundant_macs, 0);
    }

    #[test]
    fn single_tile_and_pointwise_have_no_redundancy() {
        let chain = [k(3, 1, 1), k(3, 1, 1)];
        let r = redundancy_count(&TileGeometry::full(8, 8), &chain, TensorShape::new(1, 8, 8));
        assert_eq!(r, Redundancy::default());
        let chain = [k(1, 1, 0), k(1, 1, 0)];
        let r = redundancy_count(&TileGeometry::square(2, 4), &chain, TensorShape::new(3, 8, 8));
        assert_eq!(r, Redundancy::default());
    }

    #[test]
    fn search_space_examples() {
        let mut got = enumerate_tilings(12, 12);
        got.sort();
        let mut want = vec![
            TileGeometry::square(4, 3),
            TileGeometry::square(2, 6),
            TileGeometry::square(3, 4),
            TileGeometry::square(6, 2),
        ];
        want.sort();
        assert_eq!(got, want);
        assert_eq!(enumerate_tilings(2, 2), vec![TileGeometry::full(2, 2)]);
        assert_eq!(enumerate_tilings(1, 1), vec![TileGeometry::full(1, 1)]);
        assert_eq!(
            enumerate_tilings(13, 13),
            vec![TileGeometry::square(2, 7), TileGeometry::square(7, 2)]
        );
        assert_eq!(enumerate_tilings(12, 8).len(), 8);
        assert_eq!(enumerate_tilings(5, 2), vec![TileGeometry::new(2, 2, 3, 1), TileGeometry::new(3, 2, 2, 1)]);
    }

    fn a1() -> Graph {
        Graph::new("a.1")
            .with_input("data", TensorShape::new(192, 28, 28))
            .with_layer(Layer::new("conv1", Op::Conv(ConvParams::new(16, 1, 0, 1)), &["data"]))
            .with_layer(Layer::new("conv2", Op::Conv(ConvParams::new(32, 5, 2, 1)), &["conv1"]))
            .with_output("conv2")
            .infer_shapes()
            .unwrap()
    }

    #[test]
    fn a1_plan_has_border_two_and_constant_weights() {
        let g = a1();
        let blocks = detect_fusion_blocks(&g);
        let plan = plan_tiling(&g, &blocks[0], TileGeometry::square(7, 4), &DeviceSpec::titan_xp(), PlanOptions::default()).unwrap();
        assert_eq!(plan.shared.len(), 1);
        let s = &plan.shared[0];
        assert_eq!((s.channels, s.height, s.width, s.border), (16, 7, 7, 2));
        assert_eq!(s.physical_elements(), 16 * 11 * 12);
        assert_eq!(plan.shared_bytes, 16 * 11 * 12 * 4);
        assert!(plan.weights_in_constant());
        assert_eq!(plan.weights.iter().map(|w| w.bytes).sum::<usize>(), 63_680);
        assert_eq!(plan.threads, ThreadBlock { x: 7, y: 7, loops_x: 1, loops_y: 1 });
        assert_eq!(plan.halo[0], StageRegion { layer: "conv1".into(), height: 11, width: 11 });
        assert_eq!(plan.kernel_name(), "fused_0_straight_7x7");
        assert!(plan.redundancy.redundant_macs > 0);
    }

    #[test]
    fn overflow_is_infeasible() {
        let g = a1();
        let blocks = detect_fusion_blocks(&g);
        let mut dev = DeviceSpec::titan_xp();
        dev.shared_per_block_max = 1024;
        let err = plan_tiling(&g, &blocks[0], TileGeometry::square(7, 4), &dev, PlanOptions::default()).unwrap_err();
        assert!(matches!(err, PlanError::SharedOverflow { limit: 1024, .. }));
        let err = plan_tiling(&g, &blocks[0], TileGeometry::square(5, 5), &dev, PlanOptions::default()).unwrap_err();
        assert!(matches!(err, PlanError::BadGeometry { .. }));
    }

    #[test]
    fn big_tiles_loop_inside_threads() {
        let g = Graph::new("big")
            .with_input("x", TensorShape::new(1, 64, 64))
            .with_layer(Layer::new("a", Op::Conv(ConvParams::new(1, 1, 0, 1)), &["x"]))
            .with_layer(Layer::new("b", Op::Conv(ConvParams::new(1, 1, 0, 1)), &["a"]))
            .infer_shapes()
            .unwrap();
        let blocks = detect_fusion_blocks(&g);
        let plan = plan_tiling(&g, &blocks[0], TileGeometry::full(64, 64), &DeviceSpec::titan_xp(), PlanOptions { pad_rows: true }).unwrap();
        assert_eq!(plan.threads, ThreadBlock { x: 64, y: 16, loops_x: 1, loops_y: 4 });
        assert_eq!(plan.shared[0].pad_rows, 1);
    }

    #[test]
    fn occupancy_examples() {
        let dev = DeviceSpec::titan_xp();
        let quarter = occupancy(dev.shared_per_sm / 4, &dev);
        assert_eq!(quarter.blocks_per_sm, 4);
        assert!(!quarter.exceeds_third && !quarter.latency_risk);
        let forty = occupancy(dev.shared_per_sm * 2 / 5, &dev);
        assert_eq!(forty.blocks_per_sm, 2);
        assert!(forty.exceeds_third && !forty.latency_risk);
        let sixty = occupancy(dev.shared_per_sm * 3 / 5, &dev);
        assert_eq!(sixty.blocks_per_sm, 1);
        assert!(sixty.latency_risk);
        assert_eq!(occupancy(16, &dev).blocks_per_sm, dev.max_blocks_per_sm);
    }

    #[test]
    fn span_helpers() {
        assert_eq!(union_len(&[Span::new(0, 2), Span::new(2, 4), Span::new(7, 7)]), 6);
        assert_eq!(Span::new(0, 1).receptive(3, 2, 1), Span::new(-1, 3));
        assert!(Span::new(3, 1).is_empty());
    }
}
