//! Tile-by-tile interpreter of a fused block plan.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::{SimError, Tensor, WeightSet};
use crate::cost::{warp_conflict_degree, CounterReport};
use crate::device::{transactions, DeviceSpec};
use crate::graph::{Graph, Op};
use crate::sim::reference::epilogue;
use crate::tiling::{Axis, BlockStages, ConsumerOp, ConsumerStage, SharedLayout, Span, TilingPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TileOrder {
    #[default]
    Forward,
    Reverse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedRun {
    /// Every tensor the block writes to global memory.
    pub outputs: BTreeMap<String, Tensor>,
    pub counters: CounterReport,
    /// Barriers executed over all tiles.
    pub barriers: usize,
}

/// Halo'd block input staged for one tile; out-of-image cells hold zero.
struct Staged {
    h: Span,
    w: Span,
    channels: usize,
    data: Vec<f32>,
}

impl Staged {
    #[inline]
    fn at(&self, c: usize, y: i64, x: i64) -> Result<f32, SimError> {
        let (ry, rx) = (y - self.h.lo, x - self.w.lo);
        if ry < 0 || rx < 0 || ry as usize >= self.h.len() || rx as usize >= self.w.len() || c >= self.channels {
            return Err(SimError::StagedOutOfBounds { channel: c, row: ry, col: rx });
        }
        Ok(self.data[(c * self.h.len() + ry as usize) * self.w.len() + rx as usize])
    }
}

/// One producer's shared buffer for one tile, indexed in producer output
/// coordinates relative to the tile's staged origin.
struct SharedBuf<'a> {
    layout: &'a SharedLayout,
    origin_y: i64,
    origin_x: i64,
    data: Vec<f32>,
}

impl SharedBuf<'_> {
    fn addr(&self, c: usize, y: i64, x: i64) -> Result<usize, SimError> {
        let ry = y - self.origin_y;
        let rx = x - self.origin_x;
        let l = self.layout;
        if ry < 0 || rx < 0 || ry as usize >= l.region_h() || rx as usize >= l.region_w() || c >= l.channels {
            return Err(SimError::SharedOutOfBounds { buffer: l.buffer.clone(), channel: c, row: ry, col: rx });
        }
        Ok(c * l.channel_stride() + ry as usize * l.pitch() + rx as usize)
    }
}

/// Position `i` along an axis belongs to the first tile whose computed
/// span contains it; that tile stores it when the tensor escapes.
fn owners(spans: &[Span], extent: usize) -> Vec<Option<usize>> {
    let mut own = vec![None; extent];
    for (t, s) in spans.iter().enumerate() {
        for i in s.clip(extent).lo..=s.clip(extent).hi {
            let slot = &mut own[i as usize];
            if slot.is_none() {
                *slot = Some(t);
            }
        }
    }
    own
}

fn check_plan(plan: &TilingPlan, g: &Graph) -> Result<(), SimError> {
    let mismatch = |m: String| Err(SimError::PlanMismatch(m));
    if plan.graph != g.name {
        return mismatch(alloc::format!("plan is for graph `{}`, not `{}`", plan.graph, g.name));
    }
    let st = &plan.stages;
    for p in &st.producers {
        let Some(l) = g.layer(&p.name) else {
            return mismatch(alloc::format!("producer `{}` is not in the graph", p.name));
        };
        if l.op != Op::Conv(p.conv.clone()) || l.shape != Some(p.output_shape) || l.inputs != [p.input.clone()] {
            return mismatch(alloc::format!("producer `{}` differs from the graph", p.name));
        }
        if g.shape_of(&p.input) != Some(p.input_shape) {
            return mismatch(alloc::format!("input `{}` of `{}` differs from the graph", p.input, p.name));
        }
    }
    for c in &st.consumers {
        let Some(l) = g.layer(&c.name) else {
            return mismatch(alloc::format!("consumer `{}` is not in the graph", c.name));
        };
        let op_ok = match (&c.op, &l.op) {
            (ConsumerOp::Conv(a), Op::Conv(b)) => a == b,
            (ConsumerOp::Add, Op::Add) => true,
            _ => false,
        };
        let reads: Vec<&String> = c.reads.iter().filter_map(|&r| st.producers.get(r).map(|p| &p.name)).collect();
        let reads_ok = reads.len() == l.inputs.len() && reads.iter().zip(&l.inputs).all(|(a, b)| *a == b);
        if !op_ok || !reads_ok || l.shape != Some(c.output_shape) {
            return mismatch(alloc::format!("consumer `{}` differs from the graph", c.name));
        }
    }
    if plan.shared.len() != st.producers.len() {
        return mismatch("one shared layout per producer expected".into());
    }
    if !plan.geometry.covers(st.out_h, st.out_w) {
        return mismatch(alloc::format!("geometry {:?} does not tile the block output", plan.geometry));
    }
    Ok(())
}

/// Executes `plan` tile by tile. `inputs` must hold the block's input
/// tensors; returns every stored tensor plus the counted memory activity.
pub fn run_fused(
    plan: &TilingPlan,
    g: &Graph,
    inputs: &BTreeMap<String, Tensor>,
    w: &WeightSet,
    device: &DeviceSpec,
    order: TileOrder,
) -> Result<FusedRun, SimError> {
    check_plan(plan, g)?;
    let st: &BlockStages = &plan.stages;
    let geo = &plan.geometry;
    let tb = device.transaction_bytes;

    let block_inputs = st.inputs();
    for (name, shape) in &block_inputs {
        let t = inputs.get(name).ok_or_else(|| SimError::MissingTensor(name.clone()))?;
        if t.shape != *shape {
            return Err(SimError::ShapeMismatch(t.shape, *shape));
        }
    }
    for name in st.producers.iter().map(|p| &p.name).chain(st.consumers.iter().filter(|c| c.op.conv().is_some()).map(|c| &c.name)) {
        let l = g.layer(name).and_then(|l| l.conv()).ok_or_else(|| SimError::MissingWeights(name.clone()))?;
        let ok = w.get(name).is_some_and(|wt| wt.filter.len() == l.filter_len() && wt.bias.len() == l.bias_len());
        if !ok {
            return Err(SimError::MissingWeights(name.clone()));
        }
    }

    let mut tiles = geo.tiles(st.out_h, st.out_w);
    if order == TileOrder::Reverse {
        tiles.reverse();
    }
    let hs = geo.axis_spans(Axis::H, st.out_h);
    let ws = geo.axis_spans(Axis::W, st.out_w);

    let stored: Vec<String> = plan.stored.clone();
    let mut outputs: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut written: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    for name in &stored {
        let shape = st
            .producers
            .iter()
            .find(|p| &p.name == name)
            .map(|p| p.output_shape)
            .or_else(|| st.consumers.iter().find(|c| &c.name == name).map(|c| c.output_shape))
            .ok_or_else(|| SimError::PlanMismatch(alloc::format!("stored tensor `{name}` is not a block member")))?;
        outputs.insert(name.clone(), Tensor::zeros(shape));
        written.insert(name.clone(), vec![false; shape.elements()]);
    }
    let escape_owners: Vec<(Vec<Option<usize>>, Vec<Option<usize>>)> = (0..st.producers.len())
        .map(|p| {
            let shape = st.producers[p].output_shape;
            let ch: Vec<Span> = hs.iter().map(|s| st.computed_span(p, Axis::H, *s)).collect();
            let cw: Vec<Span> = ws.iter().map(|s| st.computed_span(p, Axis::W, *s)).collect();
            (owners(&ch, shape.height), owners(&cw, shape.width))
        })
        .collect();

    let mut loaded: BTreeMap<&str, (usize, Vec<bool>)> =
        block_inputs.iter().map(|(n, s)| (n.as_str(), (0usize, vec![false; s.elements()]))).collect();
    let mut computed: Vec<Vec<bool>> = st.producers.iter().map(|p| vec![false; p.output_shape.plane()]).collect();
    let mut c = CounterReport::default();
    let mut store_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut barriers = 0usize;
    let mut conflict = 1usize;
    let threads = plan.threads;
    let nthreads = threads.threads().max(1);

    for (ti, tile) in tiles.iter().enumerate() {
        // Global -> staged input, with zero cells outside the image.
        let mut staged: BTreeMap<&str, Staged> = BTreeMap::new();
        for (name, shape) in &block_inputs {
            let src = &inputs[name];
            let h = st.staged_span(name, Axis::H, tile.span(Axis::H));
            let wsp = st.staged_span(name, Axis::W, tile.span(Axis::W));
            let mut data = vec![0.0f32; shape.channels * h.len() * wsp.len()];
            let entry = loaded.get_mut(name.as_str()).expect("every block input is tracked");
            for ch in 0..shape.channels {
                for y in h.lo..=h.hi {
                    if y < 0 || y >= shape.height as i64 {
                        continue;
                    }
                    for x in wsp.lo..=wsp.hi {
                        if x < 0 || x >= shape.width as i64 {
                            continue;
                        }
                        let gi = src.index(ch, y as usize, x as usize);
                        data[(ch * h.len() + (y - h.lo) as usize) * wsp.len() + (x - wsp.lo) as usize] = src.data[gi];
                        entry.0 += 1;
                        entry.1[gi] = true;
                    }
                }
            }
            staged.insert(name.as_str(), Staged { h, w: wsp, channels: shape.channels, data });
        }

        // Stage 1: producers into shared buffers. Unwritten cells are NaN so
        // any read outside the computed/zeroed region poisons the result.
        let mut bufs: Vec<SharedBuf> = Vec::with_capacity(st.producers.len());
        for (p, stage) in st.producers.iter().enumerate() {
            let layout = &plan.shared[p];
            let ph = st.producer_span(p, Axis::H, tile.span(Axis::H));
            let pw = st.producer_span(p, Axis::W, tile.span(Axis::W));
            let mut buf = SharedBuf {
                layout,
                origin_y: ph.lo,
                origin_x: pw.lo,
                data: vec![f32::NAN; layout.physical_elements()],
            };
            let conv = &stage.conv;
            let wt = w.get(&stage.name).expect("checked above");
            let src = &staged[stage.input.as_str()];
            let out = stage.output_shape;
            let ipg = conv.in_per_group();
            let opg = conv.out_per_group();
            if ti == 0 {
                let words: Vec<usize> = (0..device.warp_size.min(ph.len() * pw.len()))
                    .map(|i| {
                        let y = ph.lo + (i / pw.len()) as i64;
                        let x = pw.lo + (i % pw.len()) as i64;
                        buf.addr(0, y, x)
                    })
                    .collect::<Result<_, _>>()?;
                conflict = conflict.max(warp_conflict_degree(&words, device.banks));
            }
            for oc in 0..out.channels {
                let grp = oc / opg;
                for y in ph.lo..=ph.hi {
                    for x in pw.lo..=pw.hi {
                        let inside = y >= 0 && x >= 0 && (y as usize) < out.height && (x as usize) < out.width;
                        let v = if inside {
                            let mut acc = 0.0f32;
                            for icg in 0..ipg {
                                let ic = grp * ipg + icg;
                                for ky in 0..conv.kernel_h {
                                    let iy = y * conv.stride as i64 + ky as i64 - conv.pad as i64;
                                    for kx in 0..conv.kernel_w {
                                        let ix = x * conv.stride as i64 + kx as i64 - conv.pad as i64;
                                        let wv = wt.filter[((oc * ipg + icg) * conv.kernel_h + ky) * conv.kernel_w + kx];
                                        acc += wv * src.at(ic, iy, ix)?;
                                    }
                                }
                            }
                            c.macs_total += ipg * conv.kernel_h * conv.kernel_w;
                            if oc == 0 {
                                computed[p][y as usize * out.width + x as usize] = true;
                            }
                            epilogue(acc, wt.bias.get(oc).copied(), conv.activation)
                        } else {
                            0.0
                        };
                        let a = buf.addr(oc, y, x)?;
                        buf.data[a] = v;
                        c.shared_store_ops += 1;
                    }
                }
            }
            bufs.push(buf);
        }
        barriers += 1;

        // Escaping intermediates: each tile stores the positions it owns.
        for (p, stage) in st.producers.iter().enumerate() {
            let Some(dst) = outputs.get_mut(&stage.name) else { continue };
            let flags = written.get_mut(&stage.name).expect("tracked with outputs");
            let (oh, ow) = &escape_owners[p];
            let ch = st.computed_span(p, Axis::H, tile.span(Axis::H));
            let cw = st.computed_span(p, Axis::W, tile.span(Axis::W));
            let mut n = 0;
            for oc in 0..stage.output_shape.channels {
                for y in ch.lo..=ch.hi {
                    if oh[y as usize] != Some(tile.row) {
                        continue;
                    }
                    for x in cw.lo..=cw.hi {
                        if ow[x as usize] != Some(tile.col) {
                            continue;
                        }
                        let gi = dst.index(oc, y as usize, x as usize);
                        if flags[gi] {
                            return Err(SimError::DoubleStore(stage.name.clone()));
                        }
                        flags[gi] = true;
                        let a = bufs[p].addr(oc, y, x)?;
                        dst.data[gi] = bufs[p].data[a];
                        n += 1;
                    }
                }
            }
            *store_counts.entry(stage.name.clone()).or_default() += n;
        }

        // Stage 2: consumers read their windows from shared memory.
        for cons in &st.consumers {
            let (kh, kw, s, pad) = cons.op.window();
            let mut dst = outputs.remove(&cons.name);
            let mut n_stored = 0;
            if ti == 0 {
                let buf = &bufs[cons.reads[0]];
                let words: Vec<usize> = (0..device.warp_size.min(nthreads))
                    .map(|i| {
                        let (tx, ty) = ((i % threads.x) as i64, (i / threads.x) as i64);
                        buf.addr(0, (tile.y0 as i64 + ty) * s as i64 - pad as i64, (tile.x0 as i64 + tx) * s as i64 - pad as i64)
                    })
                    .filter_map(Result::ok)
                    .collect();
                conflict = conflict.max(warp_conflict_degree(&words, device.banks));
            }
            let mut window: Vec<f32> = Vec::new();
            for ly in 0..threads.loops_y {
                for ty in 0..threads.y {
                    for lx in 0..threads.loops_x {
                        for tx in 0..threads.x {
                            let (dy, dx) = (ly * threads.y + ty, lx * threads.x + tx);
                            let (oy, ox) = (tile.y0 + dy, tile.x0 + dx);
                            // Range guard: masked lanes of a partial or over-provisioned tile.
                            if oy >= tile.y1 || ox >= tile.x1 || dy >= geo.tile_h || dx >= geo.tile_w {
                                continue;
                            }
                            let vals = consumer_point(cons, &bufs, st, w, (oy, ox), (kh, kw, s, pad), &mut window, &mut c)?;
                            if let Some(d) = dst.as_mut() {
                                let flags = written.get_mut(&cons.name).expect("tracked with outputs");
                                for (oc, v) in vals.into_iter().enumerate() {
                                    let gi = d.index(oc, oy, ox);
                                    if flags[gi] {
                                        return Err(SimError::DoubleStore(cons.name.clone()));
                                    }
                                    flags[gi] = true;
                                    d.data[gi] = v;
                                    n_stored += 1;
                                }
                            }
                        }
                    }
                }
            }
            if let Some(d) = dst {
                outputs.insert(cons.name.clone(), d);
            }
            *store_counts.entry(cons.name.clone()).or_default() += n_stored;
        }
    }

    for (name, flags) in &written {
        if flags.iter().any(|f| !f) {
            return Err(SimError::Incomplete(name.clone()));
        }
    }

    let mut staged_total = 0;
    for (total, seen) in loaded.values() {
        c.global_load_tx += transactions(*total, tb);
        c.global_load_unique_tx += transactions(seen.iter().filter(|b| **b).count(), tb);
        staged_total += total;
    }
    let mut stored_total = 0;
    for n in store_counts.values() {
        c.global_store_tx += transactions(*n, tb);
        stored_total += n;
    }
    let mut useful = 0;
    for (p, stage) in st.producers.iter().enumerate() {
        useful += computed[p].iter().filter(|b| **b).count() * stage.conv.macs_per_point();
    }
    useful += st
        .consumers
        .iter()
        .filter_map(|cn| cn.op.conv().map(|conv| conv.macs_per_point() * cn.output_shape.plane()))
        .sum::<usize>();
    c.macs_redundant = c.macs_total - useful;
    if plan.weights_in_constant() {
        c.constant_reads = c.macs_total;
    } else {
        c.readonly_reads = c.macs_total;
    }
    c.ldst_executed = staged_total + stored_total + c.shared_load_ops + c.shared_store_ops;
    c.bank_conflict_degree = conflict;
    Ok(FusedRun { outputs, counters: c, barriers })
}

/// Computes every output channel of one consumer point. A conv loads its
/// full window once and reuses it across output channels.
#[allow(clippy::too_many_arguments)]
fn consumer_point(
    cons: &ConsumerStage,
    bufs: &[SharedBuf],
    st: &BlockStages,
    w: &WeightSet,
    (oy, ox): (usize, usize),
    (kh, kw, s, pad): (usize, usize, usize, usize),
    window: &mut Vec<f32>,
    c: &mut CounterReport,
) -> Result<Vec<f32>, SimError> {
    let y0 = (oy * s) as i64 - pad as i64;
    let x0 = (ox * s) as i64 - pad as i64;
    match &cons.op {
        ConsumerOp::Conv(conv) => {
            let buf = &bufs[cons.reads[0]];
            let in_ch = st.producers[cons.reads[0]].output_shape.channels;
            window.clear();
            for ic in 0..in_ch {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let a = buf.addr(ic, y0 + ky as i64, x0 + kx as i64)?;
                        window.push(buf.data[a]);
                    }
                }
            }
            c.shared_load_ops += window.len();
            let wt = w.get(&cons.name).expect("checked by caller");
            let ipg = conv.in_per_group();
            let opg = conv.out_per_group();
            let k2 = kh * kw;
            let mut vals = Vec::with_capacity(conv.out_channels);
            for oc in 0..conv.out_channels {
                let grp = oc / opg;
                let mut acc = 0.0f32;
                for icg in 0..ipg {
                    let ic = grp * ipg + icg;
                    for k in 0..k2 {
                        acc += wt.filter[(oc * ipg + icg) * k2 + k] * window[ic * k2 + k];
                    }
                }
                c.macs_total += ipg * k2;
                vals.push(epilogue(acc, wt.bias.get(oc).copied(), conv.activation));
            }
            Ok(vals)
        }
        ConsumerOp::Add => {
            let (a, b) = (&bufs[cons.reads[0]], &bufs[cons.reads[1]]);
            let channels = cons.output_shape.channels;
            let mut vals = Vec::with_capacity(channels);
            for ch in 0..channels {
                let va = a.data[a.addr(ch, y0, x0)?];
                let vb = b.data[b.addr(ch, y0, x0)?];
                vals.push(va + vb);
            }
            c.shared_load_ops += 2 * channels;
            Ok(vals)
        }
    }
}
