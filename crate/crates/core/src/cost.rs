//! Analytical memory-transaction, bank-conflict and time model, plus the
//! tile-size tuner built on it.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::{Ordering, Reverse};

use serde::{Deserialize, Serialize};

use crate::device::{transactions, DeviceSpec, ELEM_BYTES};
use crate::fusion::FusionBlock;
use crate::graph::{Graph, Layer, Op, TensorShape};
use crate::tiling::{
    enumerate_tilings, occupancy, plan_tiling, Axis, PlanError, PlanOptions, TileGeometry, TilingPlan,
};

/// Modeled (or, from the simulator, counted) memory activity of a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CounterReport {
    /// Issued global load transactions, replicated halo loads included.
    pub global_load_tx: usize,
    /// Load transactions after de-duplicating replicated halo data.
    pub global_load_unique_tx: usize,
    pub global_store_tx: usize,
    pub shared_load_ops: usize,
    pub shared_store_ops: usize,
    /// Weight reads served by constant memory.
    pub constant_reads: usize,
    /// Weight reads served by the read-only cache.
    pub readonly_reads: usize,
    /// Per-thread load/store operations, global and shared.
    pub ldst_executed: usize,
    pub bank_conflict_degree: usize,
    pub macs_total: usize,
    pub macs_redundant: usize,
}

impl CounterReport {
    pub fn merge(&mut self, other: &CounterReport) {
        self.global_load_tx += other.global_load_tx;
        self.global_load_unique_tx += other.global_load_unique_tx;
        self.global_store_tx += other.global_store_tx;
        self.shared_load_ops += other.shared_load_ops;
        self.shared_store_ops += other.shared_store_ops;
        self.constant_reads += other.constant_reads;
        self.readonly_reads += other.readonly_reads;
        self.ldst_executed += other.ldst_executed;
        self.bank_conflict_degree = self.bank_conflict_degree.max(other.bank_conflict_degree);
        self.macs_total += other.macs_total;
        self.macs_redundant += other.macs_redundant;
    }
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Serialization factor of a warp reading words `t·stride` for
/// `t = 0..warp`: `gcd(stride, banks)` when the warp covers every bank.
pub fn bank_conflict_degree(stride_words: usize, device: &DeviceSpec) -> usize {
    gcd(stride_words, device.banks)
}

/// Largest number of distinct words any bank must serve for one warp access.
/// Threads reading the same word are a broadcast and do not conflict.
pub fn warp_conflict_degree(words: &[usize], banks: usize) -> usize {
    let mut per_bank: Vec<Vec<usize>> = alloc::vec![Vec::new(); banks];
    for &w in words {
        let b = &mut per_bank[w % banks];
        if !b.contains(&w) {
            b.push(w);
        }
    }
    per_bank.iter().map(Vec::len).max().unwrap_or(0).max(1)
}

/// Worst bank-conflict degree over the shared-memory access patterns of a
/// plan: producer writes sweep the staged region row by row, consumer reads
/// hit `stride`-spaced words along each output row.
pub fn plan_conflict_degree(plan: &TilingPlan, device: &DeviceSpec) -> usize {
    let t = &plan.threads;
    let warp: Vec<(usize, usize)> = (0..device.warp_size.min(t.threads()))
        .map(|i| (i % t.x, i / t.x))
        .collect();
    let mut worst = 1;
    for (p, layout) in plan.shared.iter().enumerate() {
        let pitch = layout.pitch();
        let region_w = layout.region_w().max(1);
        let lanes = device.warp_size.min(layout.region_h() * region_w);
        let writes: Vec<usize> = (0..lanes)
            .map(|i| (i / region_w) * pitch + i % region_w)
            .collect();
        worst = worst.max(warp_conflict_degree(&writes, device.banks));
        for c in plan.stages.consumers.iter().filter(|c| c.reads.contains(&p)) {
            let (_, _, s, _) = c.op.window();
            let reads: Vec<usize> = warp.iter().map(|&(x, y)| y * s * pitch + x * s).collect();
            worst = worst.max(warp_conflict_degree(&reads, device.banks));
        }
    }
    worst
}

/// Global store transactions of a fused block: only the tensors it writes out.
pub fn fused_store_tx(plan: &TilingPlan, device: &DeviceSpec) -> usize {
    plan.stored
        .iter()
        .map(|name| transactions(stage_shape(plan, name).elements(), device.transaction_bytes))
        .sum()
}

fn stage_shape(plan: &TilingPlan, name: &str) -> TensorShape {
    let s = &plan.stages;
    s.producers
        .iter()
        .find(|p| p.name == name)
        .map(|p| p.output_shape)
        .or_else(|| s.consumers.iter().find(|c| c.name == name).map(|c| c.output_shape))
        .expect("stored tensors are block members")
}

/// Global store transactions when every listed layer runs as its own kernel.
pub fn unfused_store_tx(g: &Graph, layers: &[String], device: &DeviceSpec) -> usize {
    layers
        .iter()
        .filter_map(|l| g.shape_of(l))
        .map(|s| transactions(s.elements(), device.transaction_bytes))
        .sum()
}

/// Counters the fused kernel of `plan` is expected to produce.
pub fn predicted_counters(plan: &TilingPlan, device: &DeviceSpec) -> CounterReport {
    let st = &plan.stages;
    let geo = &plan.geometry;
    let tb = device.transaction_bytes;
    let mut r = CounterReport::default();

    let mut staged_total = 0;
    for (name, shape) in st.inputs() {
        let (total, unique) = st.input_load_elements(geo, &name, &shape);
        r.global_load_tx += transactions(total, tb);
        r.global_load_unique_tx += transactions(unique, tb);
        staged_total += total;
    }
    let mut stored_elems = 0;
    for name in &plan.stored {
        let e = stage_shape(plan, name).elements();
        stored_elems += e;
        r.global_store_tx += transactions(e, tb);
    }

    let hs = geo.axis_spans(Axis::H, st.out_h);
    let ws = geo.axis_spans(Axis::W, st.out_w);
    for (p, stage) in st.producers.iter().enumerate() {
        let region = |axis: Axis, spans: &[crate::tiling::Span]| -> usize {
            spans.iter().map(|s| st.producer_span(p, axis, *s).len()).sum()
        };
        r.shared_store_ops += stage.output_shape.channels * region(Axis::H, &hs) * region(Axis::W, &ws);
        let (computed, _) = st.producer_points(geo, p);
        r.macs_total += computed * stage.conv.macs_per_point();
    }
    let out_points = st.out_h * st.out_w;
    for c in &st.consumers {
        match c.op.conv() {
            Some(conv) => {
                r.shared_load_ops += out_points * conv.in_ch() * conv.kernel_h * conv.kernel_w;
                r.macs_total += out_points * conv.macs_per_point();
            }
            None => r.shared_load_ops += 2 * c.output_shape.elements(),
        }
    }
    r.macs_redundant = plan.redundancy.redundant_macs;
    if plan.weights_in_constant() {
        r.constant_reads = r.macs_total;
    } else {
        r.readonly_reads = r.macs_total;
    }
    r.ldst_executed = staged_total + stored_elems + r.shared_load_ops + r.shared_store_ops;
    r.bank_conflict_degree = plan_conflict_degree(plan, device);
    r
}

/// Model time split into its roofline terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TimeEstimate {
    pub compute_s: f64,
    pub memory_s: f64,
}

impl TimeEstimate {
    pub fn total(&self) -> f64 {
        self.compute_s.max(self.memory_s)
    }
}

/// Resource demand of one kernel.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Workload {
    pub macs: f64,
    /// Off-chip bytes.
    pub global_bytes: f64,
    /// Shared-memory bytes before bank-conflict serialization.
    pub shared_bytes: f64,
    pub conflict_degree: f64,
    /// Read-only cache bytes (replicated input reads).
    pub readonly_bytes: f64,
    /// Fraction of peak issue rate sustained, from occupancy.
    pub efficiency: f64,
}

pub fn estimate_workload(w: &Workload, device: &DeviceSpec) -> TimeEstimate {
    let eff = if w.efficiency > 0.0 { w.efficiency } else { 1.0 };
    let compute_s = w.macs * 2.0 / device.peak_flops / eff;
    let onchip = w.shared_bytes * w.conflict_degree.max(1.0) + w.readonly_bytes;
    let memory_s = w.global_bytes / device.global_bw + onchip / device.shared_bw;
    TimeEstimate { compute_s, memory_s }
}

/// Occupancy-driven throughput factor: one resident block per SM cannot
/// hide latency and runs at half rate.
pub fn occupancy_efficiency(blocks_per_sm: usize) -> f64 {
    (blocks_per_sm as f64 / 2.0).min(1.0)
}

pub fn plan_workload(plan: &TilingPlan, device: &DeviceSpec) -> Workload {
    let c = predicted_counters(plan, device);
    let tb = device.transaction_bytes as f64;
    let staged: usize = plan
        .stages
        .inputs()
        .iter()
        .map(|(n, s)| plan.stages.input_load_elements(&plan.geometry, n, s).0)
        .sum();
    Workload {
        macs: c.macs_total as f64,
        global_bytes: (c.global_load_unique_tx + c.global_store_tx) as f64 * tb,
        shared_bytes: ((c.shared_load_ops + c.shared_store_ops) * ELEM_BYTES) as f64,
        conflict_degree: c.bank_conflict_degree as f64,
        readonly_bytes: (staged * ELEM_BYTES) as f64,
        efficiency: occupancy_efficiency(occupancy(plan.shared_bytes, device).blocks_per_sm),
    }
}

pub fn estimate_plan_time(plan: &TilingPlan, device: &DeviceSpec) -> TimeEstimate {
    estimate_workload(&plan_workload(plan, device), device)
}

/// Unfused layer as a standalone kernel: reads its inputs and writes its
/// output once through global memory.
pub fn layer_workload(g: &Graph, layer: &Layer, device: &DeviceSpec) -> Workload {
    let tb = device.transaction_bytes;
    let loads: usize = layer
        .inputs
        .iter()
        .filter_map(|i| g.shape_of(i))
        .map(|s| transactions(s.elements(), tb))
        .sum();
    let out = layer.shape.map_or(0, |s| s.elements());
    let macs = match &layer.op {
        Op::Conv(c) => c.macs_per_point() * layer.shape.map_or(0, |s| s.plane()),
        _ => 0,
    };
    Workload {
        macs: macs as f64,
        global_bytes: ((loads + transactions(out, tb)) * tb) as f64,
        efficiency: 1.0,
        ..Workload::default()
    }
}

pub fn estimate_layer_time(g: &Graph, layer: &Layer, device: &DeviceSpec) -> TimeEstimate {
    estimate_workload(&layer_workload(g, layer, device), device)
}

/// Sum of per-layer model times when the layers run unfused.
pub fn unfused_time(g: &Graph, layers: &[String], device: &DeviceSpec) -> f64 {
    layers
        .iter()
        .filter_map(|n| g.layer(n))
        .map(|l| estimate_layer_time(g, l, device).total())
        .sum()
}

/// One tuner candidate's evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEval {
    pub geometry: TileGeometry,
    pub shared_bytes: Option<usize>,
    pub estimate_s: Option<f64>,
    pub infeasible: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    pub best: TilingPlan,
    pub candidates: Vec<CandidateEval>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TuneError {
    #[error("every tiling candidate is infeasible")]
    AllInfeasible(Vec<CandidateEval>),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

fn tie_break(a: &(f64, TilingPlan), b: &(f64, TilingPlan)) -> Ordering {
    let key = |p: &TilingPlan| (p.shared_bytes, Reverse(p.geometry.tile_count()), p.geometry);
    a.0.total_cmp(&b.0).then_with(|| key(&a.1).cmp(&key(&b.1)))
}

/// Evaluates every candidate geometry and keeps the fastest feasible plan.
/// Ties go to the smaller shared footprint, then the larger grid, then the
/// lexicographically smaller geometry.
pub fn tune(g: &Graph, block: &FusionBlock, device: &DeviceSpec, options: PlanOptions) -> Result<TuneOutcome, TuneError> {
    let stages = crate::tiling::BlockStages::resolve(g, block)?;
    tune_over(g, block, device, options, enumerate_tilings(stages.out_h, stages.out_w))
}

/// [`tune`] over an explicit candidate list.
pub fn tune_over(
    g: &Graph,
    block: &FusionBlock,
    device: &DeviceSpec,
    options: PlanOptions,
    geometries: Vec<TileGeometry>,
) -> Result<TuneOutcome, TuneError> {
    let mut candidates = Vec::new();
    let mut best: Option<(f64, TilingPlan)> = None;
    for geometry in geometries {
        match plan_tiling(g, block, geometry, device, options) {
            Ok(plan) => {
                let t = estimate_plan_time(&plan, device).total();
                candidates.push(CandidateEval {
                    geometry,
                    shared_bytes: Some(plan.shared_bytes),
                    estimate_s: Some(t),
                    infeasible: None,
                });
                let cand = (t, plan);
                best = match best {
                    Some(b) if tie_break(&b, &cand) != Ordering::Greater => Some(b),
                    _ => Some(cand),
                };
            }
            Err(e @ (PlanError::SharedOverflow { .. } | PlanError::ThreadLimits { .. })) => {
                candidates.push(CandidateEval {
                    geometry,
                    shared_bytes: None,
                    estimate_s: None,
                    infeasible: Some(e.to_string()),
                });
            }
            Err(e) => return Err(e.into()),
        }
    }
    match best {
        Some((_, best)) => Ok(TuneOutcome { best, candidates }),
        None => Err(TuneError::AllInfeasible(candidates)),
    }
}

/// Fused-versus-unfused comparison of one block, the rows of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockComparison {
    pub block_id: usize,
    pub fused_store_tx: usize,
    pub unfused_store_tx: usize,
    pub fused_time_s: f64,
    pub unfused_time_s: f64,
}

impl BlockComparison {
    pub fn ratio(&self) -> f64 {
        if self.unfused_store_tx == 0 {
            return 1.0;
        }
        self.fused_store_tx as f64 / self.unfused_store_tx as f64
    }

    pub fn beneficial(&self) -> bool {
        self.fused_store_tx < self.unfused_store_tx
    }
}

pub fn compare_block(g: &Graph, block: &FusionBlock, plan: &TilingPlan, device: &DeviceSpec) -> BlockComparison {
    BlockComparison {
        block_id: block.id,
        fused_store_tx: fused_store_tx(plan, device),
        unfused_store_tx: unfused_store_tx(g, &block.members, device),
        fused_time_s: estimate_plan_time(plan, device).total(),
        unfused_time_s: unfused_time(g, &block.members, device),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::detect_fusion_blocks;
    use crate::graph::{ConvParams, Layer, TensorShape};

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
    fn conflict_degree_examples() {
        let d = DeviceSpec::titan_xp();
        assert_eq!(bank_conflict_degree(32, &d), 32);
        assert_eq!(bank_conflict_degree(33, &d), 1);
        assert_eq!(bank_conflict_degree(1, &d), 1);
        assert_eq!(bank_conflict_degree(6, &d), 2);
        let words: Vec<usize> = (0..32).map(|t| t * 32).collect();
        assert_eq!(warp_conflict_degree(&words, 32), 32);
        assert_eq!(warp_conflict_degree(&[5; 32], 32), 1);
    }

    #[test]
    fn a1_store_transactions() {
        let g = a1();
        let d = DeviceSpec::titan_xp();
        let blocks = detect_fusion_blocks(&g);
        for geo in enumerate_tilings(28, 28) {
            let plan = plan_tiling(&g, &blocks[0], geo, &d, PlanOptions::default()).unwrap();
            assert_eq!(fused_store_tx(&plan, &d), 6272);
            assert_eq!(predicted_counters(&plan, &d).global_store_tx, 6272);
        }
        assert_eq!(unfused_store_tx(&g, &blocks[0].members, &d), 9408);
    }

    #[test]
    fn empty_workload_takes_no_time() {
        let t = estimate_workload(&Workload::default(), &DeviceSpec::titan_xp());
        assert_eq!(t.total(), 0.0);
    }

    #[test]
    fn doubling_bandwidth_halves_memory_time() {
        let g = Graph::new("relu")
            .with_input("x", TensorShape::new(64, 56, 56))
            .with_layer(Layer::new("r", Op::Relu, &["x"]))
            .infer_shapes()
            .unwrap();
        let mut d = DeviceSpec::titan_xp();
        let slow = estimate_layer_time(&g, &g.layers[0], &d);
        d.global_bw *= 2.0;
        let fast = estimate_layer_time(&g, &g.layers[0], &d);
        assert!(slow.memory_s > slow.compute_s);
        assert_eq!(fast.memory_s * 2.0, slow.memory_s);
    }

    #[test]
    fn fused_a1_beats_unfused() {
        let g = a1();
        let blocks = detect_fusion_blocks(&g);
        for d in [DeviceSpec::titan_xp(), DeviceSpec::tesla_p4()] {
            let out = tune(&g, &blocks[0], &d, PlanOptions::default()).unwrap();
            let cmp = compare_block(&g, &blocks[0], &out.best, &d);
            assert!(cmp.fused_time_s < cmp.unfused_time_s, "{cmp:?}");
            assert!(cmp.beneficial());
        }
    }

    #[test]
    fn all_infeasible_is_reported() {
        let g = a1();
        let blocks = detect_fusion_blocks(&g);
        let mut d = DeviceSpec::titan_xp();
        d.shared_per_block_max = 64;
        match tune(&g, &blocks[0], &d, PlanOptions::default()) {
            Err(TuneError::AllInfeasible(c)) => {
                assert_eq!(c.len(), 4);
                assert!(c.iter().all(|c| c.infeasible.is_some()));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pointwise_tie_breaks_on_footprint() {
        let g = Graph::new("pw")
            .with_input("x", TensorShape::new(4, 12, 12))
            .with_layer(Layer::new("a", Op::Conv(ConvParams::new(4, 1, 0, 1)), &["x"]))
            .with_layer(Layer::new("b", Op::Conv(ConvParams::new(4, 1, 0, 1)), &["a"]))
            .infer_shapes()
            .unwrap();
        let blocks = detect_fusion_blocks(&g);
        let d = DeviceSpec::titan_xp();
        let out = tune(&g, &blocks[0], &d, PlanOptions::default()).unwrap();
        assert_eq!(out.candidates.len(), 4);
        assert_eq!(out.best.redundancy, Default::default());
        let best_t = estimate_plan_time(&out.best, &d).total();
        for c in &out.candidates {
            let t = c.estimate_s.unwrap();
            assert!(best_t <= t);
            if t == best_t {
                assert!(out.best.shared_bytes <= c.shared_bytes.unwrap());
            }
        }
    }
}
