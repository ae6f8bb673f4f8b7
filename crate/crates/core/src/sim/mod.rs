//! CPU execution: a naive reference executor and an interpreter that runs
//! fused plans through modeled shared buffers, counting memory activity.

mod fused;
mod reference;
mod tensor;

use alloc::collections::BTreeMap;
use alloc::string::String;

use serde::{Deserialize, Serialize};

pub use fused::{run_fused, FusedRun, TileOrder};
pub use reference::{conv2d, pool2d, run_layer, run_reference_env};
pub use tensor::{seeded_inputs, ConvWeights, Tensor, WeightSet};

use crate::cost::CounterReport;
use crate::device::{transactions, DeviceSpec};
use crate::fusion::FusionBlock;
use crate::graph::{Graph, GraphError, TensorShape};
use crate::tiling::TilingPlan;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("tensor `{0}` is not available")]
    MissingTensor(String),
    #[error("weights for `{0}` are missing or mis-sized")]
    MissingWeights(String),
    #[error("shape {0} does not match {1}")]
    ShapeMismatch(TensorShape, TensorShape),
    #[error("plan does not match the graph: {0}")]
    PlanMismatch(String),
    #[error("shared buffer `{buffer}` accessed out of bounds at channel {channel}, row {row}, col {col}")]
    SharedOutOfBounds { buffer: String, channel: usize, row: i64, col: i64 },
    #[error("staged input accessed out of bounds at channel {channel}, row {row}, col {col}")]
    StagedOutOfBounds { channel: usize, row: i64, col: i64 },
    #[error("`{0}` stored twice at one position")]
    DoubleStore(String),
    #[error("`{0}` was not fully stored")]
    Incomplete(String),
    #[error("no plan for fused block {0}")]
    MissingPlan(usize),
    #[error(transparent)]
    Graph(GraphError),
}

/// Graph outputs from the reference executor.
pub fn run_reference(
    g: &Graph,
    inputs: &BTreeMap<String, Tensor>,
    w: &WeightSet,
) -> Result<BTreeMap<String, Tensor>, SimError> {
    let mut env = run_reference_env(g, inputs, w)?;
    g.outputs
        .iter()
        .map(|o| env.remove(o).map(|t| (o.clone(), t)).ok_or_else(|| SimError::MissingTensor(o.clone())))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub max_abs: f64,
    pub max_rel: f64,
    pub pass: bool,
}

/// Element-wise comparison; relative error uses `max(|a|, |b|, 1e-6)`.
pub fn compare(a: &Tensor, b: &Tensor, rel_tol: f64) -> Result<CompareReport, SimError> {
    if a.shape != b.shape || a.data.len() != b.data.len() {
        return Err(SimError::ShapeMismatch(a.shape, b.shape));
    }
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (x as f64, y as f64);
        let d = (x - y).abs();
        let rel = if d == 0.0 { 0.0 } else { d / x.abs().max(y.abs()).max(1e-6) };
        // NaN never compares equal and must fail.
        if d.is_nan() {
            return Ok(CompareReport { max_abs: f64::NAN, max_rel: f64::INFINITY, pass: false });
        }
        max_abs = max_abs.max(d);
        max_rel = max_rel.max(rel);
    }
    Ok(CompareReport { max_abs, max_rel, pass: max_rel <= rel_tol })
}

/// Result of executing a whole block schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleRun {
    pub outputs: BTreeMap<String, Tensor>,
    pub counters: CounterReport,
    pub barriers: usize,
}

/// Runs every block in schedule order: fused blocks through their plan
/// (keyed by block id), singletons as standalone layers with global
/// round-trips.
pub fn run_schedule(
    g: &Graph,
    blocks: &[FusionBlock],
    plans: &BTreeMap<usize, TilingPlan>,
    inputs: &BTreeMap<String, Tensor>,
    w: &WeightSet,
    device: &DeviceSpec,
    order: TileOrder,
) -> Result<ScheduleRun, SimError> {
    let mut env: BTreeMap<String, Tensor> = BTreeMap::new();
    for i in &g.inputs {
        let t = inputs.get(&i.name).ok_or_else(|| SimError::MissingTensor(i.name.clone()))?;
        if t.shape != i.shape {
            return Err(SimError::ShapeMismatch(t.shape, i.shape));
        }
        env.insert(i.name.clone(), t.clone());
    }
    let tb = device.transaction_bytes;
    let mut counters = CounterReport::default();
    let mut barriers = 0;
    for b in blocks {
        if b.is_fused() {
            let plan = plans.get(&b.id).ok_or(SimError::MissingPlan(b.id))?;
            let run = run_fused(plan, g, &env, w, device, order)?;
            counters.merge(&run.counters);
            barriers += run.barriers;
            env.extend(run.outputs);
        } else {
            let name = &b.members[0];
            let layer = g.layer(name).ok_or_else(|| SimError::MissingTensor(name.clone()))?;
            let y = run_layer(layer, &env, w)?;
            let loads: usize = layer
                .inputs
                .iter()
                .map(|i| env.get(i).map_or(0, |t| transactions(t.data.len(), tb)))
                .sum();
            counters.global_load_tx += loads;
            counters.global_load_unique_tx += loads;
            counters.global_store_tx += transactions(y.data.len(), tb);
            let read: usize = layer.inputs.iter().filter_map(|i| env.get(i)).map(|t| t.data.len()).sum();
            counters.ldst_executed += read + y.data.len();
            if let Some(c) = layer.conv() {
                let macs = c.macs_per_point() * y.shape.plane();
                counters.macs_total += macs;
                counters.readonly_reads += macs;
            }
            env.insert(name.clone(), y);
        }
    }
    let outputs = g
        .outputs
        .iter()
        .map(|o| env.get(o).cloned().map(|t| (o.clone(), t)).ok_or_else(|| SimError::MissingTensor(o.clone())))
        .collect::<Result<_, _>>()?;
    Ok(ScheduleRun { outputs, counters, barriers })
}

/// FNV-1a over the little-endian bytes of a tensor: a compact fingerprint
/// for recorded outputs.
pub fn checksum(t: &Tensor) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in &t.data {
        for byte in v.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}
