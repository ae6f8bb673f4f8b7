//! Subcommand workflows. Each command returns the text it prints; files
//! go to the output directory through atomic writes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use layerfuse_core::codegen::{emit_kernel, structural_check, CodegenError};
use layerfuse_core::cost::{compare_block, estimate_plan_time, fused_store_tx, predicted_counters, tune, TuneError};
use layerfuse_core::cost::{CandidateEval, CounterReport};
use layerfuse_core::fusion::assignment_report;
use layerfuse_core::sim::{checksum, compare, run_reference, run_schedule, seeded_inputs, SimError, TileOrder, WeightSet};
use layerfuse_core::tiling::{check_resources, PlanError};
use layerfuse_core::{detect_fusion_blocks, fold_elementwise, plan_tiling, DeviceSpec, FusionBlock, FusionMode, Graph};
use layerfuse_core::{PlanOptions, TileGeometry, TilingPlan};
use serde::Serialize;

use crate::doc::{load_graph, DocError};
use crate::files::{self, FileError, PlanFile, PlanMeta, TOOL_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error(transparent)]
    File(#[from] FileError),
    #[error("{path}: {source}")]
    Graph { path: PathBuf, source: DocError },
    #[error("{0}")]
    Input(String),
    #[error("block {block}: {reason}")]
    Infeasible { block: usize, reason: String },
    #[error("block {block}: every tiling candidate is infeasible\n{table}")]
    AllInfeasible { block: usize, table: String },
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("simulation error: {0}")]
    Simulation(#[from] SimError),
}

pub const EXIT_OK: u8 = 0;
pub const EXIT_IO: u8 = 1;
pub const EXIT_PARSE: u8 = 2;
pub const EXIT_INFEASIBLE: u8 = 3;
pub const EXIT_VERIFY: u8 = 4;

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::File(FileError::Io { .. }) => EXIT_IO,
            Failure::File(_) | Failure::Graph { .. } | Failure::Input(_) => EXIT_PARSE,
            Failure::Infeasible { .. } | Failure::AllInfeasible { .. } => EXIT_INFEASIBLE,
            Failure::Verification(_) | Failure::Simulation(_) => EXIT_VERIFY,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub graph: PathBuf,
    pub device: PathBuf,
    pub plan: Option<PathBuf>,
    pub seed: u64,
    pub tol: f64,
    pub out: Option<PathBuf>,
    pub tile: Option<(usize, usize)>,
    pub reverse_tiles: bool,
    pub weights: Option<PathBuf>,
    pub save_weights: bool,
}

impl RunConfig {
    pub fn new(graph: impl Into<PathBuf>, device: impl Into<PathBuf>) -> Self {
        RunConfig {
            graph: graph.into(),
            device: device.into(),
            plan: None,
            seed: 42,
            tol: 1e-4,
            out: None,
            tile: None,
            reverse_tiles: false,
            weights: None,
            save_weights: false,
        }
    }
}

/// Parses `HxW`.
pub fn parse_tile(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad tile height `{h}`"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad tile width `{w}`"))?;
    if h == 0 || w == 0 {
        return Err("tile dimensions must be positive".into());
    }
    Ok((h, w))
}

/// Loaded inputs shared by every subcommand.
pub struct Session {
    /// Graph after elementwise folding.
    pub graph: Graph,
    pub blocks: Vec<FusionBlock>,
    pub device: DeviceSpec,
    pub meta: PlanMeta,
    out: Option<PathBuf>,
}

impl Session {
    pub fn load(cfg: &RunConfig) -> Result<Self, Failure> {
        if !(cfg.tol > 0.0) {
            return Err(Failure::Input(format!("tolerance must be positive, got {}", cfg.tol)));
        }
        let gtext = files::read_text(&cfg.graph)?;
        let dtext = files::read_text(&cfg.device)?;
        let raw = load_graph(&gtext).map_err(|source| Failure::Graph { path: cfg.graph.clone(), source })?;
        let device = files::parse_device(&cfg.device, &dtext)?;
        let graph = fold_elementwise(&raw);
        let blocks = detect_fusion_blocks(&graph);
        let meta = PlanMeta {
            tool_version: TOOL_VERSION.into(),
            graph_digest: files::digest(gtext.as_bytes()),
            device_digest: files::digest(dtext.as_bytes()),
        };
        Ok(Session { graph, blocks, device, meta, out: cfg.out.clone() })
    }

    fn fused(&self) -> impl Iterator<Item = &FusionBlock> {
        self.blocks.iter().filter(|b| b.is_fused())
    }

    fn stem(&self) -> String {
        files::safe_name(&self.graph.name)
    }

    fn out_dir(&self) -> &Path {
        self.out.as_deref().unwrap_or(Path::new("."))
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf, Failure> {
        let p = self.out_dir().join(name);
        files::write_atomic(&p, text.as_bytes())?;
        Ok(p)
    }

    fn header(&self, title: &str, seed: Option<u64>) -> String {
        let mut s = format!("# layerfuse {TOOL_VERSION} {title}\n# graph: {}\n", self.graph.name);
        let _ = writeln!(s, "# graph sha256: {}", self.meta.graph_digest);
        let _ = writeln!(s, "# device: {} sha256: {}", self.device.name, self.meta.device_digest);
        if let Some(seed) = seed {
            let _ = writeln!(s, "# seed: {seed}");
        }
        s
    }

    fn plan_file(&self, plan: TilingPlan) -> PlanFile {
        PlanFile { meta: self.meta.clone(), plan }
    }

    /// Plan for one block: the `--tile` override when given, else the tuner's best.
    fn plan_block(&self, b: &FusionBlock, tile: Option<(usize, usize)>) -> Result<(TilingPlan, Vec<CandidateEval>), Failure> {
        let infeasible = |reason: String| Failure::Infeasible { block: b.id, reason };
        match tile {
            Some((th, tw)) => {
                let (oh, ow) = block_extent(&self.graph, b).map_err(|e| infeasible(e.to_string()))?;
                let geometry = TileGeometry::new(th, tw, oh.div_ceil(th), ow.div_ceil(tw));
                let plan = plan_tiling(&self.graph, b, geometry, &self.device, PlanOptions::default())
                    .map_err(|e| infeasible(e.to_string()))?;
                Ok((plan, Vec::new()))
            }
            None => match tune(&self.graph, b, &self.device, PlanOptions::default()) {
                Ok(t) => Ok((t.best, t.candidates)),
                Err(TuneError::AllInfeasible(c)) => Err(Failure::AllInfeasible { block: b.id, table: candidate_table(&c) }),
                Err(TuneError::Plan(e)) => Err(infeasible(e.to_string())),
            },
        }
    }

    /// Plans from `--plan` when given, otherwise computed inline.
    fn plans(&self, cfg: &RunConfig, warnings: &mut Vec<String>) -> Result<BTreeMap<usize, TilingPlan>, Failure> {
        let mut map = BTreeMap::new();
        match &cfg.plan {
            Some(p) => {
                for pf in files::read_plans(p)? {
                    if pf.meta.graph_digest != self.meta.graph_digest || pf.meta.device_digest != self.meta.device_digest {
                        warnings.push(format!("plan for block {} was made from different input files", pf.plan.block_id));
                    }
                    map.insert(pf.plan.block_id, pf.plan);
                }
                for b in self.fused() {
                    if !map.contains_key(&b.id) {
                        return Err(Failure::Input(format!("no plan file for fused block {}", b.id)));
                    }
                }
            }
            None => {
                for b in self.fused() {
                    map.insert(b.id, self.plan_block(b, cfg.tile)?.0);
                }
            }
        }
        Ok(map)
    }
}

fn block_extent(g: &Graph, b: &FusionBlock) -> Result<(usize, usize), PlanError> {
    let s = layerfuse_core::tiling::BlockStages::resolve(g, b)?;
    Ok((s.out_h, s.out_w))
}

fn candidate_table(c: &[CandidateEval]) -> String {
    let mut s = format!("{:>9} {:>7} {:>12} {:>14}  {}\n", "tile", "grid", "shared_bytes", "estimate_s", "status");
    for e in c {
        let g = &e.geometry;
        let _ = writeln!(
            s,
            "{:>9} {:>7} {:>12} {:>14}  {}",
            format!("{}x{}", g.tile_h, g.tile_w),
            format!("{}x{}", g.grid_h, g.grid_w),
            e.shared_bytes.map_or("-".into(), |b| b.to_string()),
            e.estimate_s.map_or("-".into(), |t| format!("{t:.6e}")),
            e.infeasible.as_deref().unwrap_or("ok"),
        );
    }
    s
}

fn plan_lines(s: &mut String, plan: &TilingPlan, device: &DeviceSpec) {
    let g = &plan.geometry;
    let occ = check_resources(plan, device);
    let _ = writeln!(
        s,
        "block {}: {} tile {}x{} grid {}x{} shared {} B threads {}x{} blocks/SM {}",
        plan.block_id,
        plan.mode,
        g.tile_h,
        g.tile_w,
        g.grid_h,
        g.grid_w,
        plan.shared_bytes,
        plan.threads.x,
        plan.threads.y,
        occ.blocks_per_sm
    );
    if occ.exceeds_third {
        let _ = writeln!(s, "  warning: shared use above a third of the SM ({:.0}%)", occ.shared_fraction * 100.0);
    }
    if occ.latency_risk {
        let _ = writeln!(s, "  warning: one resident block per SM, latency cannot be hidden");
    }
    if !plan.weights_in_constant() {
        let _ = writeln!(s, "  note: weights exceed constant memory, read through the read-only cache");
    }
}

/// Output of a subcommand: printed text, written files, and non-fatal warnings.
#[derive(Debug, Default)]
pub struct Outcome {
    pub text: String,
    pub written: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

fn write_plans(s: &Session, plans: &[TilingPlan], written: &mut Vec<PathBuf>) -> Result<(), Failure> {
    for p in plans {
        let pf = s.plan_file(p.clone());
        written.push(s.write(&pf.file_name(), &files::serialize_plan(&pf))?);
    }
    Ok(())
}

pub fn cmd_plan(cfg: &RunConfig) -> Result<Outcome, Failure> {
    let s = Session::load(cfg)?;
    let mut o = Outcome::default();
    let mut text = s.header("plan", None);
    text.push_str(&assignment_report(&s.graph, &s.blocks));
    let mut plans = Vec::new();
    for b in s.fused() {
        let (plan, _) = s.plan_block(b, cfg.tile)?;
        plan_lines(&mut text, &plan, &s.device);
        plans.push(plan);
    }
    write_plans(&s, &plans, &mut o.written)?;
    o.written.push(s.write(&format!("{}.summary.txt", s.stem()), &text)?);
    o.text = text;
    Ok(o)
}

pub fn cmd_tune(cfg: &RunConfig) -> Result<Outcome, Failure> {
    let s = Session::load(cfg)?;
    let mut o = Outcome::default();
    let mut text = s.header("tune", None);
    let mut plans = Vec::new();
    if s.fused().next().is_none() {
        text.push_str("no tunable blocks\n");
    }
    for b in s.fused() {
        let (plan, cands) = s.plan_block(b, cfg.tile)?;
        let table = candidate_table(&cands);
        let _ = writeln!(text, "## block {} ({}): {} candidates", b.id, b.mode, cands.len());
        text.push_str(&table);
        let g = plan.geometry;
        let _ = writeln!(text, "best: tile {}x{} grid {}x{}", g.tile_h, g.tile_w, g.grid_h, g.grid_w);
        o.written.push(s.write(&format!("{}.block{}.candidates.txt", s.stem(), b.id), &table)?);
        plans.push(plan);
    }
    write_plans(&s, &plans, &mut o.written)?;
    o.text = text;
    Ok(o)
}

pub fn cmd_codegen(cfg: &RunConfig) -> Result<Outcome, Failure> {
    let s = Session::load(cfg)?;
    let mut o = Outcome::default();
    let plans = s.plans(cfg, &mut o.warnings)?;
    let mut text = s.header("codegen", None);
    for plan in plans.values() {
        let src = emit_kernel(plan, &s.graph, &s.device).map_err(|e| match e {
            CodegenError::ConstantOverflow { .. } => Failure::Infeasible { block: plan.block_id, reason: e.to_string() },
            other => Failure::Input(other.to_string()),
        })?;
        let bad = structural_check(&src, plan);
        if !bad.is_empty() {
            return Err(Failure::Verification(format!("kernel for block {}: {bad:?}", plan.block_id)));
        }
        let name = plan.kernel_name();
        let manifest = toml::to_string(&src.manifest).expect("manifests serialize");
        for (ext, body) in [("kernel", &src.kernel), ("host", &src.host), ("manifest", &manifest)] {
            o.written.push(s.write(&format!("{name}.{ext}"), body)?);
        }
        let _ = writeln!(text, "block {}: {name} ({} shared bytes, {} barriers)", plan.block_id, src.manifest.shared_bytes, src.manifest.barrier_count);
    }
    o.text = text;
    Ok(o)
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputCheck {
    pub tensor: String,
    pub max_abs: f64,
    pub max_rel: f64,
    pub pass: bool,
    pub checksum: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateReport {
    pub tool_version: String,
    pub graph: String,
    pub graph_digest: String,
    pub device: String,
    pub device_digest: String,
    pub seed: u64,
    pub weights: String,
    pub tolerance: f64,
    pub tile_order: String,
    pub pass: bool,
    pub barriers: usize,
    pub predicted_store_tx: usize,
    pub counters: CounterReport,
    pub outputs: Vec<OutputCheck>,
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<Outcome, Failure> {
    let s = Session::load(cfg)?;
    let mut o = Outcome::default();
    let plans = s.plans(cfg, &mut o.warnings)?;
    let (w, weights_desc) = match &cfg.weights {
        Some(p) => {
            let text = files::read_text(p)?;
            (files::read_weights(p, &s.graph)?, format!("file sha256 {}", files::digest(text.as_bytes())))
        }
        None => (WeightSet::seeded(&s.graph, cfg.seed), "seeded".to_string()),
    };
    if cfg.save_weights {
        o.written.push(files::write_weights(&s.graph, &w, s.out_dir(), &s.stem())?);
    }
    let inputs = seeded_inputs(&s.graph, cfg.seed);
    let order = if cfg.reverse_tiles { TileOrder::Reverse } else { TileOrder::Forward };
    let reference = run_reference(&s.graph, &inputs, &w)?;
    let fused = run_schedule(&s.graph, &s.blocks, &plans, &inputs, &w, &s.device, order)?;
    let mut outputs = Vec::new();
    for (name, r) in &reference {
        let f = &fused.outputs[name];
        let c = compare(f, r, cfg.tol)?;
        outputs.push(OutputCheck {
            tensor: name.clone(),
            max_abs: c.max_abs,
            max_rel: c.max_rel,
            pass: c.pass,
            checksum: format!("{:016x}", checksum(f)),
        });
    }
    let predicted_store_tx: usize = plans.values().map(|p| predicted_counters(p, &s.device).global_store_tx).sum::<usize>()
        + s.blocks.iter().filter(|b| !b.is_fused()).map(|b| layerfuse_core::cost::unfused_store_tx(&s.graph, &b.members, &s.device)).sum::<usize>();
    let pass = outputs.iter().all(|c| c.pass) && predicted_store_tx == fused.counters.global_store_tx;
    let report = SimulateReport {
        tool_version: TOOL_VERSION.into(),
        graph: s.graph.name.clone(),
        graph_digest: s.meta.graph_digest.clone(),
        device: s.device.name.clone(),
        device_digest: s.meta.device_digest.clone(),
        seed: cfg.seed,
        weights: weights_desc,
        tolerance: cfg.tol,
        tile_order: if cfg.reverse_tiles { "reverse" } else { "forward" }.into(),
        pass,
        barriers: fused.barriers,
        predicted_store_tx,
        counters: fused.counters,
        outputs,
    };
    let text = toml::to_string(&report).expect("reports serialize");
    if cfg.out.is_some() {
        o.written.push(s.write(&format!("{}.simulate.toml", s.stem()), &text)?);
    }
    if !pass {
        let worst = report.outputs.iter().map(|c| c.max_rel).fold(0.0, f64::max);
        return Err(Failure::Verification(format!("max_rel {worst:e} exceeds tolerance {:e}\n{text}", cfg.tol)));
    }
    o.text = text;
    Ok(o)
}

/// One row of the fused/unfused table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub block_id: usize,
    pub mode: FusionMode,
    pub fused_tx: usize,
    pub unfused_tx: usize,
    pub ratio: f64,
    pub fused_s: f64,
    pub unfused_s: f64,
    pub beneficial: bool,
}

pub fn report_rows(s: &Session, plans: &BTreeMap<usize, TilingPlan>) -> Vec<ReportRow> {
    s.fused()
        .filter_map(|b| {
            let plan = plans.get(&b.id)?;
            let c = compare_block(&s.graph, b, plan, &s.device);
            debug_assert_eq!(c.fused_store_tx, fused_store_tx(plan, &s.device));
            debug_assert_eq!(c.fused_time_s, estimate_plan_time(plan, &s.device).total());
            Some(ReportRow {
                block_id: b.id,
                mode: b.mode,
                fused_tx: c.fused_store_tx,
                unfused_tx: c.unfused_store_tx,
                ratio: c.ratio(),
                fused_s: c.fused_time_s,
                unfused_s: c.unfused_time_s,
                beneficial: c.beneficial(),
            })
        })
        .collect()
}

pub fn cmd_report(cfg: &RunConfig) -> Result<Outcome, Failure> {
    let s = Session::load(cfg)?;
    let mut o = Outcome::default();
    let plans = s.plans(cfg, &mut o.warnings)?;
    let rows = report_rows(&s, &plans);
    let mut text = s.header("report", Some(cfg.seed));
    let _ = writeln!(
        text,
        "{:>5} {:>8} {:>10} {:>10} {:>7} {:>12} {:>12}  note",
        "block", "mode", "fused_tx", "unfused_tx", "ratio", "fused_s", "unfused_s"
    );
    for r in &rows {
        let mut note = String::new();
        if !r.beneficial {
            note.push_str("non-beneficial");
        }
        if r.mode == FusionMode::Merge {
            if !note.is_empty() {
                note.push_str("; ");
            }
            note.push_str("merge store count is a model value");
        }
        let _ = writeln!(
            text,
            "{:>5} {:>8} {:>10} {:>10} {:>7.3} {:>12.4e} {:>12.4e}  {}",
            r.block_id, r.mode, r.fused_tx, r.unfused_tx, r.ratio, r.fused_s, r.unfused_s, note
        );
    }
    if cfg.out.is_some() {
        o.written.push(s.write(&format!("{}.report.txt", s.stem()), &text)?);
    }
    o.text = text;
    Ok(o)
}
