//! Emission of fused kernel source, a host launch stub and a manifest
//! from a tiling plan, plus a structural checker for emitted sources.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::device::{DeviceSpec, ELEM_BYTES};
use crate::graph::{Activation, ConvParams, Graph, Op};
use crate::tiling::{ConsumerOp, TilingPlan, WeightPlacement};

/// Section markers. Every kernel section starts with one of these comment
/// lines, which the structural checker keys on.
const STAGE: &str = "// -- stage";
const COMPUTE: &str = "// -- compute ";
const STORE: &str = "// -- store ";
const GUARD: &str = "// -- guard";
const END: &str = "// -- end";
const BARRIER: &str = "__syncthreads();";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestInput {
    pub name: String,
    pub symbol: String,
    /// Zero padding applied on the host before launch.
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestBuffer {
    pub symbol: String,
    pub layer: String,
    pub channels: usize,
    pub rows: usize,
    pub pitch: usize,
    pub border: usize,
    pub elements: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelManifest {
    pub kernel: String,
    pub graph: String,
    pub block: usize,
    pub mode: String,
    pub device: String,
    /// `[height, width]` of one tile.
    pub tile: [usize; 2],
    /// Launch grid `[x, y]`.
    pub grid: [usize; 2],
    /// Thread block `[x, y]`.
    pub block_dim: [usize; 2],
    pub shared_bytes: usize,
    pub barrier_count: usize,
    pub constant_symbols: Vec<String>,
    pub readonly_symbols: Vec<String>,
    pub stored: Vec<String>,
    pub inputs: Vec<ManifestInput>,
    pub buffers: Vec<ManifestBuffer>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelSource {
    pub kernel: String,
    pub host: String,
    pub manifest: KernelManifest,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodegenError {
    #[error("plan does not match the graph: {0}")]
    Mismatch(String),
    #[error("plan places {needed} weight bytes in constant memory but only {capacity} are available")]
    ConstantOverflow { needed: usize, capacity: usize },
}

/// C identifier for a tensor or layer name.
pub fn ident(name: &str) -> String {
    let mut s: String = name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
    if s.starts_with(|c: char| c.is_ascii_digit()) || s.is_empty() {
        s.insert(0, '_');
    }
    s
}

struct Weights {
    constant: bool,
}

impl Weights {
    fn filter(&self, layer: &str, idx: &str) -> String {
        if self.constant {
            format!("w_{}[{idx}]", ident(layer))
        } else {
            format!("__ldg(&w_{}[{idx}])", ident(layer))
        }
    }

    fn bias(&self, layer: &str, idx: &str) -> String {
        if self.constant {
            format!("b_{}[{idx}]", ident(layer))
        } else {
            format!("__ldg(&b_{}[{idx}])", ident(layer))
        }
    }
}

fn epilogue(out: &mut String, indent: &str, w: &Weights, layer: &str, conv: &ConvParams, oc: &str) {
    if conv.has_bias {
        let _ = writeln!(out, "{indent}acc += {};", w.bias(layer, oc));
    }
    if conv.activation == Activation::Relu {
        let _ = writeln!(out, "{indent}acc = fmaxf(acc, 0.0f);");
    }
}

/// Window geometry shared by every consumer of one producer.
struct Window {
    stride: usize,
    /// Largest consumer padding: the staged origin is `tile0 * stride - pad`.
    pad: usize,
    /// Largest `kernel - 1 - pad` over consumers, per axis.
    ext_h: i64,
    ext_w: i64,
}

fn window_of(plan: &TilingPlan, p: usize) -> Result<Window, CodegenError> {
    let mut it = plan.stages.consumers.iter().filter(|c| c.reads.contains(&p)).map(|c| c.op.window());
    let first = it.next().ok_or_else(|| CodegenError::Mismatch(format!("producer {p} has no consumer")))?;
    let mut win = Window {
        stride: first.2,
        pad: first.3,
        ext_h: first.0 as i64 - 1 - first.3 as i64,
        ext_w: first.1 as i64 - 1 - first.3 as i64,
    };
    for (kh, kw, s, pad) in it {
        if s != win.stride {
            return Err(CodegenError::Mismatch("consumers of one producer disagree on stride".into()));
        }
        win.pad = win.pad.max(pad);
        win.ext_h = win.ext_h.max(kh as i64 - 1 - pad as i64);
        win.ext_w = win.ext_w.max(kw as i64 - 1 - pad as i64);
    }
    Ok(win)
}

fn check_plan(plan: &TilingPlan, g: &Graph) -> Result<(), CodegenError> {
    if plan.graph != g.name {
        return Err(CodegenError::Mismatch(format!("plan is for graph `{}`, not `{}`", plan.graph, g.name)));
    }
    for p in &plan.stages.producers {
        match g.layer(&p.name).map(|l| &l.op) {
            Some(Op::Conv(c)) if *c == p.conv => {}
            _ => return Err(CodegenError::Mismatch(format!("producer `{}` differs from the graph", p.name))),
        }
    }
    for c in &plan.stages.consumers {
        let ok = match (g.layer(&c.name).map(|l| &l.op), &c.op) {
            (Some(Op::Conv(a)), ConsumerOp::Conv(b)) => a == b,
            (Some(Op::Add), ConsumerOp::Add) => true,
            _ => false,
        };
        if !ok {
            return Err(CodegenError::Mismatch(format!("consumer `{}` differs from the graph", c.name)));
        }
    }
    if plan.shared.len() != plan.stages.producers.len() {
        return Err(CodegenError::Mismatch("one shared layout per producer expected".into()));
    }
    Ok(())
}

/// Emits the fused kernel, its host stub and manifest. Output is a pure
/// function of the inputs.
pub fn emit_kernel(plan: &TilingPlan, g: &Graph, device: &DeviceSpec) -> Result<KernelSource, CodegenError> {
    check_plan(plan, g)?;
    let st = &plan.stages;
    let geo = &plan.geometry;
    let name = plan.kernel_name();
    let constant = plan.weights_in_constant();
    let weight_bytes = st.weight_bytes();
    if constant && weight_bytes > device.constant_capacity {
        return Err(CodegenError::ConstantOverflow { needed: weight_bytes, capacity: device.constant_capacity });
    }
    let w = Weights { constant };
    let nt = plan.threads.threads();

    let inputs: Vec<ManifestInput> = st
        .inputs()
        .into_iter()
        .map(|(n, _)| {
            let pad = st.producers.iter().filter(|p| p.input == n).map(|p| p.conv.pad).max().unwrap_or(0);
            ManifestInput { symbol: format!("in_{}", ident(&n)), name: n, pad }
        })
        .collect();
    let buffers: Vec<ManifestBuffer> = plan
        .shared
        .iter()
        .map(|l| ManifestBuffer {
            symbol: format!("s_{}", ident(&l.buffer)),
            layer: l.buffer.clone(),
            channels: l.channels,
            rows: l.rows(),
            pitch: l.pitch(),
            border: l.border,
            elements: l.physical_elements(),
        })
        .collect();
    let mut weight_layers: Vec<(&str, &ConvParams)> = st.producers.iter().map(|p| (p.name.as_str(), &p.conv)).collect();
    weight_layers.extend(st.consumers.iter().filter_map(|c| c.op.conv().map(|conv| (c.name.as_str(), conv))));
    let mut weight_symbols = Vec::new();
    for (l, conv) in &weight_layers {
        weight_symbols.push((format!("w_{}", ident(l)), conv.filter_len()));
        if conv.has_bias {
            weight_symbols.push((format!("b_{}", ident(l)), conv.bias_len()));
        }
    }
    let windows: Vec<Window> = (0..st.producers.len()).map(|p| window_of(plan, p)).collect::<Result<_, _>>()?;

    let mut k = String::new();
    let _ = writeln!(k, "// {name}: {} block {} of graph {}", plan.mode, plan.block_id, plan.graph);
    let _ = writeln!(
        k,
        "// tile {}x{} on a {}x{} grid, {} threads, {} shared bytes",
        geo.tile_h, geo.tile_w, geo.grid_h, geo.grid_w, nt, plan.shared_bytes
    );
    k.push('\n');
    if constant {
        for (sym, len) in &weight_symbols {
            let _ = writeln!(k, "__constant__ float {sym}[{len}];");
        }
        k.push('\n');
    }
    let _ = writeln!(k, "extern \"C\" __global__ void __launch_bounds__({nt}) {name}(");
    let mut params: Vec<String> = inputs.iter().map(|i| format!("    const float* __restrict__ {}", i.symbol)).collect();
    if !constant {
        params.extend(weight_symbols.iter().map(|(s, _)| format!("    const float* __restrict__ {s}")));
    }
    params.extend(plan.stored.iter().map(|t| format!("    float* __restrict__ out_{}", ident(t))));
    let _ = writeln!(k, "{})", params.join(",\n"));
    k.push_str("{\n");
    for (b, l) in buffers.iter().zip(&plan.shared) {
        let _ = writeln!(
            k,
            "    __shared__ float {}[{} * {} * {}];  // {}x{} region, border {}, pad {} row(s) + {} col",
            b.symbol,
            b.channels,
            b.rows,
            b.pitch,
            l.region_h(),
            l.region_w(),
            l.border,
            l.pad_rows,
            l.pad_cols
        );
    }
    let _ = writeln!(k, "    const int tid = threadIdx.y * blockDim.x + threadIdx.x;");
    let _ = writeln!(k, "    const int oy0 = blockIdx.y * {};", geo.tile_h);
    let _ = writeln!(k, "    const int ox0 = blockIdx.x * {};", geo.tile_w);
    let _ = writeln!(k, "    const int oy1 = min(oy0 + {}, {}) - 1;", geo.tile_h, st.out_h);
    let _ = writeln!(k, "    const int ox1 = min(ox0 + {}, {}) - 1;", geo.tile_w, st.out_w);
    for (p, win) in windows.iter().enumerate() {
        let s = ident(&st.producers[p].name);
        let _ = writeln!(k, "    const int ry_{s} = oy0 * {} - {};", win.stride, win.pad);
        let _ = writeln!(k, "    const int rx_{s} = ox0 * {} - {};", win.stride, win.pad);
    }
    k.push('\n');

    // Stage: every producer computes its halo'd region from the padded
    // global input; cells outside the producer image are written as zero.
    let _ = writeln!(k, "    {STAGE}");
    for (p, stage) in st.producers.iter().enumerate() {
        let l = &plan.shared[p];
        let b = &buffers[p];
        let s = ident(&stage.name);
        let c = &stage.conv;
        let input = inputs.iter().find(|i| i.name == stage.input).expect("inputs cover every producer");
        let (ph, pw) = (stage.output_shape.height, stage.output_shape.width);
        let (hp, wp) = (stage.input_shape.height + 2 * input.pad, stage.input_shape.width + 2 * input.pad);
        let shift = input.pad - c.pad;
        let (rh, rw) = (l.region_h(), l.region_w());
        let _ = writeln!(k, "    for (int i = tid; i < {}; i += {nt}) {{", l.channels * rh * rw);
        let _ = writeln!(k, "        const int c = i / {};", rh * rw);
        let _ = writeln!(k, "        const int r = (i / {rw}) % {rh};");
        let _ = writeln!(k, "        const int q = i % {rw};");
        let _ = writeln!(k, "        const int y = ry_{s} + r;");
        let _ = writeln!(k, "        const int x = rx_{s} + q;");
        let _ = writeln!(k, "        const float m = (float)((y >= 0) & (y < {ph}) & (x >= 0) & (x < {pw}));");
        let _ = writeln!(k, "        const int yc = min(max(y, 0), {});", ph - 1);
        let _ = writeln!(k, "        const int xc = min(max(x, 0), {});", pw - 1);
        let _ = writeln!(k, "        const int g = c / {};", c.out_per_group());
        let _ = writeln!(k, "        float acc = 0.0f;");
        let _ = writeln!(k, "        for (int icg = 0; icg < {}; ++icg)", c.in_per_group());
        let _ = writeln!(k, "            for (int ky = 0; ky < {}; ++ky)", c.kernel_h);
        let _ = writeln!(k, "                for (int kx = 0; kx < {}; ++kx)", c.kernel_w);
        let widx = format!("((c * {} + icg) * {} + ky) * {} + kx", c.in_per_group(), c.kernel_h, c.kernel_w);
        let _ = writeln!(
            k,
            "                    acc += {} * __ldg(&{}[((g * {} + icg) * {hp} + yc * {} + ky + {shift}) * {wp} + xc * {} + kx + {shift}]);",
            w.filter(&stage.name, &widx),
            input.symbol,
            c.in_per_group(),
            c.stride,
            c.stride
        );
        epilogue(&mut k, "        ", &w, &stage.name, c, "c");
        let _ = writeln!(k, "        {}[(c * {} + r) * {} + q] = m * acc;", b.symbol, b.rows, b.pitch);
        k.push_str("    }\n");
    }
    let _ = writeln!(k, "    {BARRIER}");
    k.push('\n');

    // Escaping intermediates: each tile stores the producer rows/cols it
    // owns (those not already computed by the previous tile).
    for (p, stage) in st.producers.iter().enumerate() {
        if !plan.stored.contains(&stage.name) {
            continue;
        }
        let win = &windows[p];
        let b = &buffers[p];
        let s = ident(&stage.name);
        let (ph, pw) = (stage.output_shape.height, stage.output_shape.width);
        let _ = writeln!(k, "    {STORE}{}", stage.name);
        let _ = writeln!(
            k,
            "    const int ey0_{s} = max(max(ry_{s}, 0), (blockIdx.y > 0) * (min((oy0 - 1) * {} + {}, {}) + 1));",
            win.stride,
            win.ext_h,
            ph - 1
        );
        let _ = writeln!(
            k,
            "    const int ex0_{s} = max(max(rx_{s}, 0), (blockIdx.x > 0) * (min((ox0 - 1) * {} + {}, {}) + 1));",
            win.stride,
            win.ext_w,
            pw - 1
        );
        let _ = writeln!(k, "    const int ey1_{s} = min(oy1 * {} + {}, {}) + 1;", win.stride, win.ext_h, ph - 1);
        let _ = writeln!(k, "    const int ex1_{s} = min(ox1 * {} + {}, {}) + 1;", win.stride, win.ext_w, pw - 1);
        let _ = writeln!(k, "    const int en_{s} = max(ey1_{s} - ey0_{s}, 0) * max(ex1_{s} - ex0_{s}, 0);");
        let _ = writeln!(k, "    for (int i = tid; i < {} * en_{s}; i += {nt}) {{", stage.output_shape.channels);
        let _ = writeln!(k, "        const int c = i / en_{s};");
        let _ = writeln!(k, "        const int y = ey0_{s} + (i % en_{s}) / (ex1_{s} - ex0_{s});");
        let _ = writeln!(k, "        const int x = ex0_{s} + (i % en_{s}) % (ex1_{s} - ex0_{s});");
        let _ = writeln!(
            k,
            "        out_{s}[(c * {ph} + y) * {pw} + x] = {}[(c * {} + y - ry_{s}) * {} + x - rx_{s}];",
            b.symbol, b.rows, b.pitch
        );
        k.push_str("    }\n");
    }

    let t = &plan.threads;
    let _ = writeln!(k, "    for (int ly = 0; ly < {}; ++ly)", t.loops_y);
    let _ = writeln!(k, "    for (int lx = 0; lx < {}; ++lx) {{", t.loops_x);
    let _ = writeln!(k, "        const int dy = ly * {} + threadIdx.y;", t.y);
    let _ = writeln!(k, "        const int dx = lx * {} + threadIdx.x;", t.x);
    let _ = writeln!(k, "        const int oy = oy0 + dy;");
    let _ = writeln!(k, "        const int ox = ox0 + dx;");
    let _ = writeln!(k, "        {GUARD}");
    let _ = writeln!(
        k,
        "        if (oy <= oy1 && ox <= ox1 && dy < {} && dx < {}) {{",
        geo.tile_h, geo.tile_w
    );
    for cons in &st.consumers {
        let cs = ident(&cons.name);
        let oc_count = cons.output_shape.channels;
        let _ = writeln!(k, "        {COMPUTE}{}", cons.name);
        match &cons.op {
            ConsumerOp::Conv(conv) => {
                let p = cons.reads[0];
                let b = &buffers[p];
                let off = windows[p].pad - conv.pad;
                let in_ch = st.producers[p].output_shape.channels;
                let k2 = conv.kernel_h * conv.kernel_w;
                let _ = writeln!(k, "        float win_{cs}[{}];", in_ch * k2);
                let _ = writeln!(k, "        for (int ic = 0; ic < {in_ch}; ++ic)");
                let _ = writeln!(k, "            for (int ky = 0; ky < {}; ++ky)", conv.kernel_h);
                let _ = writeln!(k, "                for (int kx = 0; kx < {}; ++kx)", conv.kernel_w);
                let _ = writeln!(
                    k,
                    "                    win_{cs}[(ic * {}) + ky * {} + kx] = {}[(ic * {} + dy * {} + ky + {off}) * {} + dx * {} + kx + {off}];",
                    k2, conv.kernel_w, b.symbol, b.rows, conv.stride, b.pitch, conv.stride
                );
                let _ = writeln!(k, "        float r_{cs}[{oc_count}];");
                let _ = writeln!(k, "        for (int oc = 0; oc < {oc_count}; ++oc) {{");
                let _ = writeln!(k, "            const int g = oc / {};", conv.out_per_group());
                let _ = writeln!(k, "            float acc = 0.0f;");
                let _ = writeln!(k, "            for (int icg = 0; icg < {}; ++icg)", conv.in_per_group());
                let _ = writeln!(k, "                for (int t = 0; t < {k2}; ++t)");
                let widx = format!("(oc * {} + icg) * {k2} + t", conv.in_per_group());
                let _ = writeln!(
                    k,
                    "                    acc += {} * win_{cs}[(g * {} + icg) * {k2} + t];",
                    w.filter(&cons.name, &widx),
                    conv.in_per_group()
                );
                epilogue(&mut k, "            ", &w, &cons.name, conv, "oc");
                let _ = writeln!(k, "            r_{cs}[oc] = acc;");
                k.push_str("        }\n");
            }
            ConsumerOp::Add => {
                let (a, b) = (&buffers[cons.reads[0]], &buffers[cons.reads[1]]);
                let (oa, ob) = (windows[cons.reads[0]].pad, windows[cons.reads[1]].pad);
                let _ = writeln!(k, "        float r_{cs}[{oc_count}];");
                let _ = writeln!(k, "        for (int c = 0; c < {oc_count}; ++c)");
                let _ = writeln!(
                    k,
                    "            r_{cs}[c] = {}[(c * {} + dy + {oa}) * {} + dx + {oa}] + {}[(c * {} + dy + {ob}) * {} + dx + {ob}];",
                    a.symbol, a.rows, a.pitch, b.symbol, b.rows, b.pitch
                );
            }
        }
        if plan.stored.contains(&cons.name) {
            let (oh, ow) = (cons.output_shape.height, cons.output_shape.width);
            let _ = writeln!(k, "        {STORE}{}", cons.name);
            let _ = writeln!(k, "        for (int oc = 0; oc < {oc_count}; ++oc)");
            let _ = writeln!(k, "            out_{cs}[(oc * {oh} + oy) * {ow} + ox] = r_{cs}[oc];");
        }
    }
    let _ = writeln!(k, "        {END}");
    k.push_str("        }\n    }\n}\n");

    let manifest = KernelManifest {
        kernel: name.clone(),
        graph: plan.graph.clone(),
        block: plan.block_id,
        mode: plan.mode.as_str().to_string(),
        device: device.name.clone(),
        tile: [geo.tile_h, geo.tile_w],
        grid: [geo.grid_w, geo.grid_h],
        block_dim: [plan.threads.x, plan.threads.y],
        shared_bytes: buffers.iter().map(|b| b.elements * ELEM_BYTES).sum(),
        barrier_count: 1,
        constant_symbols: if constant { weight_symbols.iter().map(|(s, _)| s.clone()).collect() } else { Vec::new() },
        readonly_symbols: if constant { Vec::new() } else { weight_symbols.iter().map(|(s, _)| s.clone()).collect() },
        stored: plan.stored.clone(),
        inputs,
        buffers,
    };
    let host = emit_host(&manifest, &weight_symbols);
    Ok(KernelSource { kernel: k, host, manifest })
}

fn emit_host(m: &KernelManifest, weights: &[(String, usize)]) -> String {
    let name = &m.kernel;
    let constant = !m.constant_symbols.is_empty();
    let mut h = String::new();
    let _ = writeln!(h, "// host launcher for {name}");
    let _ = writeln!(h, "#include <cuda_runtime.h>");
    let _ = writeln!(h, "#include <string.h>");
    let _ = writeln!(h, "#include \"{name}.kernel\"");
    h.push('\n');
    h.push_str("// Copies a [c, h, w] tensor into a zeroed [c, h + 2p, w + 2p] buffer.\n");
    h.push_str("static void pad_input(const float* src, float* dst, int c, int h, int w, int p)\n{\n");
    h.push_str("    const int hp = h + 2 * p, wp = w + 2 * p;\n");
    h.push_str("    memset(dst, 0, sizeof(float) * c * hp * wp);\n");
    h.push_str("    for (int k = 0; k < c; ++k)\n");
    h.push_str("        for (int y = 0; y < h; ++y)\n");
    h.push_str("            memcpy(dst + (k * hp + y + p) * wp + p, src + (k * h + y) * w, sizeof(float) * w);\n");
    h.push_str("}\n\n");
    if constant {
        let _ = writeln!(h, "void upload_{name}(");
        let params: Vec<String> = weights.iter().map(|(s, _)| format!("    const float* h_{s}")).collect();
        let _ = writeln!(h, "{})\n{{", params.join(",\n"));
        for (s, len) in weights {
            let _ = writeln!(h, "    cudaMemcpyToSymbol({s}, h_{s}, sizeof(float) * {len});");
        }
        h.push_str("}\n\n");
    }
    h.push_str("// Inputs must already be padded with pad_input; outputs are device buffers.\n");
    let _ = writeln!(h, "void launch_{name}(");
    let mut params: Vec<String> = m.inputs.iter().map(|i| format!("    const float* {}", i.symbol)).collect();
    if !constant {
        params.extend(weights.iter().map(|(s, _)| format!("    const float* {s}")));
    }
    params.extend(m.stored.iter().map(|t| format!("    float* out_{}", ident(t))));
    params.push("    cudaStream_t stream".into());
    let _ = writeln!(h, "{})\n{{", params.join(",\n"));
    for i in &m.inputs {
        let _ = writeln!(h, "    // {} padded by {}", i.name, i.pad);
    }
    let _ = writeln!(h, "    const dim3 grid({}, {});", m.grid[0], m.grid[1]);
    let _ = writeln!(h, "    const dim3 block({}, {});", m.block_dim[0], m.block_dim[1]);
    let mut args: Vec<String> = m.inputs.iter().map(|i| i.symbol.clone()).collect();
    if !constant {
        args.extend(weights.iter().map(|(s, _)| s.clone()));
    }
    args.extend(m.stored.iter().map(|t| format!("out_{}", ident(t))));
    let _ = writeln!(h, "    {name}<<<grid, block, 0, stream>>>({});", args.join(", "));
    h.push_str("}\n");
    h
}

/// A structural defect of an emitted kernel.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StructuralViolation {
    #[error("expected one staging section, found {0}")]
    StagingSections(usize),
    #[error("expected {expected} barrier(s), found {found}")]
    BarrierCount { expected: usize, found: usize },
    #[error("barrier does not separate the staging section from the consumer sections")]
    BarrierPlacement,
    #[error("shared declarations total {declared} bytes but the manifest records {manifest}")]
    SharedDeclared { declared: usize, manifest: usize },
    #[error("manifest records {manifest} shared bytes but the plan needs {plan}")]
    SharedPlan { manifest: usize, plan: usize },
    #[error("tensor `{tensor}` has {count} store sections")]
    StoreSections { tensor: String, count: usize },
    #[error("store section for `{0}`, which the plan does not store")]
    UnexpectedStore(String),
    #[error("consumer `{consumer}` has {count} compute sections")]
    ComputeSections { consumer: String, count: usize },
    #[error("section `{section}` contains branch token `{token}`")]
    Branch { section: String, token: String },
    #[error("expected one range guard, found {0}")]
    RangeGuards(usize),
    #[error("manifest field `{0}` disagrees with the plan")]
    Manifest(&'static str),
}

struct Section<'a> {
    header: &'a str,
    body: Vec<&'a str>,
}

fn sections(src: &str) -> (Vec<&str>, Vec<Section<'_>>) {
    let mut pre = Vec::new();
    let mut out: Vec<Section> = Vec::new();
    for line in src.lines() {
        let t = line.trim();
        if t.starts_with("// -- ") {
            out.push(Section { header: t, body: Vec::new() });
        } else if let Some(s) = out.last_mut() {
            s.body.push(t);
        } else {
            pre.push(t);
        }
    }
    (pre, out)
}

fn strip_comment(line: &str) -> &str {
    line.split("//").next().unwrap_or("")
}

fn has_token(line: &str, token: &str) -> bool {
    let code = strip_comment(line);
    if token == "?" {
        return code.contains('?');
    }
    code.match_indices(token).any(|(i, _)| {
        let before = code[..i].chars().next_back();
        let after = code[i + token.len()..].chars().next();
        let word = |c: Option<char>| c.is_some_and(|c| c.is_ascii_alphanumeric() || c == '_');
        !word(before) && !word(after)
    })
}

/// Verifies the structure of emitted source against its plan.
pub fn structural_check(src: &KernelSource, plan: &TilingPlan) -> Vec<StructuralViolation> {
    let mut v = Vec::new();
    let m = &src.manifest;
    let (pre, secs) = sections(&src.kernel);

    let staging = secs.iter().filter(|s| s.header == STAGE).count();
    if staging != 1 {
        v.push(StructuralViolation::StagingSections(staging));
    }

    let barriers = src.kernel.matches(BARRIER).count();
    let expected = m.barrier_count;
    if barriers != expected || expected != 1 {
        v.push(StructuralViolation::BarrierCount { expected: 1, found: barriers });
    }
    let stage_pos = src.kernel.find(STAGE);
    let barrier_pos = src.kernel.find(BARRIER);
    let compute_pos = src.kernel.find(COMPUTE);
    let placed = match (stage_pos, barrier_pos, compute_pos) {
        (Some(s), Some(b), Some(c)) => s < b && b < c,
        _ => false,
    };
    if barriers >= 1 && !placed {
        v.push(StructuralViolation::BarrierPlacement);
    }
    if let (Some(b), Some(c)) = (barrier_pos, compute_pos) {
        if src.kernel[b + BARRIER.len()..c].contains(BARRIER) || src.kernel[c..].contains(BARRIER) {
            v.push(StructuralViolation::BarrierPlacement);
        }
    }

    let mut declared = 0usize;
    for line in pre {
        let code = strip_comment(line);
        if let Some(rest) = code.strip_prefix("__shared__ float ") {
            let dims = rest.split('[').nth(1).and_then(|r| r.split(']').next()).unwrap_or("");
            let n = dims
                .split('*')
                .map(|d| d.trim().parse::<usize>().unwrap_or(0))
                .product::<usize>();
            declared += n * ELEM_BYTES;
        }
    }
    if declared != m.shared_bytes {
        v.push(StructuralViolation::SharedDeclared { declared, manifest: m.shared_bytes });
    }
    if m.shared_bytes != plan.shared_bytes {
        v.push(StructuralViolation::SharedPlan { manifest: m.shared_bytes, plan: plan.shared_bytes });
    }

    let stores: Vec<&str> = secs.iter().filter_map(|s| s.header.strip_prefix(STORE)).collect();
    for t in &plan.stored {
        let count = stores.iter().filter(|s| **s == t).count();
        if count != 1 {
            v.push(StructuralViolation::StoreSections { tensor: t.clone(), count });
        }
    }
    let known: BTreeSet<&str> = plan.stored.iter().map(String::as_str).collect();
    for s in stores.iter().filter(|s| !known.contains(*s)) {
        v.push(StructuralViolation::UnexpectedStore(s.to_string()));
    }
    for c in &plan.stages.consumers {
        let count = secs.iter().filter(|s| s.header.strip_prefix(COMPUTE) == Some(c.name.as_str())).count();
        if count != 1 {
            v.push(StructuralViolation::ComputeSections { consumer: c.name.clone(), count });
        }
    }

    let mut guards = 0;
    for s in &secs {
        for line in &s.body {
            for token in ["if", "else", "switch", "while", "?"] {
                if has_token(line, token) {
                    if s.header == GUARD && token == "if" {
                        guards += 1;
                    } else {
                        v.push(StructuralViolation::Branch { section: s.header.to_string(), token: token.to_string() });
                    }
                }
            }
        }
    }
    if guards != 1 {
        v.push(StructuralViolation::RangeGuards(guards));
    }

    let geo = &plan.geometry;
    if m.kernel != plan.kernel_name() {
        v.push(StructuralViolation::Manifest("kernel"));
    }
    if m.grid != [geo.grid_w, geo.grid_h] {
        v.push(StructuralViolation::Manifest("grid"));
    }
    if m.block_dim != [plan.threads.x, plan.threads.y] {
        v.push(StructuralViolation::Manifest("block_dim"));
    }
    if m.stored != plan.stored {
        v.push(StructuralViolation::Manifest("stored"));
    }
    let weight_syms = m.constant_symbols.len() + m.readonly_symbols.len();
    let constant = plan.weights.iter().all(|w| w.placement == WeightPlacement::ConstantMemory);
    if (constant && !m.readonly_symbols.is_empty()) || (!constant && !m.constant_symbols.is_empty()) || weight_syms == 0 {
        v.push(StructuralViolation::Manifest("weight placement"));
    }
    let buffers_ok = m.buffers.len() == plan.shared.len()
        && m.buffers.iter().zip(&plan.shared).all(|(b, l)| {
            b.layer == l.buffer && b.rows == l.rows() && b.pitch == l.pitch() && b.elements == l.physical_elements()
        });
    if !buffers_ok {
        v.push(StructuralViolation::Manifest("buffers"));
    }
    for sym in &m.constant_symbols {
        if !src.kernel.contains(&format!("__constant__ float {sym}[")) {
            v.push(StructuralViolation::Manifest("constant_symbols"));
        }
    }
    v
}
