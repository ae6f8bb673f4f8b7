//! Builds emitted kernels as OpenMP C++ and checks their stores against the
//! fused interpreter. Needs `g++` with OpenMP; runs only when
//! `LAYERFUSE_CPU_KERNELS` is set.

use std::fmt::Write as _;
use std::path::Path;
use std::process::Command;

use layerfuse_core::codegen::{emit_kernel, ident};
use layerfuse_core::sim::{run_fused, run_reference_env, seeded_inputs, TileOrder, WeightSet};
use layerfuse_core::tiling::BlockStages;
use layerfuse_core::{detect_fusion_blocks, plan_tiling, Activation, ConvParams, DeviceSpec, Graph, Layer, Op};
use layerfuse_core::{PlanOptions, TensorShape, TileGeometry};

fn conv(out: usize, k: usize, pad: usize, stride: usize) -> Op {
    Op::Conv(ConvParams::new(out, k, pad, stride))
}

fn graphs() -> Vec<Graph> {
    vec![
        Graph::new("split")
            .with_input("x", TensorShape::new(3, 11, 11))
            .with_layer(Layer::new("sq", conv(4, 3, 1, 2), &["x"]))
            .with_layer(Layer::new("e1", conv(5, 1, 0, 1), &["sq"]))
            .with_layer(Layer::new(
                "e3",
                Op::Conv(ConvParams::new(5, 3, 1, 1).with_activation(Activation::Relu)),
                &["sq"],
            ))
            .with_output("e1")
            .with_output("e3")
            .with_output("sq"),
        Graph::new("merge")
            .with_input("x", TensorShape::new(3, 9, 9))
            .with_layer(Layer::new("a", conv(4, 5, 2, 1), &["x"]))
            .with_layer(Layer::new("b", conv(4, 3, 1, 1), &["x"]))
            .with_layer(Layer::new("s", Op::Add, &["a", "b"]))
            .with_output("s"),
        Graph::new("straight")
            .with_input("x", TensorShape::new(4, 10, 10))
            .with_layer(Layer::new("a", conv(4, 3, 0, 1), &["x"]))
            .with_layer(Layer::new("b", Op::Conv(ConvParams::new(6, 3, 1, 2).with_group(2)), &["a"]))
            .with_output("b"),
    ]
    .into_iter()
    .map(|g| g.infer_shapes().unwrap())
    .collect()
}

fn floats(v: impl IntoIterator<Item = f32>) -> String {
    v.into_iter().map(|x| format!("{x:e}f")).collect::<Vec<_>>().join(",")
}

/// Driver program plus the expected output values.
fn driver(g: &Graph, tile: usize, device: &DeviceSpec) -> (String, Vec<f32>) {
    let blocks = detect_fusion_blocks(g);
    let b = blocks.iter().find(|b| b.is_fused()).unwrap();
    let st = BlockStages::resolve(g, b).unwrap();
    let geo = TileGeometry::new(tile, tile, st.out_h.div_ceil(tile), st.out_w.div_ceil(tile));
    let plan = plan_tiling(g, b, geo, device, PlanOptions { pad_rows: true }).unwrap();
    let src = emit_kernel(&plan, g, device).unwrap();
    let w = WeightSet::seeded(g, 5);
    let env = run_reference_env(g, &seeded_inputs(g, 5), &w).unwrap();
    let run = run_fused(&plan, g, &env, &w, device, TileOrder::Forward).unwrap();
    let m = &src.manifest;

    let mut d = String::from("#include \"shim.h\"\n");
    d.push_str(&src.kernel);
    d.push_str("#include <stdio.h>\n#include <string.h>\n");
    let mut args = Vec::new();
    for i in &m.inputs {
        let t = &env[&i.name];
        let (s, p) = (t.shape, i.pad);
        let (hp, wp) = (s.height + 2 * p, s.width + 2 * p);
        let mut padded = vec![0f32; s.channels * hp * wp];
        for c in 0..s.channels {
            for y in 0..s.height {
                for x in 0..s.width {
                    padded[(c * hp + y + p) * wp + x + p] = t.at(c, y, x);
                }
            }
        }
        let _ = writeln!(d, "static const float {}[] = {{{}}};", i.symbol, floats(padded));
        args.push(i.symbol.clone());
    }
    let constant = !m.constant_symbols.is_empty();
    let mut init = String::new();
    for (layer, cw) in &w.layers {
        let id = ident(layer);
        for (sym, vals) in [(format!("w_{id}"), &cw.filter), (format!("b_{id}"), &cw.bias)] {
            if !m.constant_symbols.contains(&sym) && !m.readonly_symbols.contains(&sym) {
                continue;
            }
            let _ = writeln!(d, "static const float h_{sym}[] = {{{}}};", floats(vals.iter().copied()));
            if constant {
                let _ = writeln!(init, "memcpy({sym}, h_{sym}, sizeof(h_{sym}));");
            }
        }
    }
    if !constant {
        args.extend(m.readonly_symbols.iter().map(|s| format!("h_{s}")));
    }
    let mut expected = Vec::new();
    let mut print = String::new();
    for t in &m.stored {
        let data = &run.outputs[t].data;
        let _ = writeln!(d, "static float out_{}[{}];", ident(t), data.len());
        let _ = writeln!(print, "for (int i = 0; i < {}; ++i) printf(\"%.9e\\n\", out_{}[i]);", data.len(), ident(t));
        args.push(format!("out_{}", ident(t)));
        expected.extend_from_slice(data);
    }
    let _ = writeln!(
        d,
        "int main() {{\n{init}LAUNCH({}, {}, {}, {}, {}, ({}));\n{print}return 0; }}",
        m.kernel,
        m.grid[0],
        m.grid[1],
        m.block_dim[0],
        m.block_dim[1],
        args.join(", ")
    );
    (d, expected)
}

fn build_and_run(dir: &Path, name: &str, source: &str) -> Vec<f32> {
    let cpp = dir.join(format!("{name}.cpp"));
    let exe = dir.join(name);
    std::fs::write(&cpp, source).unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/cpu");
    let st = Command::new("g++")
        .args(["-fopenmp", "-O1", "-w", "-ffp-contract=off", "-I"])
        .arg(&include)
        .arg(&cpp)
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap();
    assert!(st.success(), "g++ failed for {name}");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{name} crashed");
    String::from_utf8(out.stdout).unwrap().lines().map(|l| l.parse().unwrap()).collect()
}

#[test]
fn emitted_kernels_match_interpreter_on_cpu() {
    if std::env::var_os("LAYERFUSE_CPU_KERNELS").is_none() {
        eprintln!("skipped: set LAYERFUSE_CPU_KERNELS=1 to build kernels with g++ -fopenmp");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let mut readonly = DeviceSpec::titan_xp();
    readonly.constant_capacity = 0;
    for g in graphs() {
        for tile in [2, 3, 4] {
            for (label, device) in [("const", DeviceSpec::titan_xp()), ("ldg", readonly.clone())] {
                let name = format!("{}_{tile}_{label}", g.name);
                let (src, expected) = driver(&g, tile, &device);
                let got = build_and_run(dir.path(), &name, &src);
                assert_eq!(got.len(), expected.len(), "{name}");
                for (i, (a, b)) in got.iter().zip(&expected).enumerate() {
                    assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "{name}[{i}]: kernel {a} vs interpreter {b}");
                }
                println!("{name}: {} values match", got.len());
            }
        }
    }
}
