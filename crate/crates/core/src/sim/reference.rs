//! Naive per-layer executor: the correctness oracle for fused schedules.

use alloc::collections::BTreeMap;
use alloc::string::String;

use super::{SimError, Tensor, WeightSet};
use crate::graph::{Activation, ConvParams, Graph, Layer, Op, PoolKind, PoolParams, TensorShape};

/// Direct (grouped) convolution. Accumulation order per output element:
/// input channel, then filter row, then filter column; bias and
/// activation are applied after the sum.
pub fn conv2d(x: &Tensor, c: &ConvParams, filter: &[f32], bias: &[f32], out: TensorShape) -> Tensor {
    let mut y = Tensor::zeros(out);
    let ipg = x.shape.channels / c.group;
    let opg = c.out_channels / c.group;
    let (kh, kw) = (c.kernel_h, c.kernel_w);
    for oc in 0..c.out_channels {
        let g = oc / opg;
        for oy in 0..out.height {
            for ox in 0..out.width {
                let mut acc = 0.0f32;
                for icg in 0..ipg {
                    let ic = g * ipg + icg;
                    for ky in 0..kh {
                        let iy = (oy * c.stride + ky) as isize - c.pad as isize;
                        if iy < 0 || iy >= x.shape.height as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * c.stride + kx) as isize - c.pad as isize;
                            if ix < 0 || ix >= x.shape.width as isize {
                                continue;
                            }
                            let w = filter[((oc * ipg + icg) * kh + ky) * kw + kx];
                            acc += w * x.at(ic, iy as usize, ix as usize);
                        }
                    }
                }
                let idx = y.index(oc, oy, ox);
                y.data[idx] = epilogue(acc, bias.get(oc).copied(), c.activation);
            }
        }
    }
    y
}

#[inline]
pub(crate) fn epilogue(mut acc: f32, bias: Option<f32>, act: Activation) -> f32 {
    if let Some(b) = bias {
        acc += b;
    }
    match act {
        Activation::None => acc,
        Activation::Relu => acc.max(0.0),
    }
}

pub fn pool2d(x: &Tensor, p: &PoolParams, out: TensorShape) -> Tensor {
    let mut y = Tensor::zeros(out);
    for c in 0..out.channels {
        for oy in 0..out.height {
            for ox in 0..out.width {
                let mut max = f32::NEG_INFINITY;
                let mut sum = 0.0f32;
                let mut count = 0usize;
                for ky in 0..p.kernel {
                    let iy = (oy * p.stride + ky) as isize - p.pad as isize;
                    if iy < 0 || iy >= x.shape.height as isize {
                        continue;
                    }
                    for kx in 0..p.kernel {
                        let ix = (ox * p.stride + kx) as isize - p.pad as isize;
                        if ix < 0 || ix >= x.shape.width as isize {
                            continue;
                        }
                        let v = x.at(c, iy as usize, ix as usize);
                        max = max.max(v);
                        sum += v;
                        count += 1;
                    }
                }
                let idx = y.index(c, oy, ox);
                y.data[idx] = match p.kind {
                    PoolKind::Max => max,
                    PoolKind::Avg => sum / count.max(1) as f32,
                };
            }
        }
    }
    y
}

/// Executes one layer reading producers from `env`.
pub fn run_layer(layer: &Layer, env: &BTreeMap<String, Tensor>, w: &WeightSet) -> Result<Tensor, SimError> {
    let arg = |i: usize| -> Result<&Tensor, SimError> {
        let name = &layer.inputs[i];
        env.get(name).ok_or_else(|| SimError::MissingTensor(name.clone()))
    };
    let out = layer.shape.ok_or_else(|| SimError::MissingTensor(layer.name.clone()))?;
    let y = match &layer.op {
        Op::Conv(c) => {
            let wt = w.get(&layer.name).ok_or_else(|| SimError::MissingWeights(layer.name.clone()))?;
            let x = arg(0)?;
            if wt.filter.len() != c.filter_len() || wt.bias.len() != c.bias_len() {
                return Err(SimError::MissingWeights(layer.name.clone()));
            }
            conv2d(x, c, &wt.filter, &wt.bias, out)
        }
        Op::Pool(p) => pool2d(arg(0)?, p, out),
        Op::Relu => {
            let x = arg(0)?;
            Tensor { shape: out, data: x.data.iter().map(|v| v.max(0.0)).collect() }
        }
        Op::Add => {
            let (a, b) = (arg(0)?, arg(1)?);
            if a.shape != b.shape {
                return Err(SimError::ShapeMismatch(a.shape, b.shape));
            }
            Tensor { shape: out, data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect() }
        }
        Op::Concat => {
            let mut data = alloc::vec::Vec::with_capacity(out.elements());
            for i in 0..layer.inputs.len() {
                data.extend_from_slice(&arg(i)?.data);
            }
            Tensor { shape: out, data }
        }
    };
    if y.shape != out || y.data.len() != out.elements() {
        return Err(SimError::ShapeMismatch(y.shape, out));
    }
    Ok(y)
}

/// Runs every layer in topological order; returns all tensors (inputs included).
pub fn run_reference_env(
    g: &Graph,
    inputs: &BTreeMap<String, Tensor>,
    w: &WeightSet,
) -> Result<BTreeMap<String, Tensor>, SimError> {
    let mut env = BTreeMap::new();
    for i in &g.inputs {
        let t = inputs.get(&i.name).ok_or_else(|| SimError::MissingTensor(i.name.clone()))?;
        if t.shape != i.shape {
            return Err(SimError::ShapeMismatch(t.shape, i.shape));
        }
        env.insert(i.name.clone(), t.clone());
    }
    let order = g.topo_order().map_err(SimError::Graph)?;
    for li in order {
        let layer = &g.layers[li];
        let y = run_layer(layer, &env, w)?;
        env.insert(layer.name.clone(), y);
    }
    Ok(env)
}
