use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Op, TensorShape};

/// Dense fp32 tensor, channel-major then row then column.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: TensorShape,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: TensorShape) -> Self {
        Tensor { shape, data: alloc::vec![0.0; shape.elements()] }
    }

    pub fn from_data(shape: TensorShape, data: Vec<f32>) -> Option<Self> {
        (data.len() == shape.elements()).then_some(Tensor { shape, data })
    }

    /// Uniform values in `[-0.5, 0.5]` from a seeded stream.
    pub fn seeded(shape: TensorShape, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let data = (0..shape.elements()).map(|_| rng.random_range(-0.5f32..=0.5)).collect();
        Tensor { shape, data }
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }
}

/// Filter `[out, in/group, kh, kw]` and bias `[out]` of one conv layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvWeights {
    pub filter: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Weights of every conv layer, keyed by layer name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightSet {
    pub layers: BTreeMap<String, ConvWeights>,
}

/// Stream id used for seeded weights; inputs use the graph-input index + 1.
const WEIGHT_STREAM: u64 = 0;

impl WeightSet {
    /// Deterministic weights for every conv in document order.
    pub fn seeded(g: &Graph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(WEIGHT_STREAM);
        let mut layers = BTreeMap::new();
        for l in &g.layers {
            if let Op::Conv(c) = &l.op {
                let filter = (0..c.filter_len()).map(|_| rng.random_range(-0.5f32..=0.5)).collect();
                let bias = (0..c.bias_len()).map(|_| rng.random_range(-0.5f32..=0.5)).collect();
                layers.insert(l.name.clone(), ConvWeights { filter, bias });
            }
        }
        WeightSet { layers }
    }

    pub fn get(&self, layer: &str) -> Option<&ConvWeights> {
        self.layers.get(layer)
    }

    /// Layers whose weights are missing or sized differently from the graph.
    pub fn mismatches(&self, g: &Graph) -> Vec<String> {
        g.layers
            .iter()
            .filter_map(|l| {
                let c = l.conv()?;
                let ok = self
                    .get(&l.name)
                    .is_some_and(|w| w.filter.len() == c.filter_len() && w.bias.len() == c.bias_len());
                (!ok).then(|| l.name.clone())
            })
            .collect()
    }
}

/// Seeded tensors for every graph input.
pub fn seeded_inputs(g: &Graph, seed: u64) -> BTreeMap<String, Tensor> {
    g.inputs
        .iter()
        .enumerate()
        .map(|(i, input)| (input.name.clone(), Tensor::seeded(input.shape, seed, i as u64 + 1)))
        .collect()
}
