//! Cross-layer fusion of CNN inference graphs for GPU memory hierarchies.
//!
//! The pipeline: [`graph`] parses nothing but models, validates and
//! shape-infers a compute graph; [`fusion`] folds activations and partitions
//! the graph into straight/split/merge blocks; [`tiling`] computes
//! overlapped tile plans with halos and shared-memory layouts; [`cost`]
//! models memory transactions and time and tunes tile sizes; [`sim`]
//! executes plans on the CPU against a naive reference; [`codegen`] emits
//! the fused kernel source.
#![no_std]

extern crate alloc;

pub mod codegen;
pub mod cost;
pub mod device;
pub mod fusion;
pub mod graph;
pub mod sim;
pub mod tiling;

pub use device::DeviceSpec;
pub use fusion::{detect_fusion_blocks, fold_elementwise, FusionBlock, FusionMode};
pub use graph::{Activation, ConvParams, Graph, Layer, Op, PoolKind, PoolParams, TensorShape};
pub use tiling::{enumerate_tilings, plan_tiling, PlanOptions, TileGeometry, TilingPlan};
