//! Micro-Block builders and the M0–M3 architectures.

mod network;
mod spec;

pub use network::{build_block, build_model, build_stem, BatchNorm, Layer, Mode, Network, Op, Role, TapeForward};
pub use spec::{architecture_table, ActKind, BlockKind, BlockSpec, BuildOptions, ModelSpec, Norm, StemSpec, Variant};
