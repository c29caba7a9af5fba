//! MicroNet operators, architectures and analysis tools.
//!
//! The crate is organised bottom-up: [`tensor`] kernels, the factorized
//! convolutions in [`microfac`], the [`dyshiftmax`] activation, the M0–M3
//! builders in [`models`], the static cost model and verifiers in
//! [`analysis`], reverse-mode training in [`train`], and archives in
//! [`weights_io`].

// `!(x > 0.0)` is used on purpose so NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod dyshiftmax;
pub mod error;
pub mod microfac;
pub mod models;
pub mod tensor;
pub mod train;
pub mod weights_io;

pub use analysis::{count_costs, sweep_tradeoff, verify_network, verify_rank, CostReport, Sweep};
pub use dyshiftmax::{DyShiftMaxConfig, DyShiftMaxLayer};
pub use error::{Error, Result};
pub use microfac::{ConnectivityProfile, GroupRepair, MicroFacDepthwise, MicroFacPointwise};
pub use models::{build_model, ModelSpec, Network, Variant};
pub use tensor::{Activation, ConvSpec, DType, Scalar, Tensor};
pub use train::{train_loop, History, TrainConfig};
