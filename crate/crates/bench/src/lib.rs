//! Shared fixtures for the criterion benches.

use micronet_core::{Scalar, Tensor};

/// Deterministic pseudo-random input in `[-1, 1)`, no RNG crate needed.
pub fn fixture<T: Scalar>(shape: [usize; 4], seed: u64) -> Tensor<T> {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    Tensor::from_fn(shape, |_, _, _, _| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        T::from_f64_lossy((state >> 11) as f64 / (1u64 << 52) as f64 - 1.0)
    })
}
