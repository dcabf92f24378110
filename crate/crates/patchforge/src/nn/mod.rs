//! Minimal neural-network stack with hand-written backward passes.
//!
//! The attack only ever needs two things from a network: logits, and the
//! gradient of a scalar objective with respect to the *input pixels*. Both
//! toy architectures therefore implement explicit `forward`/`backward`
//! methods over `ndarray` tensors — no autograd, no external framework —
//! which keeps runs bit-deterministic on a single thread and lets gradient
//! tests instantiate the whole network at 64-bit precision for
//! finite-difference verification.

pub mod attention;
pub mod cnn;
pub mod ops;

/// Float type the stack is generic over: `f32` in production, `f64` in
/// gradient-oracle tests.
pub trait Scalar: ndarray::NdFloat + rand::distr::uniform::SampleUniform {}
impl Scalar for f32 {}
impl Scalar for f64 {}

/// Round a spatial size up to the next multiple of `m` (at least `m`).
pub(crate) fn pad_to_multiple(size: usize, m: usize) -> usize {
    size.div_ceil(m) * m
}
