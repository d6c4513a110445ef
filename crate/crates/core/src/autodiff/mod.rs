//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Two
//! sweeps run over the record:
//!
//! * [`Graph::backward`] propagates cotangents from a scalar loss back to the
//!   bound parameters and returns a [`FlatGradient`].
//! * [`Graph::tangent`] pushes a parameter-space direction forward and returns
//!   the directional derivative of any recorded value. This is what the
//!   gradient-of-gradient construction in [`Graph::grad_dot_per_weight`]
//!   reduces to when the objective is linear in its per-unit weights.
//!
//! Every forward primitive checks its output for NaN/Inf and fails instead of
//! letting non-finite values reach a gradient sign decision.

mod graph;
mod kernels;
mod params;
mod tensor;

pub use graph::{sweep_counts, BoundParams, Graph, SweepCounts, Var};
pub use params::{dot, FlatGradient, Layout, LayoutEntry, ParameterSet};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
