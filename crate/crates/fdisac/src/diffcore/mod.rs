//! Reverse-mode differentiation over mixed real/complex parameter blocks.
//!
//! The engine is a flat operation tape with eagerly computed values. Complex
//! quantities live on the tape as real/imaginary pairs, which makes the
//! conjugate-Wirtinger gradient of a real objective (`g = 2 df/dz̄`) fall out
//! of plain real-valued backpropagation: `g = df/dRe + j df/dIm`.
//!
//! [`Graph::backward_graph`] emits the adjoint computation as new tape
//! operations, so gradients can be consumed by further differentiable code —
//! the mechanism behind training learner networks through an optimizer
//! trajectory.

mod blocks;
mod complex;
mod graph;

pub use blocks::{
    bundle_relative_error, evaluate, evaluate_with_gradient, finite_difference_gradient,
    BlockGradient, BlockKind, BoundBlock, GradientBundle, ParameterBlock,
};
pub use complex::{
    apply_named, cdot_h, cfrobenius_sq, chermitian, cmatmul, cnorm_sq, ctrace, CMatVar, CVar,
};
pub use graph::{Fault, Graph, Op, Var};
