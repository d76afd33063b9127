//! Minimal reverse-mode automatic differentiation for the CNNs in this crate.
//!
//! The design is deliberately small: a flat arena of tensors, a fixed op
//! vocabulary (convolution, dense, pointwise nonlinearities, pooling,
//! upsampling, concatenation, and two fused loss heads), and a single-pass
//! backward sweep. Everything runs on one thread in a fixed order, so
//! repeated runs produce bit-identical results. The scalar type is generic:
//! training uses f32, gradient checking re-runs the same graph code in f64.

mod adam;
mod conv;
mod gradcheck;
mod graph;
mod params;
mod scalar;

pub use adam::{Adam, AdamConfig};
pub use conv::ConvShape;
pub use gradcheck::{check as gradcheck, GradCheckReport, DEFAULT_STEP};
pub use graph::{Graph, SlotTargets, Tensor};
pub use params::{kaiming_uniform, ParamStore, ParamTensor};
pub use scalar::Scalar;
