//! Frequency-domain feature masking for cross-domain few-shot segmentation.
//!
//! The crate provides an amplitude-phase masker (APM) and a channel phase
//! attention block (ACPA) with analytic gradients, an episodic Adam
//! adaptation loop, channel-correlation diagnostics and a deterministic
//! synthetic benchmark.

pub mod adapt;
pub mod diagnostics;
pub mod error;
pub mod maskers;
pub mod report;
pub mod seghead;
pub mod spectral;
pub mod synthbench;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ComplexTensor, Tensor};
