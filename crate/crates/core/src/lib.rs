//! Desk-scale multi-conditional rectified-flow transformer.
//!
//! The stack, bottom up:
//!
//! - [`tensor`] / [`tape`]: dense `f64` arrays with a reverse-mode gradient
//!   tape and a finite-difference oracle.
//! - [`attention`]: rotary position embedding, joint attention over
//!   `[noise; material; conditions]` token blocks, and the mask builders
//!   (zero, causal, mutual) that shape information flow.
//! - [`shader_lora`]: low-rank Q/K/V adaptation applied only to condition
//!   branch tokens, with per-condition strengths.
//! - [`flow`]: the rectified-flow path, conditional flow-matching loss, and
//!   Euler sampler.
//! - [`model`]: the toy multimodal transformer and its training loop.
//! - [`kvcache`]: timestep-invariant condition key/value caching with an
//!   exact-equivalence contract against the uncached sampler.
//! - [`ensemble`]: test-time alignment for depth predictions, cosine
//!   selection for normals, and the lighting decomposition identity.
//! - [`verify`]: the named property checks behind the `verify` CLI command.

pub mod attention;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod flow;
pub mod io;
pub mod kvcache;
pub mod model;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod shader_lora;
pub mod tape;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tape::Tape;
pub use tensor::Tensor;
