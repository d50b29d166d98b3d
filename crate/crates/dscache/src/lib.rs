//! Streaming KV-cache construction for unbounded token streams.
//!
//! The crate implements a small, fully deterministic RoPE transformer together
//! with a family of cache-construction policies that keep memory and rotary
//! positions bounded while a stream of frame blocks grows without limit:
//!
//! - [`policy::UniformPolicy`] — classic streaming prefill: a frozen sink
//!   cache plus a FIFO window of the most recent frames.
//! - [`policy::OfflinePolicy`] — sliding-window recompute: no persistent KV;
//!   every query re-encodes the retained frames from scratch.
//! - [`policy::DscachePolicy`] — decoupled construction: a cumulative cache
//!   updated incrementally as frames leave a FIFO feature buffer, and an
//!   instant cache rebuilt from the buffer at query time, assembled as
//!   `[sink | cumulative | instant]` with consecutive positions from zero.
//! - [`policy::ApproxPolicy`] — the decoupled scheme with the instant part
//!   maintained incrementally and rebuilt only every `refresh_period` frames.
//!
//! Keys are stored without rotary encoding and rotated at use time, which
//! makes cache segments relocatable: any assembled cache can be addressed
//! with fresh consecutive positions regardless of how many tokens the stream
//! has ever carried. Everything downstream of a seed is bit-reproducible —
//! fixed summation order in the kernels, counter-based random generation, and
//! stable report serialization — so paired policy runs can be compared
//! token-for-token and byte-for-byte.
//!
//! The [`harness`] module drives scenarios described as JSON documents and
//! emits structured reports; the `dscache` binary is a thin CLI over it.

pub mod error;
pub mod harness;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod policy;
pub mod rope;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Scalar;
