//! Patch-based byte-level language modeling with scratchpad patching.
//!
//! Bytes are encoded by a small transformer, grouped into patches, and
//! each patch is summarised into one element of a larger trunk sequence.
//! Within a patch, transient scratchpad states aggregate the bytes seen so
//! far and refresh the trunk context for the following predictions without
//! ever entering the trunk's key/value cache.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod infer;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod patchify;
pub mod scratchpad;
pub mod train;

pub use error::{Error, Result};
