//! Incremental CNN inference on event-camera streams.
//!
//! Consecutive event windows produce encoder tensors that differ only in a
//! few places. Instead of re-running the network on every window, the
//! runtime feeds the *difference* (an increment) through increment versions
//! of each operator, skipping every tile the masks prove to be zero, and
//! integrates the output increments onto the last dense output.

pub mod dense;
pub mod error;
pub mod events;
pub mod graph;
pub mod incr;
pub mod models;
pub mod sparsify;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{integrate, make_tile_mask, mask_or, DenseTensor, IncrementTensor, Shape, TileMask, TileShape};
