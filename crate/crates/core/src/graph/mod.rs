//! Model graphs: the TOML description, weight storage and the runtime.

mod runtime;
mod spec;
mod weights;

pub use runtime::{FlopReport, Graph, NodeFlops, NodeSparsity, StepOutput};
pub use spec::{ModelSpec, NodeSpec, OpSpec, WeightSlot, DEFAULT_REFRESH_N, INPUT_ID};
pub use weights::{TensorEntry, WeightManifest, WeightStore, WeightTensor};

#[cfg(test)]
mod tests;
