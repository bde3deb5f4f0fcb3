//! Minimal neural-network toolkit: parameter stores, a reverse-mode tape and Adam.

mod adam;
mod graph;
mod params;

pub use adam::{Adam, AdamConfig};
pub use graph::{log_softmax, softmax, Graph, Var};
pub use params::{Grads, ParamId, ParamStore, Tensor};
