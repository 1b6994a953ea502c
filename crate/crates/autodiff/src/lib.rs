//! Tape-based reverse-mode automatic differentiation over dense `f64`
//! matrices, sized for desk-scale transformer classifiers.
//!
//! A [`Graph`] records every operation as it runs. [`Graph::backward`] walks
//! the tape once in reverse and returns gradients keyed by parameter name.

mod error;
mod graph;
mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{Gradients, Graph, Segment, Var, LAYER_NORM_EPS, LOG_EPS};
pub use tensor::Tensor;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
