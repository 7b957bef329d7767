//! Reverse-mode automatic differentiation over small dense matrices.

mod graph;

pub use graph::{GradStore, Graph, GraphError, NodeId};
