//! Reverse-mode automatic differentiation over dense `ndarray` tensors.
//!
//! Values live in a dynamically built graph of reference-counted nodes. The
//! backward rule of every operation is itself written with graph operations,
//! so gradients can be differentiated again (`grad(.., create_graph = true)`),
//! which is what gradient penalties such as R1 or the eikonal term need.
//!
//! Graphs are single-threaded (`Var` is `!Send`); parameters shared between
//! threads are kept as `Arc<ArrayD<T>>` and wrapped into leaves per pass.

mod conv;
mod element;
mod graph;
mod ops;

pub use conv::Conv2dSpec;
pub use element::Element;
pub use graph::{grad, grad_enabled, no_grad, Var};
pub use ops::reduce_to_shape;

pub use ndarray;
