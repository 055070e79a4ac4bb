//! Deterministic reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Parameters live in a [`ParamStore`] that outlives any single [`Graph`]. Each
//! training step builds a fresh graph, pulls parameters in with
//! [`Graph::param`], runs the forward ops, then calls [`Graph::backward`],
//! which adds gradients into the store. Zeroing is the caller's job.
//!
//! ```
//! use diffcore::{Graph, ParamStore, Tensor};
//!
//! let mut store = ParamStore::new();
//! let w = store.add("w", Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
//! let mut g = Graph::new();
//! let wv = g.param(&store, w).unwrap();
//! let sq = g.square(wv).unwrap();
//! let loss = g.sum(sq).unwrap();
//! g.backward(loss, &mut store).unwrap();
//! assert_eq!(store.grad(w).unwrap().data(), &[2.0, 4.0]);
//! ```

mod broadcast;
mod error;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use error::{Error, Result};
pub use graph::{rotation_coefficients, Graph, Var};
pub use optim::{adam_update, Adam, AdamConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
