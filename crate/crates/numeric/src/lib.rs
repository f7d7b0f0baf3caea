//! Minimal dense-tensor engine with tape-based reverse-mode automatic
//! differentiation.
//!
//! ```
//! use mdw_numeric::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.param(Tensor::row(vec![1.0, 2.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let y = g.sum(sq).unwrap();
//! let grads = g.grads(y, &[x]).unwrap();
//! assert_eq!(grads[0].data(), &[2.0, 4.0]);
//! ```

mod error;
pub mod fd;
mod graph;
mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, OpKind, Var, PAD};
pub use tensor::Tensor;
