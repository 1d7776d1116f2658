//! Small differentiable numerical core: dense and sparse matrices, a
//! define-by-run gradient tape, Adam, Xavier initialisation and seeded
//! random streams.
//!
//! All arithmetic is `f64`. Training is single-threaded and every reduction
//! runs in a fixed order, so a fixed seed reproduces parameters bit for bit.

pub mod adam;
pub mod gradcheck;
pub mod init;
pub mod params;
pub mod rng;
pub mod sparse;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use init::xavier_uniform;
pub use params::{Binding, ParamId, ParamStore};
pub use sparse::SparseMatrix;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::sigmoid;
