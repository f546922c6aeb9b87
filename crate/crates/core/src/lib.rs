//! Binary graph neural networks on the CPU.
//!
//! * [`bitcore`]: bit-packed ±1 matrices and XNOR/popcount/Hamming kernels.
//! * [`graph`]: exact k-NN graphs in ℓ2 and Hamming space.
//! * [`ops`]: EdgeConv, BinEdgeConv, XorEdgeConv, SAGE and BinSAGE operators,
//!   batch norm, balance functions, pooling.
//! * [`model`]: DGCNN-style models assembled from those operators.
//! * [`training`]: straight-through gradients, distillation losses, Adam and
//!   the three-stage cascaded distillation driver.
//! * [`io`]: model files, point-cloud datasets and run configuration.

pub mod bitcore;
pub mod error;
pub mod graph;
pub mod io;
pub mod linalg;
pub mod model;
pub mod ops;
pub mod profile;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::DenseTensor;
