//! Layer operators with their forward semantics and, for training, their
//! backward passes.
//!
//! Public functions are eval-mode operators. The crate-internal
//! `*_forward`/`*_backward` pairs take a [`Mode`] and optionally record what
//! the backward pass needs.

mod activation;
mod balance;
mod dense;
mod edge;
mod norm;
mod params;
mod pool;
mod sage;

pub use activation::prelu;
pub use balance::{balance, BalanceAxis};
pub use dense::dense;
pub use edge::{binedgeconv, edge_conv_emulated, edgeconv_float, xoredgeconv, EdgeKind};
pub use norm::batch_norm;
pub use params::{
    Activation, BalanceMode, BatchNormParams, BnPlacement, BnSite, BnUpdate, LayerFlags, LayerGrads, LayerParams, Mode,
    Quantization, Quantizer, TensorMut, TensorRef, TensorRole, BN_EPSILON, BN_MOMENTUM,
};
pub use pool::global_pool_classify;
pub use sage::{binsage, sage_float, Adjacency};

pub(crate) use activation::dropout;
pub(crate) use balance::{balance_segments, balance_segments_backward, BalanceCache};
pub(crate) use dense::{dense_backward, dense_forward, dense_forward_packed, DenseCache};
pub(crate) use edge::{edge_backward, edge_forward, edge_forward_packed, EdgeCache, PackedInput};
pub(crate) use pool::{global_pool_backward, global_pool_forward, PoolCache};
pub(crate) use sage::{sage_backward, sage_forward, SageCache};

use crate::tensor::DenseTensor;

/// Result of a layer forward pass.
#[derive(Debug)]
pub(crate) struct LayerOutput<C> {
    pub y: DenseTensor,
    pub cache: Option<C>,
    /// Batch statistics to fold into the layer's running statistics.
    pub updates: Vec<BnUpdate>,
}
