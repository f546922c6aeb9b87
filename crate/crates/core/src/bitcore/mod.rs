//! Bit-packed ±1 tensors and the exact XNOR/popcount kernels built on them.

mod bitmatrix;
mod kernels;
mod rescale;

pub use bitmatrix::{words_for, BitMatrix, BitRow};
pub use kernels::{
    binary_gemm, hamming_distance, pairwise_hamming, sign, sign_quantize, xnor_dot, xnor_gemm_int,
    xor_popcount_matrix,
};
pub use rescale::RescaleTensor;
