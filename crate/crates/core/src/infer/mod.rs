//! Fused ternary inference: kernel fusion, bitplane packing, popcount
//! kernels and the exported model.

mod bench;
mod bitplane;
mod format;
mod fuse;
mod model;
mod packed;

pub use bench::{
    bench_kernels, naive_float_gemm, packed_float_gemm, speedup, write_bench_csv, BenchPath, BenchRow,
    GemmSize, DEFAULT_SIZE,
};
pub use bitplane::{ternary_dot, BitplaneTensor};
pub use format::{decode_model, encode_model, load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use fuse::{fuse, fuse_signs, fuse_twn, TernaryKernel};
pub use model::{
    export_model, max_relative_deviation, probe_batch, verify_equivalence, BnParams, FusedLayer,
    LayerCheck, TernaryConvLayer, TernaryModel, EQUIVALENCE_TOLERANCE,
};
pub use packed::{
    pack_patches, packed_gemm, ternary_conv2d, ternary_conv2d_acc, ternary_conv2d_trits,
    ternary_weight_conv2d, ConvAccumulator, PackedKernel, PackedMatrix,
};
