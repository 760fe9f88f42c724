//! Sparse tensors and the kernels that operate on them.

mod conv;
mod flops;
mod pool;
mod tensor;

pub use conv::{
    apply_conv, dilated_halving, dilation_keep_count, kernel_offsets, kernel_volume, relu, rulebook_for,
    select_dilation_set, site_magnitudes, strided_conv_downsample, submanifold_conv, submanifold_conv_at,
    ConvLayer, ConvMode, PrunedContribution, Rulebook,
};
pub(crate) use conv::apply_conv_with_rulebook;
pub use flops::{count_flops, FlopsReport, LayerFlops, Part, StageStats};
pub use pool::{height_compress, sparse_max_pool};
pub use tensor::{canonical_cmp, Coord, Dims, Duplicates, Layout, SparseTensor};
