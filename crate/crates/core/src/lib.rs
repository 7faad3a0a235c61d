//! Window attention tiled along the feature dimension.
//!
//! Short sequences (one image window each) are small enough that the whole
//! `L×L` attention matrix fits on chip. Splitting Q, K and V into column
//! chunks keeps the remaining on-chip footprint small, and global memory
//! sees each of Q, K, V and O exactly once in the forward pass.
//!
//! The crate runs those kernels against an explicit memory model
//! ([`memory`]) so traffic and scratchpad occupancy are measured rather
//! than assumed, and checks them against an untiled reference
//! ([`reference`]).

pub mod error;
pub mod flash;
pub mod kernel;
pub mod memory;
pub mod reference;
pub mod tensor;
pub mod windowing;

mod batch;

pub use error::{Error, Result};
pub use flash::{
    batched_flash_backward, batched_flash_forward, flash_backward, flash_forward,
    peak_sram_backward, peak_sram_forward, BatchedFlashBackward, BatchedFlashForward, ChunkRule,
    FlashBackward, FlashContext, FlashForward, TileConfig,
};
pub use kernel::{
    batched_backward, batched_forward, AttentionKernel, KernelRegistry, KernelSettings, SavedState,
};
pub use memory::{ScratchpadArena, TrafficReport, DEFAULT_CAPACITY_BYTES};
pub use reference::{
    finite_diff_grad, naive_backward, naive_forward, softmax_backward, softmax_rows, AttnGrads,
    AttnIntermediates, AttnParams,
};
pub use tensor::{matmul, max_abs_diff, DenseTensor, Rng};
pub use windowing::{window_partition, window_reverse, WindowConfig};
