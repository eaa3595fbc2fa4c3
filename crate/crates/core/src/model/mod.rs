//! Decoder-only transformer with chunked cross-attention to encoded neighbors.

mod blocks;
mod checkpoint;
mod config;
mod forward;
mod neighbors;
mod params;
mod train;

pub use blocks::EncodedSlot;
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::ModelConfig;
pub use forward::{chunked_cross_attention, encode_neighbors, forward, lm_loss, loss_and_grad, per_sample_losses, per_sample_nll, Batch};
pub use neighbors::{normalize_slot, Neighbor, NeighborSet};
pub use params::{
    Attention, CrossAttention, DecoderLayer, EncoderLayer, Linear, Mlp, NeighborEncoder, Norm, RetroParams,
};
pub use train::{global_norm, train_step, StepReport, TrainHyper};

pub(crate) use forward::forward_sample;
