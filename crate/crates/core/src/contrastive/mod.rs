//! Subtype-guided contrastive training of the connectome encoder.
//!
//! The objective per training sample is
//! `BCE(y, ŷ) + λ_cr ‖g − g_m‖² + λ_con · InfoNCE(g, h_subtype, Q_¬y ∪ H_¬y)`,
//! averaged over the batch. `g` comes from the trained encoder, `g_m`, queue
//! entries and prototype embeddings from its momentum copy.

pub mod encoder;
pub mod loss;
pub mod queue;
pub mod train;

pub use encoder::{ConnectomeEncoder, ConnectomeEncoderConfig, EncoderOutput};
pub use loss::{hard_negative_select, info_nce, total_loss, BatchSample, LossBreakdown};
pub use queue::LabelQueue;
pub use train::{
    continue_training, momentum_update, train, ContrastMode, EpochRecord, TrainConfig, TrainInputs, TrainOutcome, TrainSample,
    TrainState,
};
