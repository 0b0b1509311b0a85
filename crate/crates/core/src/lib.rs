//! Contrastive pre-training with neighborhood pseudo-labels.
//!
//! Each instance is grouped with its nearest same-class neighbors under a
//! combined semantic x appearance similarity; the groups act as positives for
//! a momentum-encoder contrastive objective with a FIFO memory bank of
//! negatives. Self-supervised (singleton groups) and fully supervised (class
//! groups) objectives fall out as the two ends of the neighbor count.

mod binfmt;
pub mod data;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod memory_bank;
pub mod mining;
pub mod trainer;

pub use embedding::{EmbeddingMatrix, LabelVector};
pub use encoder::{EncoderParams, MomentumPair};
pub use error::{Error, Result};
pub use losses::{Denominator, LossConfig, LossOutput, PseudoLabeledBatch};
pub use memory_bank::{BankInit, MemoryBank};
pub use mining::{Neighbor, NeighborTable};
pub use trainer::{Mode, TrainConfig};
