//! The full recommender, its training loop, checkpoints and the popularity
//! baseline.

mod checkpoint;
mod config;
mod net;
mod poprec;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::ModelConfig;
pub use net::{batch_loss, groups_loss, FrozenParts, NetParams, ScoredGroup, TapeCache, TsRec};
pub use poprec::PopRec;
pub use train::{
    batch_gradients, build_rtim, resolve_p_min, train, training_positives, EpochRecord, TrainOutcome,
};
