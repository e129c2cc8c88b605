//! Optimization and the two-phase training schedule.

mod adam;
mod checkpoint;
mod phases;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{
    decode as decode_checkpoint, encode as encode_checkpoint, load_checkpoint, save_checkpoint,
    Checkpoint, Phase, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use phases::{
    build_graphs, format_epoch_line, pretrain, train, write_log_file, EpochLog, SceneData,
};
