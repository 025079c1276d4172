//! Contrastive objectives, AdamW with warmup-linear schedule, the training
//! loop and checkpoints.

mod checkpoint;
mod config;
mod loss;
mod optim;
mod trainer;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint,
    Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{DataConfig, RunConfig, RunSection};
pub use loss::{
    contrastive_loss, cross_contrastive_loss, final_loss, variant_loss, BatchEmbeddings, LossConfig,
};
pub use optim::{adamw_update, clip_global_norm, OptimConfig};
pub use trainer::{batch_pass, BatchPass, StepMetrics, TrainState, Trainer};
