//! Training: data, schedule, optimizer, checkpoints and the loop itself.

pub mod checkpoint;
pub mod data;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{batch_for_step, load_image, sample_patch, save_image, Batch, Dataset, ImagePairRecord};
pub use optim::{AdamW, AdamWConfig};
pub use schedule::cosine_lr;
pub use trainer::{
    checkpoint_path, dataset_psnr, effective_loss, evaluate_loss, final_checkpoint_path, fit, overfit_synthetic, train_step,
    OverfitReport, StepStats, TrainConfig, TrainReport, LOG_HEADER, OVERFIT_LR_INIT,
};
