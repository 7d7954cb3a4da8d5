//! Training and evaluation: BCE loss, CutMix, AdamW, manifests and the loop.

mod config;
mod cutmix;
mod data;
mod loss;
mod optim;
mod trainer;

pub use config::{DataConfig, RunConfig, TrainConfig};
pub use cutmix::{cutmix, cutmix_with, CutBox, CutMixOutput};
pub use data::{synthetic_clip, synthetic_dataset, write_synthetic_corpus, Dataset, Manifest, ManifestRow, Split};
pub use loss::bce_loss;
pub use optim::{clip_grad_norm, global_norm, lr_at, AdamW};
pub use trainer::{
    evaluate, evaluate_manifest, fit, state_path, EvalMode, FitOptions, FitSummary, StepStats, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT,
    LOG_FILE, LOG_HEADER,
};
