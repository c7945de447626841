//! Adam, the training loop, checkpoints, variant switches and the model-wide
//! gradient check.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod train;
mod variant;

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, MODEL_FILE};
pub use train::{fit, fit_from, learned_adjacency, FitResult, LogRecord, TrainConfig};
pub use variant::{apply_variant, Variant, VariantFlags};
