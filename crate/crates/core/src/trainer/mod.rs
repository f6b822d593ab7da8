//! Optimization of adapters and perspective heads over the frozen stubs,
//! checkpoints and ablation grids.

mod ablate;
mod config;
mod model;
mod optim;
mod train;

pub use ablate::{ablate, ablation_markdown, write_ablation_csv, AblationRow, Grid};
pub use config::{Ablation, ModelDims, TrainConfig};
pub use model::{Embeddings, Model, Trainables};
pub use optim::{adamw_step, AdamState, AdamW};
pub use train::{train, Checkpoint, EpochRecord, HISTORY_COLUMNS};
