//! Desk-scale model production: an SGD trainer for MLPs, planted-duplicate
//! construction and synthetic datasets.

mod plant;
mod synth;
mod trainer;

pub use plant::{plant_duplicates, DEFAULT_MAX_WIDTH};
pub use synth::{make_synthetic_dataset, SyntheticKind};
pub use trainer::{init_mlp, loss_and_gradients, train_mlp, TrainConfig};
