//! Declarative model definitions, loss assembly and training.

mod checkpoint;
mod defs;
pub mod losses;
mod model;
mod schema;
mod train;

pub use checkpoint::{Checkpoint, CheckpointError, NamedNetwork, CHECKPOINT_FORMAT};
pub use defs::*;
pub use model::{grid_columns, linspace, sample_batch, Batch, BuildError, Learnable, LossEval, Model, Plan};
pub use schema::SchemaError;
pub use train::{pretrain, pretrain_all, train, train_for, write_losses_csv, LossReport, TrainError, TrainResult};
