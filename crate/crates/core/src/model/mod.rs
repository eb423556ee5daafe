//! Encoder-decoder model, its autodiff engine, optimizer and checkpoints.

pub mod batch;
pub mod checkpoint;
pub mod graph;
pub mod lr;
pub mod optim;
pub mod transformer;

pub use batch::SequenceBatch;
pub use checkpoint::{average_params, Checkpoint};
pub use lr::{lr_at, LrCurve};
pub use optim::{AdamW, AdamWConfig};
pub use transformer::{EncodedSource, ModelConfig, ModelParams, Transformer};
