//! Small from-scratch neural toolkit: dense and GRU layers on a reverse-mode
//! tape, AdamW, cosine learning-rate annealing, and checkpoints.

pub mod checkpoint;
pub mod layers;
pub mod optim;
pub mod tape;

pub use checkpoint::Checkpoint;
pub use layers::{gru_step, DenseLayer, GruCell};
pub use optim::{cosine_lr, AdamWConfig, OptimizerState};
pub use tape::{Activation, Grads, NodeGrads, NodeId, ParamId, ParamStore, Tape};
