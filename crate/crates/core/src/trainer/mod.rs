//! Optimisation, checkpoints and inference.

mod adam;
mod config;
mod infer;
mod model;
mod train;

pub use adam::{adam_step, clip_gradients, AdamState};
pub use config::{KSelector, Mode, TrainConfig, COMPONENTS};
pub use infer::{disentangle, disentangle_all, evaluate, score, ConversationScore, Disentangled, EvalReport};
pub use model::{embedding_table, Checkpoint, Model, RngState};
pub use train::{em_ks, train, train_supervised, train_unsupervised, LogEntry, TrainOutcome};
