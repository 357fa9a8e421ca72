//! Multi-task molecular property prediction with task-specific sparse token
//! masks: SMILES tokenization, a small transformer encoder trained by reverse
//! mode differentiation, per-task sigmoid gates under an L1 penalty, masked
//! BCE training with AdamW, macro ROC-AUC evaluation and per-token
//! attribution reports.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod explain;
pub mod gradcheck;
pub mod heads;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod split;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use encoder::{EncoderConfig, ModelError, TokenBatch};
pub use heads::{HeadConfig, MaskNorm};
pub use labels::LabelMatrix;
pub use model::{Model, ModelConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Tensor, TensorError};
