//! The conditional denoiser: parameters, prompt embeddings, low-rank
//! adapters, forward passes, and the checkpoint format.

pub mod checkpoint;
pub mod embed;
pub mod forward;
pub mod lora;
pub mod params;

pub use checkpoint::{Checkpoint, CkptError, LoadError};
pub use embed::{is_placeholder, EmbeddingTable, Prompt, PromptError, PromptRole, NULL_TOKEN};
pub use forward::{bind, forward_on_tape, forward_raw, BoundDenoiser, LeafTarget, Mode, TrainableLeaf};
pub use lora::{init_lora, LoraAdapter, LoraPair, DEFAULT_RANK, DEFAULT_SCALE};
pub use params::{DenoiserParams, ModelConfig};
