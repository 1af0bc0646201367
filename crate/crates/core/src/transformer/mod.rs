//! The Transformer video module and its attention factorizations.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod memory;
pub mod module;
pub mod stream;

pub use attention::{multi_head_attention, AttentionWeights};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{comparison_count, AttentionVariant, VideoModuleConfig};
pub use memory::MemoryBuffer;
pub use module::{flatten_memory, flatten_tokens, unflatten_tokens, VideoModule};
pub use stream::{StageTimes, StreamingVideoModule};
