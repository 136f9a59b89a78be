//! Expert-knowledge prompting, MLLM captioning and caption embeddings.

pub mod batch;
pub mod client;
pub mod encoder;
pub mod error;
pub mod knowledge;
pub mod pvle;
pub mod record;
pub mod stub;
pub mod template;

pub use batch::{run_batch, BatchFailure, BatchOptions, BatchReport, CaptionJob, CaptionMode};
pub use client::{CaptionService, ClientConfig, Generated, MllmClient};
pub use encoder::{FileEncoder, MockEncoder, RemoteEncoder, TextEmbedding, TextEncoder};
pub use error::{CaptionError, Result};
pub use knowledge::{Attribute, ExpertKnowledgeEntry, KnowledgeBase};
pub use pvle::{caption_hash, CaptionHash, EmbeddingStore};
pub use record::{read_jsonl, write_jsonl, CaptionRecord, CaptionWriter};
pub use template::{build_prompt, prompt_hash, CotTemplate};
