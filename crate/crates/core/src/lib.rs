//! Multi-turn contrastive training for multimodal embeddings.
//!
//! Several query/target turns about one image are packed into a single
//! dialogue so the image is encoded once per sample, and every turn
//! contributes an embedding to a masked contrastive loss.

pub mod contrast;
pub mod costmodel;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod flatfile;
pub mod gradcheck;
pub mod harness;
pub mod seed;
pub mod template;
pub mod types;

pub use error::{Error, Result};
pub use types::{EmbeddingMatrix, LossConfig, MultiTurnSample, RowLabel, TaskTag, TurnPair};
