//! Masked discrete-diffusion multi-view image generation at desk scale.
//!
//! Images are tokenized into discrete visual codes, arranged with text into
//! task templates, and modelled by a bidirectional transformer trained to
//! recover masked tokens. Generation starts from fully masked target views
//! and alternates prediction with confidence-ranked re-masking.

pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod image;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod sampler;
pub mod sequence;
pub mod tokenizer;
pub mod trainer;
pub mod vocab;

pub use error::{CheckpointError, Error, Result};
pub use image::ImageGrid;
pub use vocab::{Special, TokenId, TokenKind, Vocab};
