//! Zero-shot phrase localization on contrastive vision-language weights.
//!
//! Per-pixel spatial embeddings come from masked region-token attention
//! (ViT) or per-patch value pooling (ResNet); their cosine similarity with a
//! text embedding forms a positive score map, and the best box is found by
//! subwindow search over that map.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod bundle;
pub mod error;
pub mod eval;
pub mod features;
pub mod imageio;
pub mod parity;
pub mod pipeline;
pub mod rawio;
pub mod resnet;
pub mod score;
pub mod search;
pub mod superpixel;
pub mod synthetic;
pub mod tensor;
pub mod text;
pub mod tokenizer;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::Tensor;
