//! Semantic-guided diversity visual prompt tuning for source-free
//! cross-domain few-shot classification.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: tensors, a reverse-mode gradient tape, Adam, seeded RNG.
//! - [`encoders`]: the frozen surrogate dual encoder (vision + text).
//! - [`prompts`]: trainable diversity prompts and deep prompts.
//! - [`semantic`]: description corpora, text feature stages, adapter,
//!   top-c + Gamma target selection.
//! - [`losses`]: diversity, semantic contrastive, targeted supervised
//!   contrastive and ArcFace objectives.
//! - [`pipeline`]: two-step training, feature generation, inference and the
//!   ablation variants.
//! - [`episodes`]: synthetic domains, episode sampling and evaluation.
//! - [`cli`]: run configuration and the command implementations behind the
//!   `promptforge` binary.

pub mod cli;
pub mod encoders;
pub mod episodes;
mod error;
pub mod losses;
pub mod numerics;
pub mod pipeline;
pub mod prompts;
pub mod semantic;

pub use error::{Error, Result};
