//! A stacked-GRU next-word classifier for sentence translation.
//!
//! The source sentence and the translation produced so far are fed through
//! one recurrent stream; the network predicts a distribution over the next
//! target word. Translations are scored as the product of those conditional
//! probabilities and decoded greedily or with beam search.

pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod gradcheck;
pub mod gru;
pub mod numerics;
pub mod training;
pub mod translator;

pub use error::{Error, Result};
