//! Personalized text classification with user identifiers: each user gets a
//! fixed sequence of ordinary vocabulary tokens that is inserted into every
//! one of their samples, and a single shared classifier learns to condition
//! on it.

pub mod augment;
pub mod data;
pub mod error;
pub mod federated;
pub mod harness;
pub mod identifiers;
pub mod model;
pub mod seed;
pub mod ids;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use ids::{TokenId, TokenSeq, UserId};
