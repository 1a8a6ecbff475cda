//! Zero-shot expert linking.
//!
//! An expert encoder and an interaction-based matching metric are pre-trained
//! by discriminating instances sampled from the same expert against instances
//! of other experts, adversarially adapted toward an external text source,
//! and served for linking external mentions to a reference corpus with a
//! human feedback loop.

pub mod adapt;
pub mod cli;
pub mod corpus;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod linker;
pub mod metric;
pub mod model;
pub mod pretrain;
pub mod server;
pub mod synth;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
