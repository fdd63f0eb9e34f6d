//! Desk-scale laboratory for subject-to-video post-training on a synthetic
//! latent-video world.

pub mod curation;
pub mod dit;
pub mod dpo;
pub mod error;
pub mod eval;
pub mod inference;
pub mod latent;
pub mod pipeline;
pub mod tensor_io;
pub mod train;
pub mod world;

pub use error::{Error, Result};
pub use latent::LatentVideo;
