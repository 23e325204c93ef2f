pub mod backbone;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod federation;
pub mod gradsuite;
pub mod harness;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod parallel;
pub mod pretrain;
pub mod rng;
pub mod sivi_prompt;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
