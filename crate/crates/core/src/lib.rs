//! Codified audio language modeling (CALM) at desk scale, plus the probing
//! protocol that measures how much task information its representations carry.

pub mod audio;
pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod extract;
pub mod error;
pub mod features;
pub mod key;
pub mod lm;
pub mod pipeline;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod probe;
pub mod rng;

pub use error::{Error, Result};
