//! Discrete diffusion skills: scripted offline data, skill extraction with a
//! quantized transformer encoder and diffusion action decoder, relabeling into
//! skill-level transitions, high-level IQL and hierarchical rollout.

pub mod dataset;
pub mod datastore;
pub mod diffusion;
pub mod env;
pub mod error;
pub mod iql;
pub mod relabel;
pub mod runtime;
pub mod scripts;
pub mod skill;

pub use error::{DdsError, Result};
