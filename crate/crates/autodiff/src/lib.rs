//! Minimal reverse-mode automatic differentiation over dense `f64` arrays,
//! plus the layers, optimizer and checkpoint container the DDS models use.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{sinusoidal_embedding, Gradients, Graph, Mode, Var};
pub use nn::{Binder, LayerNorm, Linear, Mlp};
pub use optim::{ema_update, AdamConfig, AdamState};
pub use param::{ParamId, ParamStore, Parameter};
pub use rng::{SeedStreams, StreamRng};
pub use tensor::Tensor;
