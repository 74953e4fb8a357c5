//! Lightweight self-attentive sequential recommendation.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;
pub mod twin;

pub use error::{LsanError, Result};
pub use model::{LsanModel, ModelConfig, ParamBreakdown, SeqInput, VariantKind};
pub use tensor::{Graph, Scalar, Tensor, Var};
