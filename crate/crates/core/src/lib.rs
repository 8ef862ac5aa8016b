//! Two-tower contrastive language-image training with a parameter-efficient
//! causal text encoder, followed by shared prompt-context tuning.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod objectives;
pub mod params;
pub mod peft;
pub mod prompt_tuning;
pub mod tensor;
pub mod training;

pub use autograd::{Graph, Var};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use eval::{EvalReport, Protocol, RatioReport};
pub use model::{ClipModel, ModelConfig};
pub use params::{ComponentTag, Parameter, ParameterStore, Session};
pub use peft::{AdapterConfig, FreezePolicy};
pub use tensor::Tensor;
