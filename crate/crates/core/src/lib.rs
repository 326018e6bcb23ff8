//! Representation editing (RED) and parameter-efficient fine-tuning
//! baselines on a small from-scratch transformer.

pub mod audit;
pub mod checkpoint;
pub mod error;
pub mod model;
pub mod param;
pub mod peft;
pub mod rng;
pub mod scalar;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{NoHooks, TokenBatch, TransformerConfig, TransformerModel};
pub use param::{Param, ParamStore};
pub use peft::{attach_peft, frozen_digest, Method, PeftModel, PeftSpec};
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor, Var};
