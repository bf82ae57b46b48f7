//! Mixture-of-LoRA-experts adapters with hypernetwork-generated anomaly
//! factors, trained on a tiny frozen-base transformer over a synthetic
//! multi-domain anomaly QA corpus.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below fix the
//! element type to `f64`, which is what training, checkpoints and the
//! verification suite use.

pub mod adapters;
pub mod autodiff;
pub mod error;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod trainpipe;

pub use adapters::{AdapterConfig, AmoeLoraAdapter, GeneratedFactors, LoraExpert, Variant};
pub use autodiff::{Graph, NodeId};
pub use model::{InjectionPoint, ModelConfig, Stage};
pub use error::{Error, Result};
pub use params::{grad_check, grad_check_entries, GradCheck, GradEntry, ParamGroup, ParamId, ParamStore, Session};
pub use scalar::Scalar;
pub use tensor::Tensor2;

pub type Tensor = Tensor2<f64>;
pub type Model = model::TinyTransformer<f64>;
pub type Checkpoint = trainpipe::Checkpoint<f64>;
pub type Optimizer = trainpipe::OptimState<f64>;
