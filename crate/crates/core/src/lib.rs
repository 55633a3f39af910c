//! Stacked temporal attention over clip features.
//!
//! The crate is self-contained: a small define-by-run autodiff engine
//! ([`graph`], [`params`], [`optim`], [`gradcheck`]) carries the model
//! ([`attention`], [`init`], [`heads`], [`model`]), trained and evaluated on
//! synthetic needle-clip tasks ([`data`]) by the [`experiment`] harness.

pub mod attention;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod init;
pub mod model;
pub mod optim;
pub mod params;
pub mod reference;
pub mod rng;
pub mod tensor;

pub use attention::{
    attention_scores, layer_forward, stack_forward, AttentionTrace, ClipFeatures,
    GlobalAttentionLayer, StamStack,
};
pub use error::{Result, StamError};
pub use graph::{Graph, Var};
pub use init::InitializerKind;
pub use model::{Dims, Model, ModelSpec};
pub use params::ParamStore;
pub use tensor::Tensor;
