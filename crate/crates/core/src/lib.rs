//! Recurrent attention strategy (RAS) for residual networks.
//!
//! A small, self-contained deep-learning stack: a reverse-mode autodiff engine
//! ([`autograd`], [`ops`]), channel-attention modules ([`attention`]),
//! pre-activation bottleneck ResNets ([`backbone`]), CIFAR ingestion
//! ([`data`]), SGD training ([`training`]) and parameter/FLOP/throughput
//! accounting ([`analysis`]).

pub mod analysis;
pub mod attention;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod ops;
pub mod selftest;
pub mod tensor;
pub mod training;

pub use attention::{AttentionConfig, AttentionKind, BnMode, Connection};
pub use autograd::{backward, GradTape, Gradients, Var};
pub use backbone::{build_model, Model, ModelSpec};
pub use error::{Error, Result};
pub use ops::{Activation, BatchNormState, Mode};
pub use tensor::{DType, Scalar, Tensor};
