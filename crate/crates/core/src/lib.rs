//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Values live in a [`ParamStore`] (trainable state) or in a per-step
//! [`Graph`] (activations). A graph records every operation on a tape and
//! [`Graph::backward`] replays it in reverse to produce [`Gradients`].
//! Everything is generic over [`Scalar`] so the same model code runs in
//! single precision for training and double precision for gradient checks.

mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod param;
mod scalar;
pub mod tensor;

pub use error::{CoreError, Result};
pub use gradcheck::{grad_check, model_grad_check, param_grad_check};
pub use graph::{Gradients, Graph, SeqBatch, Var};
pub use nn::{
    Activation, EncoderConfig, EncoderLayer, LayerNorm, Linear, Mlp, MultiHeadAttention, TransformerEncoder,
    LAYER_NORM_EPS,
};
pub use optim::Adam;
pub use param::{gaussian_tensor, param_seed, ParamId, ParamStore, Parameter, INIT_STD};
pub use scalar::Scalar;
pub use tensor::Tensor;
