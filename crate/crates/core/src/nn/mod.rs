//! Minimal feed-forward network engine.
//!
//! Models are stacks of dense layers. Hidden layers apply an activation and
//! (in training mode) inverted dropout; the final layer is linear and its
//! output is the logit vector, the input of the softmax.

mod loss;
mod model;
mod tensor;

pub use loss::{cross_entropy, logit_loss, predict, softmax, LossGrad};
pub use model::{
    param_count, Activation, AdamConfig, ForwardTrace, Gradients, LayerParams, Mode, Model,
    ModelSpec, Parameters,
};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid tensor shape {shape:?} for {len} values")]
    Shape { shape: Vec<usize>, len: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("trace was produced at model generation {trace}, model is at {model}")]
    StaleTrace { trace: u64, model: u64 },
}
