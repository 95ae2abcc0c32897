//! Deterministic simulator for federated learning across clients with
//! heterogeneous model architectures that share per-class logits instead of
//! weights.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: a small dense-network engine that exposes pre-softmax logits.
//! - [`data`]: IDX loading, synthetic clusters, mean subtraction, IID splits.
//! - [`protocol`]: client logit accumulation, the server logit store and the
//!   communication ledger.
//! - [`trainer`]: per-client training steps and the client round procedure.
//! - [`orchestrator`]: event-driven runs of the logit-exchange method and the
//!   FedAvg, Private and FedMD-lite baselines.
//! - [`config`]: experiment configuration parsing and validation.

pub mod config;
pub mod data;
pub mod nn;
pub mod orchestrator;
pub mod protocol;
pub mod seed;
pub mod trainer;

pub use config::ExperimentConfig;
pub use nn::{Activation, ForwardTrace, Mode, Model, ModelSpec, Parameters, Tensor};
pub use orchestrator::{run, Experiment, RunError, RunOutput};
pub use protocol::Method;
