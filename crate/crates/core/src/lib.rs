//! Universal multimodal adversarial attack engine for a bundled toy
//! multimodal language model, with the evaluation harness that measures it.
//!
//! The crate synthesizes a *universal* adversarial suffix and a *universal*
//! adversarial image against a small, trainable, fully differentiable victim:
//! a sign-step image attack with momentum and neighborhood gradient-variance
//! tuning, a greedy coordinate-gradient suffix attack guided by variance-tuned
//! one-hot gradients, and an alternating loop that optimizes both modalities.
//! The harness reports attack success rates (string judge and pluggable
//! fulfillment judge), transfer matrices, ensembles, and in-context
//! compositions.

pub mod artifact;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image_attack;
pub mod imagestate;
pub mod loss;
pub mod model;
pub mod orchestrator;
pub mod rng;
pub mod suffix_attack;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
