//! Differentiable architecture search for multi-view shape recognition.
//!
//! A view sequence runs through a shared cell-based backbone, the per-view
//! features are fused by fusion cells operating along the view axis, and three
//! losses (shape classification, view classification, a retrieval hinge) are
//! balanced by learned trade-off weights. Architecture logits and loss
//! weights are searched on a validation split while network weights train on
//! the training split; the result is pruned into a discrete genotype, costed,
//! retrained and evaluated.

pub mod cost;
pub mod data;
pub mod error;
pub mod eval;
pub mod genotype;
pub mod loss_balance;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod search;
pub mod search_space;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};
