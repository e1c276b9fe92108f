//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Operations are recorded on a [`Graph`] as they are evaluated; a single
//! reverse sweep from a scalar root accumulates adjoints into every node.
//! Trainable tensors live in a [`ParamStore`] and are bound onto a fresh graph
//! for each evaluation.

mod gradcheck;
mod graph;
mod params;

pub use gradcheck::{
    grad_check, grad_check_sampled, rel_error, GradCheckReport, ParamCheck, REL_ERROR_FLOOR,
};
pub use graph::{softplus, Gradients, Graph, Var, LOG_CLAMP};
pub use params::{Bindings, ParamId, ParamStore, MANIFEST_FILE};
