//! Failure discovery and budgeted recovery learning for chains of
//! open-loop skills.
//!
//! The pipeline: learn skill preconditions by chaining backwards from the
//! goal ([`precondition`]), execute the chain under noisy state estimates to
//! find failure states and cluster them ([`discovery`]), then spend a
//! training budget on recovery skills ([`recovery`], [`reps`]) chosen by the
//! Value-UCL allocator ([`allocator`]) over a symbolic skill graph
//! ([`skill_graph`]). [`env`] is the built-in latch-world simulator and
//! [`harness`] wires everything into experiment pipelines.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocator;
pub mod classifiers;
pub mod discovery;
pub mod env;
mod error;
pub mod harness;
pub mod par;
pub mod persistence;
pub mod precondition;
pub mod recovery;
pub mod reps;
pub mod skill_graph;
pub mod stats;
pub mod synthetic;

pub use error::{Error, Result};
pub use par::Exec;
