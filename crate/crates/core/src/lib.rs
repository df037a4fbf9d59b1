//! A desk-scale mixture-of-experts language-modeling laboratory.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), a
//! decoder-only transformer with top-2 routed expert layers ([`model`]), the
//! Adam recipe with expert-gradient and optimizer-state rescaling
//! ([`optim`]), analytic training-cost accounting ([`flops`]), evaluation
//! protocols ([`eval`]), knowledge distillation ([`distill`]) and the
//! corpus/tokenizer/training/checkpoint plumbing ([`pipeline`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod distill;
pub mod error;
pub mod eval;
pub mod flops;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
