//! Recursive sparse reasoning for diffusion transformers at desk scale.
//!
//! A bank of LoRA experts over the vision-branch attention projections is
//! applied recursively for several latent steps inside a joint-attention
//! block. A gating network picks one expert per token per step with
//! Gumbel-Softmax hard selection; the frozen base projection enters only at
//! the final step.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapters;
pub mod analysis;
pub mod block;
pub mod checkpoint;
pub mod diffusion;
pub mod frozenlake;
pub mod nn;
pub mod numerics;
pub mod optim;
pub mod recursion;
pub mod routing;
pub mod verify;
