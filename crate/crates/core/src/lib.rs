//! Training-time machinery for small causal-attention language models:
//! fuzzy regime memberships, a length-aware attention prior built by
//! aligning regimes to soft positional blocks, a gain-aware temperature
//! controller, a replicator game over context lengths, and late-phase
//! schedules (LR floor, EMA, selective SWA, chaos warm-in).
//!
//! The crate is `no_std` with `alloc`. Everything here is pure computation;
//! IO, file formats and the command line live in the companion `rpa-lab`
//! crate.
//!
//! The numeric backbone is a small tape-based reverse-mode engine over
//! dense `f64` tensors ([`autodiff`], [`tensor`]).

#![no_std]
#![forbid(unsafe_op_in_unsafe_fn)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod autodiff;
pub mod error;
pub mod fuzzy;
pub mod game;
pub mod guardian;
pub mod math;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod rpa;
pub mod schedules;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::Tensor;
