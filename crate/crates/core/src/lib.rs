//! Co-evolving generative-recommendation tokenizer, compute core.
//!
//! Everything in this crate is pure computation over owned buffers and runs
//! without `std`: a small reverse-mode autodiff layer ([`graph`]), the
//! residual k-means quantizer ([`rqkmeans`]), the three learned components
//! ([`csa`], [`tokenizer`], [`recommender`]), the one-to-many item/SID
//! store ([`index`]), the two-phase trainer ([`coevolution`]), synthetic
//! data ([`datagen`]) and ranking/codebook metrics ([`eval`]).
//!
//! File formats, configuration files and the CLI live in the `coevo` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod coevolution;
pub mod csa;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod index;
pub mod math;
pub mod optim;
pub mod recommender;
pub mod rng;
pub mod rqkmeans;
pub mod sid;
pub mod tensor;
pub mod tokenizer;
mod transformer;

pub use error::{Error, Result};
pub use sid::{CodebookSpec, SidSequence};
