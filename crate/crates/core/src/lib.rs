//! Sequence transducer toolkit built around the hybrid autoregressive
//! transducer (HAT): a transducer whose blank is a separate Bernoulli head and
//! whose labels get their own normalised distribution, which in turn exposes an
//! internal language model that can be swapped for an external one at decoding
//! time. CTC and RNN-T baselines share the same lattice and network code.

pub mod error;
pub mod lattice;
pub mod network;
pub mod numeric;
pub mod posterior;
pub mod loss;
pub mod ilm;
pub mod gradcheck;
pub mod ngram;
pub mod decoder;
pub mod data;
pub mod config;
pub mod train;
pub mod pipeline;
pub mod selftest;

pub use error::{HatError, Result};
