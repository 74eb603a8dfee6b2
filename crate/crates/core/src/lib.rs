//! A desk-scale training laboratory for long-document sequence-to-sequence
//! models. Documents are encoded in independent fixed-size chunks whose
//! outputs are fused in the decoder's cross-attention; training either keeps
//! the whole graph alive (reference path) or severs each chunk after
//! encoding, caches the decoder's gradient at the encoder output, and
//! replays it chunk by chunk through recomputed encoder graphs. Both paths
//! compute the same gradients; an activation ledger makes the memory gap
//! between them measurable.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod model;
pub mod optim;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
