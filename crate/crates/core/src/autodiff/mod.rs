//! Reverse-mode differentiation over a dynamically built graph, with the
//! three primitives chunked training needs — severing a tensor from its
//! upstream graph ([`Tensor::sever`]), retaining gradients at non-parameter
//! nodes ([`Tensor::mark_retain`]), and launching backpropagation from a
//! non-scalar node with a supplied seed ([`backward_from`]) — plus a live
//! count of saved activations ([`Ledger`]).

mod api;
mod graph;
mod ledger;
mod ops;
mod tensor;

pub use api::*;
pub use graph::{apply, backward, backward_from};
pub use ledger::{Ledger, LedgerEvent, ScopeHandle};
pub use ops::{matmul_accum, Op};
pub use tensor::{Precision, Tensor};
