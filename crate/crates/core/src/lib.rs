//! Region-aware multi-branch CNN for vehicle re-identification.
//!
//! The crate is self-contained: a small reverse-mode autograd
//! ([`autograd`]), the layers the model needs ([`nn`]), the four-branch
//! model with overlapping horizontal regions ([`model`]), the multi-task
//! staged trainer ([`train`]), dataset handling and a synthetic generator
//! ([`data`]), and query/gallery retrieval evaluation ([`eval`]).

pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod kv;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{RamError, Result};
pub use tensor::Tensor;
