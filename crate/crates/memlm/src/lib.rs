//! memlm: a desk-scale memory-augmented transformer decoder.
//!
//! A decoder-only transformer whose blocks carry an explicit N×d memory bank:
//! tokens read from the bank through cross attention, the read is merged into
//! the residual stream through a learned output gate, and the bank itself is
//! rewritten after every segment through input and forget gates. The crate
//! includes the reverse-mode tensor engine the model is built on, synthetic
//! long-context recall tasks, a training harness, and inspection tooling for
//! memory behavior.

pub mod cli;
pub mod decoder;
pub mod error;
pub mod inspect;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
