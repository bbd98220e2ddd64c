//! Minimal deterministic deep-learning toolkit: a reverse-mode tape over f64
//! `ndarray` tensors, named parameter storage with bit-exact serialization,
//! AdamW, and finite-difference gradient checking. Single-threaded on
//! purpose; every run with the same seed reproduces the same bits.

pub mod gradcheck;
pub mod init;
pub mod optim;
pub mod store;
pub mod tape;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use optim::{cosine_lr, AdamW};
pub use store::{ParamId, ParamStore, StoreError};
pub use tape::{Gradients, NodeId, Tape};
