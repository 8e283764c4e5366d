//! A small reverse-mode autodiff engine over `ndarray`.
//!
//! The design is a flat tape: every forward op appends a node holding its
//! value, its parents and whatever memo the backward pass needs. Parameters
//! live outside the tape as plain arrays and are re-staged as leaves for each
//! training step, so a tape only ever covers one forward/backward evaluation.
//! Everything is `f64`; the nets this crate targets are small enough that
//! double precision is affordable and it keeps finite-difference checks tight.

pub mod conv;
pub mod gradcheck;
pub mod init;
pub mod tape;

pub use tape::{Tape, TensorId};
