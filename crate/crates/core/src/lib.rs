//! Task-adaptive reference transformation (TART) for few-shot classification.
//!
//! Class prototypes of each episode are mapped onto learned, per-class
//! reference vectors by a linear transformation solved through the
//! Moore–Penrose right inverse of the prototype matrix. Queries are then
//! classified by distance in that task-adaptive space.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense matrices and a reverse-mode autodiff tape.
//! * [`encoder`]: vocabularies, word-vector loading and the mean-pooled affine encoder.
//! * [`head`]: prototypes, the transformation matrix, losses and the PROTO baseline.
//! * [`episodes`]: corpora, class splits, episode sampling and the synthetic benchmark.
//! * [`training`]: Adam, the episodic training loop, evaluation and checkpoints.
//! * [`config`] and [`cli`]: the `tart` command-line front end.

#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod config;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod head;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Result, TartError};
pub use tensor::{Matrix, Tape, Var};
