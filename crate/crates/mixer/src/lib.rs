//! Sparse top-1 mixture of expert reconstructors for families of
//! dynamical systems.
//!
//! The crate trains several context-conditioned neural vector fields
//! ("experts") on trajectory data from many environments at once. A linear
//! gate maps each environment's learned context vector to one expert; the
//! gate is fitted by K-means clustering of the contexts followed by a
//! least-squares solve instead of gradient descent. Training alternates
//! proximal blocks over shared weights and contexts, with the gate refreshed
//! in between.
//!
//! Start with the runnable examples (`cargo run --release --example …`) or
//! the `mixer` binary's `generate` / `train` / `adapt` / `eval` / `plot`
//! subcommands.

#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod backbones;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod datagen;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod moe;
pub mod ode;
pub mod optimizer;
pub mod rollout;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
