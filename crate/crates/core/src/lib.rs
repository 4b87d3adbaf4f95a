//! Taillight state recognition from short video chunks.
//!
//! The crate implements the full pipeline: a reverse-mode tensor graph, a
//! small residual CNN backbone, an LSTM with spatial and temporal attention,
//! frame differencing with global-shift alignment, a synthetic scene
//! generator for desk-scale verification, progressive three-stage training,
//! and checkpoint/evaluation plumbing.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod image;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod spatial;
pub mod state;
pub mod synth;
pub mod temporal;
pub mod tensor;
pub mod train;
pub mod verify;
