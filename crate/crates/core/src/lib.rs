//! Selective cross-modality distillation at desk scale.
//!
//! A small relu MLP student learns from a frozen teacher's soft targets and
//! class text embeddings, spending its selection-phase updates only on the
//! hardest samples of each batch. The crate also carries brute-force checks of
//! the total-variation risk bounds that motivate hard-sample selection.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod io;
pub mod losses;
pub mod rng;
pub mod selection;
pub mod student;
pub mod teacher;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
