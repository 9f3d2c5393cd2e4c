//! Collaborative enhancement network for multi-spectral (RGB / NIR / TIR)
//! re-identification, built on a small reverse-mode autodiff engine.
//!
//! Pipeline per sample: a shared transformer trunk encodes each spectrum,
//! the [`proxy`] generator fuses the three patch-token sets, the
//! [`quality`] module ranks spectra by token-wise cosine agreement with the
//! proxy, and [`enhance`] cross-attends low-ranked spectra to the primary
//! spectrum and every spectrum to the proxy. Per-spectrum final blocks turn
//! the enhanced tokens into class features used by [`objectives`] and
//! [`eval`].

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod enhance;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod objectives;
pub mod params;
pub mod proxy;
pub mod quality;
pub mod run;
pub mod spectral;
pub mod train;
pub mod verify;
pub mod vit;

pub use autodiff::{Graph, Tensor, Var};
pub use error::{Error, Result};
