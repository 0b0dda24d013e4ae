//! Counterfactual conformer search in the latent space of an equivariant
//! variational encoder-decoder.
//!
//! The pipeline: [`encoder`] maps a conformer to per-node states and a
//! level-separated Gaussian posterior; [`decoder`] turns a latent back into
//! coordinates on the same molecular graph; [`uncertainty`] scores latents
//! with a heteroscedastic predictor and a certificate bank; [`clue`] runs
//! gradient descent on the latent to lower those scores while staying near
//! the input geometry; [`harness`] sweeps contamination levels and writes
//! reports.

pub mod clue;
mod error;
pub mod decoder;
pub mod diffcore;
pub mod encoder;
pub mod harness;
pub mod model;
pub mod molgraph;
pub mod training;
pub mod uncertainty;

pub use error::{Error, Result};
