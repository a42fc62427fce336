//! Sentiment-controlled dialogue generation.
//!
//! Four generator families share one recurrent substrate: a
//! sentiment-context seq2seq model, a CVAE variant with a Gaussian latent,
//! and their adversarially trained counterparts driven by a conditional
//! discriminator through REINFORCE.

pub mod corpus;
pub mod cvae;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod model;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
