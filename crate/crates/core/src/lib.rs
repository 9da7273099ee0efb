//! Noise-robust self-supervised speech pre-training at desk scale.
//!
//! The pipeline: clean utterances are mixed with two distinct noises
//! ([`audio`]), clean MFCCs ([`features`]) are clustered into discrete
//! units ([`units`]), and a small convolutional + transformer encoder
//! ([`model`]) is trained to predict those units at masked frames while two
//! correlation regularizers ([`correlation`]) push the twin-branch
//! cross-correlation and the bottleneck self-correlation toward identity.
//! [`training`] drives the loop and [`evaluation`] measures how much noise
//! identity survives in the pooled bottleneck features.

pub mod audio;
pub mod config;
pub mod correlation;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod model;
pub mod synth;
pub mod training;
pub mod units;

pub use error::{Error, Result};
