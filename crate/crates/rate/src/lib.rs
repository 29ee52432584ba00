//! Geospatial topic-model engine for location estimation of short geotagged
//! documents: Gibbs-EM training with a collapsed Gibbs E-step and a
//! closed-form Gaussian M-step, test-time coordinate regression and region
//! classification, a synthetic-data generator, a Naive Bayes baseline and an
//! evaluation harness.

pub mod cli;
pub mod corpus;
pub mod em;
pub mod error;
pub mod math;
pub mod model;
pub mod predict;
pub mod sampler;
pub mod synthetic;

pub use error::{Error, Result};
