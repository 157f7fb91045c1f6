//! Chest X-ray COVID-19 classification and similar-case retrieval.

pub mod augment;
pub mod dataset;
pub mod dicom;
pub mod error;
pub mod experiments;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod retrieval;
pub mod seed;
pub mod segmentation;
pub mod synth;

pub use error::{Error, Result};
