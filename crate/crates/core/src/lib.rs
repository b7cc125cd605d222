//! Cough-audio analysis: spectrograms, a small CNN cough detector,
//! occlusion-map explanations, band-specific spectral features of the
//! explanation-weighted spectrograms, and cohort comparison statistics.

pub mod audio_ingest;
pub mod cnn;
pub mod error;
pub mod grid_io;
pub mod occlusion;
pub mod report;
pub mod spectral_features;
pub mod spectrogram;
pub mod stats;

pub use error::{Error, Result};
