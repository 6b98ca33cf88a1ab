//! Personalized preference prediction for pairs of same-content audio clips.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: a small define-by-run reverse-mode autodiff engine with the
//!   layers a CNN6-style network needs, Adam, a finite-difference gradient
//!   checker and a binary checkpoint format.
//! * [`dsp`]: WAV ingest, 44.1 kHz to 32 kHz resampling and 64-bin log-mel
//!   features.
//! * [`augment`]: SpecAugment-style time and frequency stripe masking.
//! * [`dataset`]: questionnaire construction, score translation, exclusion
//!   rules, subject feature vectors, age-sorted folds, a synthetic corpus
//!   generator and the JSONL corpus format.
//! * [`models`]: the CNN6-style encoder, the MLP head and the four side
//!   networks (AO, A+S-L, A+S-E, A+S-P) wrapped in a siamese comparator.
//! * [`train`]: the training loop, accuracy evaluation, subject-wise
//!   cross-validation and the last-MLP weight analysis.

pub mod augment;
pub mod dataset;
pub mod dsp;
mod error;
pub mod fsutil;
pub mod models;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
