//! Dual-modal directional focus decoding.
//!
//! The crate decodes the direction a listener attends to from two inputs: a
//! multi-channel EEG recording and the spatial spectrum of a two-microphone
//! audio recording. It covers the full pipeline:
//!
//! * [`signal`] — bandpass filtering, resampling, and the STFT shared by the
//!   EEG and audio paths.
//! * [`spatial`] — MVDR spatial spectra over an angular grid.
//! * [`dataset`] — trial data model, labeling paradigms, windowing, synthetic
//!   data generation, on-disk storage, and the constrained leave-one-out
//!   cross-validation split generators.
//! * [`nn`] — a dense-tensor reverse-mode autodiff engine with the layer and
//!   optimizer set the decoders need.
//! * [`models`] — the decoder architectures (EEG-CNN, EEG-LSM-CNN and their
//!   spectrum-fused variants) and the fold training loop.
//! * [`eval`] — balanced accuracy, chance baselines, Wilcoxon sign-rank
//!   testing and bootstrap significance levels.
//! * [`experiment`] — batch orchestration used by the `dirfocus` CLI.

pub mod error;
pub mod nn;
pub mod seed;

pub use error::{Error, Result};
