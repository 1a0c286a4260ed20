//! Zero-shot voice conversion that stays usable when the input is noisy and
//! reverberant.
//!
//! The crate is organised as a pipeline:
//!
//! - [`dsp`]: waveform I/O, STFT/iSTFT, log-mel features, Griffin-Lim.
//! - [`scene`]: shoebox room simulation (image-source RIRs), SNR-controlled
//!   mixing, and degraded-dataset construction.
//! - [`corpus`]: manifests, phoneme alignments and inventories, plus a fully
//!   synthetic toy corpus for end-to-end runs without licensed speech data.
//! - [`grad`]: a small reverse-mode autodiff engine over a fixed layer set,
//!   Adam, finite-difference gradient checking and checkpointing.
//! - [`model`]: the conversion model itself (speaker / content / phonetic /
//!   acoustic encoders and the decoder), its losses, training and inference.
//! - [`eval`]: listening-score summaries, SNR-bucketed reports, paired
//!   significance tests and objective proxy metrics.
//!
//! Everything is deterministic given a seed: repeated runs with the same
//! inputs produce byte-identical artifacts.

pub mod config;
pub mod corpus;
pub mod dsp;
pub mod eval;
pub mod grad;
pub mod model;
pub mod scene;
