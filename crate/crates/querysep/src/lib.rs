//! Query-based audio source separation, end to end and from scratch.
//!
//! A mixture spectrogram is encoded by a small U-Net; a bank of learnable
//! queries, each tied to a sound class, cross-attends to the encoding and
//! decodes into per-source spectrogram masks. Training needs no isolated
//! stems: clips are mixed on the fly and the ground-truth ratio masks fall
//! out of the mixing. The crate contains the whole stack on plain CPU:
//!
//! * [`autodiff`]: reverse-mode tape over dense tensors (f32 or f64).
//! * [`dsp`]: STFT/iSTFT, log-frequency warping, ratio masks.
//! * [`synth`]: a deterministic synthetic instrument corpus.
//! * [`model`]: audio U-Net + query transformer mask predictor.
//! * [`train`]: mix-and-separate training, prompt fine-tuning, ablations.
//! * [`bss`]: SDR/SIR/SAR evaluation with a least-squares projection oracle.
//! * [`io`]: WAV/PGM/TSV/checkpoint formats and run configuration.
//!
//! Runnable entry points live in `examples/`; the `querysep` binary wraps
//! the same library calls behind subcommands (`gen-corpus`, `train`,
//! `separate`, `evaluate`, `finetune`, `ablate`, `inspect`).

pub mod autodiff;
pub mod bss;
pub mod cli;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
