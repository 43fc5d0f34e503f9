//! Core primitives for PPG-to-image vital-sign regression.
//!
//! The crate is `no_std` + `alloc`: everything here is deterministic pure
//! computation on owned buffers. IO, file formats, and the CLI live in the
//! companion `ppgvit` crate.
//!
//! Pipeline, end to end:
//!
//! 1. [`signal`] — canonical PPG windows and scalar-sequence primitives.
//! 2. [`imagify`] — three 1D→2D transforms (STFT log-power, STFT+phase,
//!    Gaussian-soft recurrence plots).
//! 3. [`tensorize`] — backbone channel normalization, padding to patch
//!    multiples, patch extraction with validity masks.
//! 4. [`vit`] — patch embedding, token assembly, pre-norm transformer
//!    encoder with optional LoRA adapters on Q/K/V.
//! 5. [`pool_head`] — mask-aware attention pooling and the LN/GELU
//!    regression head.
//! 6. [`train`] — fine-tuning loop, loss, AdamW, MAE evaluation.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod error;
mod fft;
pub mod imagify;
mod linalg;
pub mod model;
pub mod optim;
pub mod params;
pub mod pool_head;
pub mod report;
pub mod rng;
pub mod signal;
pub mod synth;
pub mod tensorize;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
