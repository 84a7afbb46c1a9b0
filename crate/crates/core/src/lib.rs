//! Pose-guided multi-view sprite synthesis with a jointly conditioned
//! latent diffusion model.
//!
//! The crate is organised bottom-up:
//!
//! - [`scalar`], [`rng`], [`par`] — numeric/f32-f64 abstraction, seeded
//!   stream derivation, and deterministic data-parallel dispatch.
//! - [`tensor`] — a small reverse-mode autodiff tape over `ndarray`.
//! - [`nn`] — layers, parameter registry, and the AdamW optimiser.
//! - [`synthdata`] — the procedural sprite corpus (skeleton, renderer,
//!   dataset manifests).
//! - [`backbones`] — the pretrained-then-frozen encoders: semantic
//!   encoder, image VAE, pose encoder.
//! - [`diffusion`] — noise schedules, forward diffusion, DDIM sampling,
//!   classifier-free guidance.
//! - [`apm`] — the autoregressive-free appearance prior over per-view
//!   semantic embeddings.
//! - [`jci`] — joint conditioning: slot canvas assembly and the tiled
//!   denoiser UNet with view attention.
//! - [`pipeline`] — training loops, inference protocols, run artefacts.
//! - [`evalkit`] — SSIM/PSNR/Fréchet-style metrics and report emission.
//! - [`ckpt`], [`config`] — checkpoint container and run configuration.

pub mod apm;
pub mod backbones;
pub mod ckpt;
pub mod config;
pub mod diffusion;
pub mod evalkit;
pub mod jci;
pub mod error;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod runlog;
pub mod scalar;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
