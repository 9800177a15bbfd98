//! Diffusion-based audio-visual sound source separation.
//!
//! Given a two-source audio mixture and a video frame showing one of the
//! sounding objects, the model synthesizes the magnitude spectrogram of the
//! indicated source by iteratively denoising Gaussian noise, conditioned on
//! the mixture spectrogram and a visual embedding. The separated magnitude
//! is combined with the mixture phase and inverted back to a waveform.
//!
//! The crate is organized around the stages of that pipeline:
//!
//! - [`spectrogram`]: waveform <-> spectrogram transforms, log-magnitude
//!   scaling, and grid resampling
//! - [`diffusion`]: noise schedules, forward q-sampling, DDPM/DDIM reverse
//!   steps, and timestep embeddings
//! - [`tensor`]: a small reverse-mode autodiff engine (f64) the network is
//!   built on
//! - [`nn`]: layers — weight-standardized convolutions, group/layer norm,
//!   FiLM ResNet blocks, multi-head attention
//! - [`unet`]: the conditional separation U-Net and visual encoder
//! - [`data`]: mix-and-separate pair construction, manifests, and a
//!   synthetic toy dataset
//! - [`engine`]: training and inference orchestration, checkpoints
//! - [`bss`]: BSS-Eval decomposition and SDR/SIR/SAR metrics
//! - [`config`]: run configuration files (TOML) shared by the CLI

pub mod bss;
pub mod config;
pub mod container;
pub mod data;
pub mod diffusion;
pub mod engine;
pub mod error;
pub mod nn;
pub mod rng;
pub mod spectrogram;
pub mod tensor;
pub mod unet;

pub use error::{AvsepError, Result};
