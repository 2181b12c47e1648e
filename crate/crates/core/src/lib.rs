//! Human-aware motion deblurring.
//!
//! The model disentangles foreground (human) and background blur: a small
//! supervised attention subnet predicts a soft FG mask from the blurred
//! image, the mask gates the shared encoder features into FG/BG streams,
//! and a triple-branch decoder (FG, BG, primary) restores the sharp image,
//! with the primary branch deep-fusing intermediates from the other two.
//! The whole single-scale model is wrapped coarse-to-fine over an image
//! pyramid with shared weights.
//!
//! Crate layout:
//! - [`img`]: raster types ([`img::ImagePlane`], [`img::BinaryMask`]) and PNG I/O
//! - [`data`]: dataset loading, box rasterization, blur synthesis, pyramids,
//!   balanced patch sampling
//! - [`metrics`]: PSNR / SSIM and per-region variants
//! - [`nn`]: parameter store, conv layers, Adam
//! - [`attention`]: the supervised attention subnet and feature gating
//! - [`network`]: encoder, triple-branch decoder, multi-scale forward
//! - [`losses`]: masked FG/BG losses, primary loss, combined objective
//! - [`checkpoint`]: the parameter archive format
//! - [`trainer`]: pretraining, the main loop, evaluation
//! - [`cli`]: the `hadeblur` command-line surface

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod img;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod trainer;

mod error;
pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
