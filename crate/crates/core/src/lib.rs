//! Multimodal prompting for fine-grained visual classification.
//!
//! A ViT image encoder whose last layers see only the class token and the
//! `k` patch tokens its class-token attention ranks highest; per-class
//! learnable text prompts encoded by a frozen text encoder; a cross-modal
//! fusion module; and the two-stage training protocol that ties them
//! together. Everything runs on the tape-based autodiff in `mpfgvc-tensor`.

pub mod ablation;
pub mod config;
pub mod data;
mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod run;
pub mod ssvp;
pub mod text;
pub mod visualize;
pub mod vit;
pub mod vlfm;

pub use error::{Error, Result};
