//! Localized image-forgery detection with a noise-guided dual-branch
//! transformer (NFA-ViT), plus everything needed to exercise it end to end
//! on a desk-scale machine:
//!
//! - a minimal dense-tensor engine with reverse-mode autodiff ([`tensor`])
//! - a deterministic noise-residual extractor ([`noise`])
//! - vanilla, fix-sparse and noise-guided masked attention ([`attention`])
//! - the dual-branch encoder, weighted decoder and training loop ([`model`])
//! - a synthetic localized-forgery corpus generator ([`synth`])
//! - detection/localization metrics and robustness perturbations ([`metrics`])
//! - file-driven commands behind the `nfa-vit` binary ([`commands`])
//!
//! See the crate examples for one runnable entry point per capability.

pub mod attention;
pub mod error;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod selfcheck;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
