//! Dense-feature denoising by test-time augmentation and register-token
//! self-distillation for small Vision Transformers.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense arrays plus a reverse-mode tape.
//! * [`vit`]: a small ViT with class token, register tokens and two dense heads.
//! * [`tta`]: shift/flip augmentation, inverse restoration and the streaming mean.
//! * [`bench`]: synthetic scenes and grid-anchored artifact injection.
//! * [`distill`]: the student trainer (loss, schedule, unlock masks, AdamW).
//! * [`metrics`]: cosine percentiles, norm statistics, linear probe, Pearson.
//! * [`io`]: the `PHRG` container format, run configuration and CSV output.
//! * [`cli`]: the `phreg` command-line surface.

pub mod bench;
pub mod cli;
pub mod distill;
pub mod error;
pub mod image;
pub mod io;
pub mod metrics;
pub mod rng;
pub mod tensor;
pub mod tta;
pub mod vit;

pub use error::{Error, Result};
pub use image::Image;
pub use tensor::{Scalar, Tape, Tensor, Var};
pub use vit::{FeatureGrid, HeadMode, ViTConfig, ViTModel};
