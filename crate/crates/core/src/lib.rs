//! Zero-shot image editing with cross-attention guidance, built around a
//! small conditional diffusion denoiser.
//!
//! The pipeline inverts an image to noise with deterministic DDIM stepping
//! (regularising the predicted noise towards whiteness), reconstructs it
//! while capturing cross-attention maps for a ladder of increasingly edited
//! prompts, fuses those maps over a sliding temporal window, and finally
//! denoises with the edited prompt while pulling the edit-time attention
//! maps towards the fused reference.

pub mod denoiser;
pub mod error;
pub mod finite_diff;
pub mod guidance;
pub mod noise_reg;
pub mod pipeline;
pub mod prompts;
pub mod rng;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};
