//! Toy-scale flow-matching text-to-speech with unified timbre conditioning.
//!
//! A transformer regresses the straight-path flow velocity of a small
//! spectrogram grid, conditioned on a character sequence and on a timbre
//! sequence that comes either from a speech prompt or from a projected text
//! caption. Both prompt modalities enter through the same cross-attention.

pub mod backbone;
pub mod caption;
pub mod config;
pub mod convnext;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gradcheck;
pub mod inference;
pub mod io;
pub mod mat;
pub mod nn;
pub mod oracle;
pub mod params;
pub mod real;
pub mod timbre;
pub mod trainer;

pub use caption::{Attribute, Caption};
pub use error::{CastError, Result};
pub use flow::{FlowStep, GuidanceScale};
pub use mat::{Mat, MelGrid};
pub use real::Real;
