//! Integrative class activation maps for a small self-contained CNN.
//!
//! The crate carries its own tensor type and reverse-mode tape, a seeded toy
//! model, perturbation-based layer scoring, several CAM variants and the
//! netpbm I/O used by the command-line tool.

pub mod cam;
pub mod cli;
pub mod error;
pub mod heatmap;
pub mod layer_score;
pub mod metrics;
pub mod model;
pub mod perturb;
pub mod pipeline;
pub mod render;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod verify;
pub mod weights;

pub use error::{Error, Result};
