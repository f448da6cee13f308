//! Region-level caption training on synthetic scenes.
//!
//! The crate wires four trainable pieces around frozen encoder stubs: a
//! greedy region-proposal pipeline that turns detections into candidate
//! views, a spatial cross-attention block that fuses candidate and target
//! features, two sigmoid-contrastive alignment modules (latent refinement
//! against a tag vocabulary, semantic alignment against caption embeddings),
//! and a four-term weighted loss trained end-to-end with reverse-mode
//! autodiff over f64 tensors.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod frozen;
pub mod god;
pub mod losses;
pub mod model;
pub mod refine;
pub mod semantic;
pub mod spatial;
pub mod synth;
pub mod trainer;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
