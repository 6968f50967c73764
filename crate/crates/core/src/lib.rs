//! Instruction-driven 3D facial expression transition.
//!
//! Given a text instruction naming two expressions ("Turn this face from
//! disgust to happiness.") and the parameters of a source face, this crate
//! generates a pair of anchor expression/pose coefficients with a conditional
//! VAE, interpolates a smooth trajectory between them, and reconstructs
//! per-frame head meshes through a FLAME-style blendshape + linear blend
//! skinning model.
//!
//! The crate is `no_std` (with `alloc`); all IO, file formats, and the
//! command-line interface live in the companion `fet-cli` crate.
//!
//! Module map:
//!
//! - [`head_model`] — parametric head: blendshapes, linear blend skinning,
//!   synthetic desk-scale model generation.
//! - [`text_embed`] — instruction templates and pluggable text embedding
//!   providers (deterministic hashing encoder, precomputed lookup).
//! - [`ifed`] — the instruction-driven facial expression decomposer:
//!   dual-branch transformer with cross-attention fusion.
//! - [`i2fet`] — the conditional VAE over anchor expression/pose pairs,
//!   its losses, and the training loop.
//! - [`ned`] — neutral expression autoencoder for inserting neutral frames.
//! - [`trajectory`] — anchor assembly, linear interpolation, per-frame meshes.
//! - [`dataset`] — synthetic instruction-dataset generation and splits.
//! - [`eval`] — parameter-space classifier, class-balanced focal loss, and
//!   the Acc1/Acc2/G-mean metrics.
//! - [`tape`] — the reverse-mode autodiff arena the models train on.
//! - [`gradcheck`] — finite-difference gradient verification utilities.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod head_model;
pub mod i2fet;
pub mod ifed;
pub mod mat;
pub mod ned;
pub mod nn;
pub mod rng;
pub mod tape;
pub mod text_embed;
pub mod trajectory;

pub use error::{Error, Result};
pub use mat::Mat;
