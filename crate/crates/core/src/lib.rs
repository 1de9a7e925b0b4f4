//! Self-supervised pre-training for indoor point clouds on a desk-scale
//! budget: masked patch reconstruction plus scene- and object-level feature
//! distillation from frozen per-scene teacher embeddings.
//!
//! The pipeline decomposes a scene into point patches (FPS centers, k-NN
//! grouping), masks foreground-heavy subsets while dropping a share of
//! background patches outright, reconstructs masked patches with a small
//! transformer autoencoder, and aligns pooled student features with
//! precomputed image- and text-space teacher vectors at both scene and
//! object granularity.
//!
//! Everything is deterministic end to end: randomness is derived from a root
//! seed via [`seeding`], floating point runs in f64 with f32 storage at the
//! container boundary, and the data-parallel paths ([`exec`]) produce
//! bit-identical results in sequential and parallel mode.

pub mod container;
pub mod correspondence;
pub mod error;
pub mod exec;
pub mod losses;
pub mod masking;
pub mod model;
pub mod nn;
pub mod pointcloud;
pub mod seeding;
pub mod synthgen;
pub mod teacher;
pub mod trainkit;

#[doc(hidden)]
pub mod testsupport;

pub use error::{Error, Result};
