//! Keypoint estimation as conditional denoising of heatmaps.
//!
//! A small convolutional encoder, cross-attention over image features fused
//! with a global text-prior embedding, and an inner-product keypoint head
//! against per-keypoint prior embeddings form the denoiser. Training and
//! evaluation run on procedurally generated skeleton images with COCO-style
//! keypoint metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod diffusion;
pub mod error;
pub mod heatmap;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod priors;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
