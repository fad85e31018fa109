//! Contrastive self-supervised representation learning for multi-lead ECG.
//!
//! The crate covers the whole pipeline: record ingestion (WFDB format 16 and
//! PTB-XL metadata), a synthetic ECG generator, seven time-series augmentation
//! kernels, a small reverse-mode differentiation engine with the 1-D
//! convolutional building blocks, the residual / plain encoders with their
//! projection and classification heads, NT-Xent pretraining, frozen-encoder
//! linear probing, and a parameter sweep that writes one CSV row per run.
//!
//! Data-parallel inner loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iterators otherwise.
//! Every reduction is performed in a fixed order, so results are bitwise
//! identical in both modes.

// `!(x > lim)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod autodiff;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod models;
pub mod par;
pub mod rng;
pub mod sweep;
pub mod train;
pub mod wfdb;

pub use error::{Error, Result};
