//! Data-free concept erasure for LoRA adapters.
//!
//! The editing pipeline rewrites the low-rank update of selected
//! cross-attention projections so that embeddings of a target concept (and
//! its synonyms) project like their antonyms or a neutral anchor, while a
//! preservation term keeps the rest of the adapter's behavior intact:
//!
//! 1. [`container`] reads and writes safetensors files.
//! 2. [`adapter`] turns tensor maps into [`adapter::LoraAdapter`]s and merges them.
//! 3. [`concept`] loads synonym/antonym embedding bundles.
//! 4. [`edit`] runs the adversarially perturbed Adam loop on each dense delta.
//! 5. [`svd`] re-factorizes the edited deltas into balanced LoRA factors.
//! 6. [`diagnostics`] measures the result in embedding space.
//!
//! [`cli`] and [`service`] are thin drivers over these modules.

pub mod adapter;
pub mod cli;
pub mod concept;
pub mod container;
pub mod diagnostics;
pub mod edit;
pub mod error;
pub mod linalg;
pub mod service;
pub mod svd;
pub mod synthetic;

pub use error::{Error, Result};
