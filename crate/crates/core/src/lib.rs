//! Core building blocks of the collaborative OOD-detection pipeline: pooled
//! feature datasets, channel mask plans, Paillier encryption, forward-only
//! hypernetwork evaluation, post-hoc OOD scores, evaluation metrics and the
//! device/cloud wire protocol.
//!
//! Nothing in this crate computes gradients; training lives in
//! `secdood-train`.

pub mod binio;
pub mod crypto;
pub mod features;
pub mod mask;
pub mod hypernet;
pub mod metrics;
pub mod protocol;
pub mod scores;
pub mod settings;
