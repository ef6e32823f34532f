//! Device side of the pipeline. Everything here is a forward pass: features
//! are pooled and masked, the encrypted channels go to the cloud, and the
//! returned classifier is used as-is for OOD scoring. This crate does not
//! link the training code.

pub mod client;
pub mod pipeline;

use thiserror::Error;

use secdood_core::crypto::CryptoError;
use secdood_core::features::FeatureError;
use secdood_core::hypernet::HyperNetError;
use secdood_core::mask::MaskError;
use secdood_core::metrics::MetricsError;
use secdood_core::protocol::{ErrorCode, ProtocolError};
use secdood_core::scores::ScoreError;

pub use client::{decrypt_params, encrypt_upload, exchange, exchange_plaintext, RetryPolicy, SessionSpec};
pub use pipeline::{
    evaluate_theta, fetch_theta, offline_eval, run_detection, session_profile, DetectionOutput, DeviceConfig,
    ScoringOptions, ThresholdSource,
};

pub const EXIT_PROTOCOL: u8 = 2;
pub const EXIT_CRYPTO: u8 = 3;
pub const EXIT_DATA: u8 = 4;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("cannot connect to {0}")]
    Connect(String),
    #[error("server unreachable after {attempts} attempts: {last}")]
    Unreachable { attempts: usize, last: String },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("cloud reported error {code}: {text}")]
    Remote { code: u16, text: String },
    #[error("reply is for session {got}, expected {want}")]
    SessionMismatch { want: u64, got: u64 },
    #[error("cloud mask plan {remote:?} differs from the provisioned plan {local:?}")]
    PlanMismatch { local: Vec<usize>, remote: Vec<usize> },
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("sentinel decrypted to {got}: wrong key, codec or corrupted session")]
    SentinelMismatch { got: f64 },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    HyperNet(#[from] HyperNetError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl DeviceError {
    /// Failures worth another connection attempt.
    pub fn retryable(&self) -> bool {
        matches!(self, DeviceError::Connect(_)) || client::is_busy(self)
    }

    /// Process exit code: 2 protocol, 3 crypto, 4 data.
    pub fn exit_code(&self) -> u8 {
        match self {
            DeviceError::Connect(_)
            | DeviceError::Unreachable { .. }
            | DeviceError::Protocol(_)
            | DeviceError::SessionMismatch { .. }
            | DeviceError::PlanMismatch { .. } => EXIT_PROTOCOL,
            DeviceError::Remote { code, .. } if *code == ErrorCode::Crypto as u16 => EXIT_CRYPTO,
            DeviceError::Remote { .. } => EXIT_PROTOCOL,
            DeviceError::Crypto(_) | DeviceError::SentinelMismatch { .. } => EXIT_CRYPTO,
            DeviceError::HyperNet(HyperNetError::Crypto(_)) => EXIT_CRYPTO,
            DeviceError::Data(_)
            | DeviceError::Feature(_)
            | DeviceError::Mask(_)
            | DeviceError::HyperNet(_)
            | DeviceError::Score(_)
            | DeviceError::Metrics(_)
            | DeviceError::Io(_) => EXIT_DATA,
        }
    }
}
