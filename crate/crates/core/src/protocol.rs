//! Framed device/cloud wire protocol and the session dialogue state machine.
//! `protocol.md` at the repository root is the byte-level reference.

use std::fmt;
use std::io::{self, Read, Write};

use thiserror::Error;

use crate::binio::{Reader, Truncated};
use crate::crypto::{Ciphertext, CryptoError, EncryptedInput, PublicKey};
use crate::mask::{MaskError, MaskPlan};

pub const FRAME_MAGIC: &[u8; 4] = b"SDWP";
pub const PROTOCOL_VERSION: u16 = 1;
pub const FRAME_HEADER_LEN: usize = 11;
pub const MAX_PAYLOAD: u32 = 64 << 20;

/// HELLO capability bits.
pub const CAP_WANT_MASK_PLAN: u32 = 1;

/// Plaintext carried by the FEATURES sentinel. The cloud multiplies it by
/// the encoded constant 1, so the PARAMS echo decodes to the same value at
/// depth 2 under the right key and codec.
pub const SENTINEL_VALUE: f64 = 0.8125;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    PubKey = 2,
    MaskPlan = 3,
    Features = 4,
    Params = 5,
    PlainFeatures = 6,
    PlainParams = 7,
    Error = 8,
}

impl MsgType {
    pub const ALL: [MsgType; 8] = [
        MsgType::Hello,
        MsgType::PubKey,
        MsgType::MaskPlan,
        MsgType::Features,
        MsgType::Params,
        MsgType::PlainFeatures,
        MsgType::PlainParams,
        MsgType::Error,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|t| *t as u8 == v)
    }

    /// Which side sends this message; ERROR may come from either.
    pub fn sender(self) -> Option<Peer> {
        match self {
            MsgType::Hello | MsgType::PubKey | MsgType::Features | MsgType::PlainFeatures => Some(Peer::Device),
            MsgType::MaskPlan | MsgType::Params | MsgType::PlainParams => Some(Peer::Cloud),
            MsgType::Error => None,
        }
    }
}

impl fmt::Display for MsgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MsgType::Hello => "HELLO",
            MsgType::PubKey => "PUBKEY",
            MsgType::MaskPlan => "MASKPLAN",
            MsgType::Features => "FEATURES",
            MsgType::Params => "PARAMS",
            MsgType::PlainFeatures => "PLAINFEATURES",
            MsgType::PlainParams => "PLAINPARAMS",
            MsgType::Error => "ERROR",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum ErrorCode {
    Violation = 1,
    Timeout = 2,
    Busy = 3,
    Malformed = 4,
    Crypto = 5,
    Internal = 6,
}

impl ErrorCode {
    pub fn from_u16(v: u16) -> Option<Self> {
        [
            ErrorCode::Violation,
            ErrorCode::Timeout,
            ErrorCode::Busy,
            ErrorCode::Malformed,
            ErrorCode::Crypto,
            ErrorCode::Internal,
        ]
        .into_iter()
        .find(|c| *c as u16 == v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello {
        client_id: u64,
        caps: u32,
    },
    PubKey(PublicKey),
    MaskPlan(MaskPlan),
    /// Encrypted channels in ascending index order, then the sentinel.
    Features {
        session: u64,
        channels: Vec<EncryptedInput>,
        sentinel: Ciphertext,
    },
    /// `F*K + K` ciphertexts, `W` row-major then `b`, then the sentinel echo.
    Params {
        session: u64,
        features: u32,
        classes: u32,
        values: Vec<Ciphertext>,
        sentinel: Ciphertext,
    },
    PlainFeatures {
        session: u64,
        channels: Vec<(u32, f32)>,
    },
    PlainParams {
        session: u64,
        features: u32,
        classes: u32,
        values: Vec<f32>,
    },
    Error {
        code: u16,
        text: String,
    },
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("bad frame magic")]
    BadMagic,
    #[error("unsupported protocol version {0}")]
    Version(u16),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("payload of {0} bytes exceeds the 64 MiB cap")]
    Oversize(u32),
    #[error("frame declares {declared} payload bytes, {actual} present")]
    LengthMismatch { declared: usize, actual: usize },
    #[error(transparent)]
    Truncated(#[from] Truncated),
    #[error("channel index {index} at position {position} is not strictly ascending")]
    BadIndex { index: u32, position: usize },
    #[error("PARAMS carries {got} values, {features}x{classes} classifier needs {want}")]
    ParamCount {
        features: u32,
        classes: u32,
        got: usize,
        want: usize,
    },
    #[error("non-finite plaintext value at position {0}")]
    NonFinite(usize),
    #[error("{0} trailing payload bytes")]
    TrailingBytes(usize),
    #[error("error text is not valid UTF-8")]
    Utf8,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("protocol violation: got {got} from {from}, expected one of [{}]", fmt_set(.expected))]
    Violation {
        got: MsgType,
        from: Peer,
        expected: Vec<MsgType>,
    },
    #[error("peer reported error {code}: {text}")]
    Remote { code: u16, text: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn fmt_set(set: &[MsgType]) -> String {
    set.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(", ")
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::Hello { .. } => MsgType::Hello,
            Message::PubKey(_) => MsgType::PubKey,
            Message::MaskPlan(_) => MsgType::MaskPlan,
            Message::Features { .. } => MsgType::Features,
            Message::Params { .. } => MsgType::Params,
            Message::PlainFeatures { .. } => MsgType::PlainFeatures,
            Message::PlainParams { .. } => MsgType::PlainParams,
            Message::Error { .. } => MsgType::Error,
        }
    }

    pub fn error(code: ErrorCode, text: impl Into<String>) -> Self {
        Message::Error {
            code: code as u16,
            text: text.into(),
        }
    }

    /// Checks the invariants the decoder enforces, so encoding stays canonical.
    pub fn validate(&self) -> Result<(), ProtocolError> {
        match self {
            Message::Features { channels, .. } => check_ascending(channels.iter().map(|c| c.index as u64)),
            Message::PlainFeatures { channels, .. } => {
                check_ascending(channels.iter().map(|c| c.0 as u64))?;
                check_finite(channels.iter().map(|c| c.1))
            }
            Message::Params {
                features,
                classes,
                values,
                ..
            } => check_count(*features, *classes, values.len()),
            Message::PlainParams {
                features,
                classes,
                values,
                ..
            } => {
                check_count(*features, *classes, values.len())?;
                check_finite(values.iter().copied())
            }
            _ => Ok(()),
        }
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Message::Hello { client_id, caps } => {
                out.extend_from_slice(&client_id.to_le_bytes());
                out.extend_from_slice(&caps.to_le_bytes());
            }
            Message::PubKey(pk) => out.extend_from_slice(&pk.to_wire()),
            Message::MaskPlan(plan) => out.extend_from_slice(&plan.encode()),
            Message::Features {
                session,
                channels,
                sentinel,
            } => {
                out.extend_from_slice(&session.to_le_bytes());
                out.extend_from_slice(&(channels.len() as u32).to_le_bytes());
                for c in channels {
                    out.extend_from_slice(&(c.index as u32).to_le_bytes());
                    c.ct.write_wire(&mut out);
                }
                sentinel.write_wire(&mut out);
            }
            Message::Params {
                session,
                features,
                classes,
                values,
                sentinel,
            } => {
                out.extend_from_slice(&session.to_le_bytes());
                out.extend_from_slice(&features.to_le_bytes());
                out.extend_from_slice(&classes.to_le_bytes());
                for v in values {
                    v.write_wire(&mut out);
                }
                sentinel.write_wire(&mut out);
            }
            Message::PlainFeatures { session, channels } => {
                out.extend_from_slice(&session.to_le_bytes());
                out.extend_from_slice(&(channels.len() as u32).to_le_bytes());
                for (i, v) in channels {
                    out.extend_from_slice(&i.to_le_bytes());
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Message::PlainParams {
                session,
                features,
                classes,
                values,
            } => {
                out.extend_from_slice(&session.to_le_bytes());
                out.extend_from_slice(&features.to_le_bytes());
                out.extend_from_slice(&classes.to_le_bytes());
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Message::Error { code, text } => {
                out.extend_from_slice(&code.to_le_bytes());
                out.extend_from_slice(text.as_bytes());
            }
        }
        out
    }

    pub fn decode_payload(ty: MsgType, payload: &[u8]) -> Result<Self, ProtocolError> {
        let mut r = Reader::new(payload);
        let msg = match ty {
            MsgType::Hello => Message::Hello {
                client_id: r.u64()?,
                caps: r.u32()?,
            },
            MsgType::PubKey => return Ok(Message::PubKey(PublicKey::from_wire(payload)?)),
            MsgType::MaskPlan => return Ok(Message::MaskPlan(MaskPlan::decode(payload)?)),
            MsgType::Features => {
                let session = r.u64()?;
                let count = r.u32()? as usize;
                // each entry needs at least 9 bytes; bound the allocation by what is present
                let mut channels = Vec::with_capacity(count.min(r.remaining() / 9));
                for position in 0..count {
                    let index = r.u32()?;
                    if channels.last().is_some_and(|c: &EncryptedInput| c.index as u32 >= index) {
                        return Err(ProtocolError::BadIndex { index, position });
                    }
                    let ct = Ciphertext::read_wire(&mut r)?;
                    channels.push(EncryptedInput {
                        index: index as usize,
                        ct,
                    });
                }
                let sentinel = Ciphertext::read_wire(&mut r)?;
                Message::Features {
                    session,
                    channels,
                    sentinel,
                }
            }
            MsgType::Params => {
                let session = r.u64()?;
                let features = r.u32()?;
                let classes = r.u32()?;
                let want = param_count(features, classes);
                let mut values = Vec::with_capacity(want.min(r.remaining() / 5));
                for _ in 0..want {
                    values.push(Ciphertext::read_wire(&mut r)?);
                }
                let sentinel = Ciphertext::read_wire(&mut r)?;
                Message::Params {
                    session,
                    features,
                    classes,
                    values,
                    sentinel,
                }
            }
            MsgType::PlainFeatures => {
                let session = r.u64()?;
                let count = r.u32()? as usize;
                let mut channels = Vec::with_capacity(count.min(r.remaining() / 8));
                for position in 0..count {
                    let index = r.u32()?;
                    if channels.last().is_some_and(|c: &(u32, f32)| c.0 >= index) {
                        return Err(ProtocolError::BadIndex { index, position });
                    }
                    let v = r.f32()?;
                    if !v.is_finite() {
                        return Err(ProtocolError::NonFinite(position));
                    }
                    channels.push((index, v));
                }
                Message::PlainFeatures { session, channels }
            }
            MsgType::PlainParams => {
                let session = r.u64()?;
                let features = r.u32()?;
                let classes = r.u32()?;
                let want = param_count(features, classes);
                let mut values = Vec::with_capacity(want.min(r.remaining() / 4));
                for position in 0..want {
                    let v = r.f32()?;
                    if !v.is_finite() {
                        return Err(ProtocolError::NonFinite(position));
                    }
                    values.push(v);
                }
                Message::PlainParams {
                    session,
                    features,
                    classes,
                    values,
                }
            }
            MsgType::Error => {
                let code = r.u16()?;
                let text = std::str::from_utf8(r.take(r.remaining())?).map_err(|_| ProtocolError::Utf8)?;
                Message::Error {
                    code,
                    text: text.to_string(),
                }
            }
        };
        if r.remaining() != 0 {
            return Err(ProtocolError::TrailingBytes(r.remaining()));
        }
        Ok(msg)
    }
}

fn param_count(features: u32, classes: u32) -> usize {
    (features as usize).saturating_mul(classes as usize).saturating_add(classes as usize)
}

fn check_count(features: u32, classes: u32, got: usize) -> Result<(), ProtocolError> {
    let want = param_count(features, classes);
    if got != want {
        return Err(ProtocolError::ParamCount {
            features,
            classes,
            got,
            want,
        });
    }
    Ok(())
}

fn check_ascending(indices: impl Iterator<Item = u64>) -> Result<(), ProtocolError> {
    let mut prev: Option<u64> = None;
    for (position, i) in indices.enumerate() {
        if i > u32::MAX as u64 || prev.is_some_and(|p| p >= i) {
            return Err(ProtocolError::BadIndex {
                index: i as u32,
                position,
            });
        }
        prev = Some(i);
    }
    Ok(())
}

fn check_finite(values: impl Iterator<Item = f32>) -> Result<(), ProtocolError> {
    for (i, v) in values.enumerate() {
        if !v.is_finite() {
            return Err(ProtocolError::NonFinite(i));
        }
    }
    Ok(())
}

pub fn encode_frame(msg: &Message) -> Result<Vec<u8>, ProtocolError> {
    msg.validate()?;
    let payload = msg.encode_payload();
    if payload.len() > MAX_PAYLOAD as usize {
        return Err(ProtocolError::Oversize(payload.len().min(u32::MAX as usize) as u32));
    }
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + payload.len());
    out.extend_from_slice(FRAME_MAGIC);
    out.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    out.push(msg.msg_type() as u8);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

fn parse_header(h: &[u8; FRAME_HEADER_LEN]) -> Result<(MsgType, u32), ProtocolError> {
    if &h[..4] != FRAME_MAGIC {
        return Err(ProtocolError::BadMagic);
    }
    let version = u16::from_le_bytes([h[4], h[5]]);
    if version != PROTOCOL_VERSION {
        return Err(ProtocolError::Version(version));
    }
    let ty = MsgType::from_u8(h[6]).ok_or(ProtocolError::UnknownType(h[6]))?;
    let len = u32::from_le_bytes([h[7], h[8], h[9], h[10]]);
    if len > MAX_PAYLOAD {
        return Err(ProtocolError::Oversize(len));
    }
    Ok((ty, len))
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode_frame(bytes: &[u8]) -> Result<Message, ProtocolError> {
    let header: &[u8; FRAME_HEADER_LEN] = bytes
        .get(..FRAME_HEADER_LEN)
        .and_then(|h| h.try_into().ok())
        .ok_or(Truncated {
            offset: 0,
            needed: FRAME_HEADER_LEN,
            available: bytes.len(),
        })?;
    let (ty, len) = parse_header(header)?;
    let payload = &bytes[FRAME_HEADER_LEN..];
    if payload.len() != len as usize {
        return Err(ProtocolError::LengthMismatch {
            declared: len as usize,
            actual: payload.len(),
        });
    }
    Message::decode_payload(ty, payload)
}

pub fn write_frame<W: Write>(w: &mut W, msg: &Message) -> Result<usize, ProtocolError> {
    let bytes = encode_frame(msg)?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(bytes.len())
}

/// Reads one frame. The payload cap is checked before allocating.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Message, ProtocolError> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    r.read_exact(&mut header)?;
    let (ty, len) = parse_header(&header)?;
    let mut payload = Vec::new();
    let got = r.by_ref().take(len as u64).read_to_end(&mut payload)?;
    if got != len as usize {
        return Err(ProtocolError::LengthMismatch {
            declared: len as usize,
            actual: got,
        });
    }
    Message::decode_payload(ty, &payload)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Peer {
    Device,
    Cloud,
}

impl fmt::Display for Peer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Peer::Device => "device",
            Peer::Cloud => "cloud",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DialogueState {
    Start,
    Greeted,
    Planned,
    Keyed,
    Uploaded,
    PlainUploaded,
    Done,
    Failed,
}

impl DialogueState {
    pub fn is_terminal(self) -> bool {
        matches!(self, DialogueState::Done | DialogueState::Failed)
    }

    /// Messages legal from this state, in wire-type order.
    pub fn expected(self) -> Vec<MsgType> {
        use MsgType::*;
        let mut set = match self {
            DialogueState::Start => vec![Hello],
            DialogueState::Greeted => vec![PubKey, MaskPlan, PlainFeatures],
            DialogueState::Planned => vec![PubKey, PlainFeatures],
            DialogueState::Keyed => vec![Features],
            DialogueState::Uploaded => vec![Params],
            DialogueState::PlainUploaded => vec![PlainParams],
            DialogueState::Done | DialogueState::Failed => vec![],
        };
        if !self.is_terminal() {
            set.push(Error);
        }
        set
    }
}

/// Per-connection dialogue tracker:
/// `HELLO [MASKPLAN] (PUBKEY FEATURES PARAMS | PLAINFEATURES PLAINPARAMS)`,
/// with ERROR from either side ending any unfinished session.
#[derive(Debug, Clone)]
pub struct Dialogue {
    state: DialogueState,
}

impl Default for Dialogue {
    fn default() -> Self {
        Self {
            state: DialogueState::Start,
        }
    }
}

impl Dialogue {
    pub fn state(&self) -> DialogueState {
        self.state
    }

    pub fn expected(&self) -> Vec<MsgType> {
        self.state.expected()
    }

    /// Advances on a message sent by `from`, or reports what was expected.
    pub fn advance(&mut self, from: Peer, ty: MsgType) -> Result<DialogueState, ProtocolError> {
        use DialogueState as S;
        use MsgType::*;
        let violation = || ProtocolError::Violation {
            got: ty,
            from,
            expected: self.state.expected(),
        };
        if ty.sender().is_some_and(|s| s != from) {
            return Err(violation());
        }
        let next = match (self.state, ty) {
            (s, Error) if !s.is_terminal() => S::Failed,
            (S::Start, Hello) => S::Greeted,
            (S::Greeted, MaskPlan) => S::Planned,
            (S::Greeted | S::Planned, PubKey) => S::Keyed,
            (S::Greeted | S::Planned, PlainFeatures) => S::PlainUploaded,
            (S::Keyed, Features) => S::Uploaded,
            (S::Uploaded, Params) => S::Done,
            (S::PlainUploaded, PlainParams) => S::Done,
            _ => return Err(violation()),
        };
        self.state = next;
        Ok(next)
    }
}

/// Replays a transcript seen by `role` (each entry: `true` if `role` sent it)
/// and returns the set of message types legal next.
pub fn session_dialogue(role: Peer, transcript: &[(bool, MsgType)]) -> Result<Vec<MsgType>, ProtocolError> {
    let other = match role {
        Peer::Device => Peer::Cloud,
        Peer::Cloud => Peer::Device,
    };
    let mut d = Dialogue::default();
    for &(sent, ty) in transcript {
        d.advance(if sent { role } else { other }, ty)?;
    }
    Ok(d.expected())
}
