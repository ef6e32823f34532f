//! TCP service answering one device session per connection.

use std::fmt;
use std::io::{self, Read};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{error, info, warn};
use sha2::{Digest, Sha256};
use thiserror::Error;

use secdood_core::crypto::{CryptoError, FixedPointCodec, PublicKey, DEFAULT_RANGE_BITS};
use secdood_core::hypernet::{encrypted_generate, HyperNetError, HyperNetParams};
use secdood_core::mask::{MaskError, MaskPlan};
use secdood_core::protocol::{
    read_frame, write_frame, Dialogue, ErrorCode, Message, Peer, ProtocolError, CAP_WANT_MASK_PLAN,
};

const ACCEPT_POLL: Duration = Duration::from_millis(10);
const LINGER: Duration = Duration::from_millis(200);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServeMode {
    EncryptedAffine,
    /// The cloud sees plaintext profiles; needed for two-layer checkpoints.
    TrustedPlaintext,
}

impl FromStr for ServeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "encrypted-affine" => Ok(ServeMode::EncryptedAffine),
            "trusted-plaintext" => Ok(ServeMode::TrustedPlaintext),
            other => Err(format!("unknown mode {other:?} (encrypted-affine | trusted-plaintext)")),
        }
    }
}

impl fmt::Display for ServeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ServeMode::EncryptedAffine => "encrypted-affine",
            ServeMode::TrustedPlaintext => "trusted-plaintext",
        })
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    HyperNet(#[from] HyperNetError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("checkpoint expects {checkpoint} input channels, mask plan covers {plan}")]
    PlanMismatch { checkpoint: usize, plan: usize },
    #[error("encrypted-affine mode needs a single-layer checkpoint, got {0} layers")]
    NotAffine(usize),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Checkpoint and mask plan shared read-only by all sessions.
#[derive(Debug)]
pub struct Model {
    params: HyperNetParams,
    plan: MaskPlan,
    mode: ServeMode,
    digest: [u8; 32],
}

fn digest(params: &HyperNetParams) -> [u8; 32] {
    Sha256::digest(params.encode()).into()
}

impl Model {
    pub fn new(params: HyperNetParams, plan: MaskPlan, mode: ServeMode) -> Result<Self, ServiceError> {
        params.validate()?;
        if params.config.input_dim != plan.channels() {
            return Err(ServiceError::PlanMismatch {
                checkpoint: params.config.input_dim,
                plan: plan.channels(),
            });
        }
        if mode == ServeMode::EncryptedAffine && params.config.layers != 1 {
            return Err(ServiceError::NotAffine(params.config.layers));
        }
        let digest = digest(&params);
        Ok(Self {
            params,
            plan,
            mode,
            digest,
        })
    }

    pub fn load(checkpoint: &Path, mask_plan: &Path, mode: ServeMode) -> Result<Self, ServiceError> {
        Self::new(HyperNetParams::read(checkpoint)?, MaskPlan::read(mask_plan)?, mode)
    }

    pub fn params(&self) -> &HyperNetParams {
        &self.params
    }

    pub fn plan(&self) -> &MaskPlan {
        &self.plan
    }

    pub fn mode(&self) -> ServeMode {
        self.mode
    }

    /// SHA-256 of the checkpoint encoding taken at load time.
    pub fn digest(&self) -> [u8; 32] {
        self.digest
    }

    /// Recomputes the digest from the parameters as they are now.
    pub fn current_digest(&self) -> [u8; 32] {
        digest(&self.params)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Limits {
    pub max_sessions: usize,
    /// Wall-clock budget for a whole session, reads included.
    pub session_timeout: Duration,
    /// Accept 512-bit device keys.
    pub insecure_test_keys: bool,
    pub codec: FixedPointCodec,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_sessions: 8,
            session_timeout: Duration::from_secs(30),
            insecure_test_keys: false,
            codec: FixedPointCodec::default(),
        }
    }
}

impl Limits {
    pub fn with_fraction_bits(mut self, bits: u32) -> Result<Self, CryptoError> {
        self.codec = FixedPointCodec::new(bits, (1u64 << DEFAULT_RANGE_BITS) as f64)?;
        Ok(self)
    }

    fn key_allowed(&self, pk: &PublicKey) -> bool {
        matches!(pk.bits(), 1024 | 2048) || (self.insecure_test_keys && pk.bits() == 512)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionReport {
    pub peer: Option<SocketAddr>,
    pub client_id: Option<u64>,
    pub session: Option<u64>,
    /// `None` on success.
    pub failure: Option<(ErrorCode, String)>,
    pub read_time: Duration,
    pub compute_time: Duration,
    pub write_time: Duration,
    pub total_time: Duration,
}

impl SessionReport {
    pub fn ok(&self) -> bool {
        self.failure.is_none()
    }
}

struct Failure {
    code: ErrorCode,
    text: String,
    /// False when the peer is gone or reported the error itself.
    reply: bool,
}

impl Failure {
    fn new(code: ErrorCode, text: impl Into<String>) -> Self {
        Self {
            code,
            text: text.into(),
            reply: true,
        }
    }

    fn silent(code: ErrorCode, text: impl Into<String>) -> Self {
        Self {
            reply: false,
            ..Self::new(code, text)
        }
    }
}

fn classify(e: ProtocolError) -> Failure {
    match e {
        ProtocolError::Io(io) => match io.kind() {
            io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock => Failure::new(ErrorCode::Timeout, "session timed out"),
            io::ErrorKind::UnexpectedEof => Failure::silent(ErrorCode::Malformed, "peer closed the connection"),
            _ => Failure::silent(ErrorCode::Internal, io.to_string()),
        },
        ProtocolError::Violation { .. } => Failure::new(ErrorCode::Violation, e.to_string()),
        other => Failure::new(ErrorCode::Malformed, other.to_string()),
    }
}

/// Reads that never outlive the session deadline.
struct DeadlineStream<'a> {
    stream: &'a TcpStream,
    deadline: Instant,
}

impl Read for DeadlineStream<'_> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let left = self.deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return Err(io::Error::new(io::ErrorKind::TimedOut, "session deadline passed"));
        }
        self.stream.set_read_timeout(Some(left))?;
        let mut s = self.stream;
        s.read(buf)
    }
}

struct Session<'a> {
    stream: &'a TcpStream,
    deadline: Instant,
    dialogue: Dialogue,
    report: SessionReport,
}

impl Session<'_> {
    fn recv(&mut self) -> Result<Message, Failure> {
        let t = Instant::now();
        let mut rd = DeadlineStream {
            stream: self.stream,
            deadline: self.deadline,
        };
        let msg = read_frame(&mut rd);
        self.report.read_time += t.elapsed();
        let msg = msg.map_err(classify)?;
        self.dialogue.advance(Peer::Device, msg.msg_type()).map_err(classify)?;
        if let Message::Error { code, text } = msg {
            let code = ErrorCode::from_u16(code).unwrap_or(ErrorCode::Internal);
            return Err(Failure::silent(code, format!("device reported: {text}")));
        }
        Ok(msg)
    }

    fn send(&mut self, msg: &Message) -> Result<(), Failure> {
        self.dialogue
            .advance(Peer::Cloud, msg.msg_type())
            .map_err(|e| Failure::new(ErrorCode::Internal, e.to_string()))?;
        let t = Instant::now();
        let left = self.deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(1));
        self.stream.set_write_timeout(Some(left)).ok();
        let mut s = self.stream;
        let r = write_frame(&mut s, msg);
        self.report.write_time += t.elapsed();
        r.map(|_| ()).map_err(|e| Failure::silent(ErrorCode::Internal, e.to_string()))
    }
}

fn unexpected(msg: &Message, mode: ServeMode) -> Failure {
    Failure::new(
        ErrorCode::Violation,
        format!("{} is not served in {mode} mode", msg.msg_type()),
    )
}

fn check_indices(plan: &MaskPlan, indices: impl Iterator<Item = usize>) -> Result<(), Failure> {
    for i in indices {
        if !plan.is_encrypted(i) {
            return Err(Failure::new(
                ErrorCode::Violation,
                format!("channel {i} is not in the provisioned encrypted set"),
            ));
        }
    }
    Ok(())
}

fn dialogue(s: &mut Session<'_>, model: &Model, limits: &Limits) -> Result<(), Failure> {
    let Message::Hello { client_id, caps } = s.recv()? else { unreachable!("dialogue starts with HELLO") };
    s.report.client_id = Some(client_id);
    if caps & CAP_WANT_MASK_PLAN != 0 {
        s.send(&Message::MaskPlan(model.plan.clone()))?;
    }
    let cfg = model.params.config;
    match (s.recv()?, model.mode) {
        (Message::PubKey(pk), ServeMode::EncryptedAffine) => {
            if !limits.key_allowed(&pk) {
                return Err(Failure::new(
                    ErrorCode::Crypto,
                    format!("{}-bit keys are not accepted", pk.bits()),
                ));
            }
            let Message::Features {
                session,
                channels,
                sentinel,
            } = s.recv()?
            else {
                unreachable!("dialogue admits only FEATURES after PUBKEY")
            };
            s.report.session = Some(session);
            check_indices(&model.plan, channels.iter().map(|c| c.index))?;
            let t = Instant::now();
            let crypto = |e: &dyn fmt::Display| Failure::new(ErrorCode::Crypto, e.to_string());
            if sentinel.scale() != 1 {
                return Err(Failure::new(ErrorCode::Crypto, "sentinel must be at depth 1"));
            }
            let one = limits.codec.encode_signed(1.0, 1).map_err(|e| crypto(&e))?;
            let echo = pk.mul_encoded(&sentinel, one).map_err(|e| crypto(&e))?;
            let values = encrypted_generate(&pk, &channels, &model.params, &limits.codec).map_err(|e| crypto(&e))?;
            s.report.compute_time += t.elapsed();
            s.send(&Message::Params {
                session,
                features: cfg.input_dim as u32,
                classes: cfg.num_classes as u32,
                values,
                sentinel: echo,
            })
        }
        (Message::PlainFeatures { session, channels }, ServeMode::TrustedPlaintext) => {
            s.report.session = Some(session);
            check_indices(&model.plan, channels.iter().map(|c| c.0 as usize))?;
            let t = Instant::now();
            let mut profile = vec![0.0; cfg.input_dim];
            for (i, v) in &channels {
                profile[*i as usize] = *v as f64;
            }
            let out = model
                .params
                .forward(&profile)
                .map_err(|e| Failure::new(ErrorCode::Internal, e.to_string()))?;
            s.report.compute_time += t.elapsed();
            s.send(&Message::PlainParams {
                session,
                features: cfg.input_dim as u32,
                classes: cfg.num_classes as u32,
                values: out.iter().map(|v| *v as f32).collect(),
            })
        }
        (other, mode) => Err(unexpected(&other, mode)),
    }
}

/// Closes our side, then drains briefly so the peer reads our last frame
/// instead of a reset.
fn close_gracefully(stream: &TcpStream) {
    stream.shutdown(Shutdown::Write).ok();
    stream.set_read_timeout(Some(LINGER)).ok();
    let mut buf = [0u8; 4096];
    let until = Instant::now() + LINGER;
    let mut s = stream;
    while Instant::now() < until {
        match s.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(_) => {}
        }
    }
}

/// Runs one session to completion on an accepted connection and logs one
/// line summarizing it.
pub fn handle_session(stream: TcpStream, model: &Model, limits: &Limits) -> SessionReport {
    let start = Instant::now();
    let mut s = Session {
        stream: &stream,
        deadline: start + limits.session_timeout,
        dialogue: Dialogue::default(),
        report: SessionReport {
            peer: stream.peer_addr().ok(),
            client_id: None,
            session: None,
            failure: None,
            read_time: Duration::ZERO,
            compute_time: Duration::ZERO,
            write_time: Duration::ZERO,
            total_time: Duration::ZERO,
        },
    };
    if let Err(f) = dialogue(&mut s, model, limits) {
        if f.reply && !s.dialogue.state().is_terminal() {
            let _ = s.send(&Message::error(f.code, f.text.clone()));
        }
        s.report.failure = Some((f.code, f.text));
    }
    close_gracefully(&stream);
    let mut report = s.report;
    report.total_time = start.elapsed();
    let ms = |d: Duration| d.as_secs_f64() * 1e3;
    let outcome = match &report.failure {
        None => "ok".to_string(),
        Some((code, text)) => format!("error {code:?}: {text}"),
    };
    info!(
        "session peer={} client={} session={} mode={} outcome={} read_ms={:.1} compute_ms={:.1} write_ms={:.1} total_ms={:.1}",
        report.peer.map(|a| a.to_string()).unwrap_or_else(|| "?".into()),
        report.client_id.map(|c| c.to_string()).unwrap_or_else(|| "-".into()),
        report.session.map(|c| c.to_string()).unwrap_or_else(|| "-".into()),
        model.mode,
        outcome,
        ms(report.read_time),
        ms(report.compute_time),
        ms(report.write_time),
        ms(report.total_time),
    );
    report
}

#[derive(Debug, Default)]
struct Counters {
    active: AtomicUsize,
    ok: AtomicU64,
    failed: AtomicU64,
    busy: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ServiceStats {
    pub sessions_ok: u64,
    pub sessions_failed: u64,
    pub busy_rejections: u64,
}

/// Stops the accept loop; active sessions finish or time out.
#[derive(Debug, Clone)]
pub struct ShutdownHandle(Arc<AtomicBool>);

impl ShutdownHandle {
    pub fn shutdown(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_shutdown(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

pub struct Service {
    listener: TcpListener,
    model: Arc<Model>,
    limits: Limits,
    stop: ShutdownHandle,
    counters: Arc<Counters>,
}

struct ActiveGuard(Arc<Counters>);

impl Drop for ActiveGuard {
    fn drop(&mut self) {
        self.0.active.fetch_sub(1, Ordering::SeqCst);
    }
}

fn reject_busy(stream: TcpStream) {
    stream.set_write_timeout(Some(LINGER)).ok();
    let mut s = &stream;
    let _ = write_frame(&mut s, &Message::error(ErrorCode::Busy, "service at capacity"));
    close_gracefully(&stream);
}

impl Service {
    pub fn bind(addr: impl ToSocketAddrs + fmt::Display, model: Model, limits: Limits) -> Result<Self, ServiceError> {
        let listener = TcpListener::bind(&addr).map_err(|source| ServiceError::Bind {
            addr: addr.to_string(),
            source,
        })?;
        listener.set_nonblocking(true)?;
        if model.mode == ServeMode::TrustedPlaintext {
            warn!("trusted-plaintext mode: the cloud sees device profiles and parameters in the clear (insecure)");
        }
        if limits.insecure_test_keys {
            warn!("512-bit device keys accepted (insecure test configuration)");
        }
        Ok(Self {
            listener,
            model: Arc::new(model),
            limits,
            stop: ShutdownHandle(Arc::new(AtomicBool::new(false))),
            counters: Arc::new(Counters::default()),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn shutdown_handle(&self) -> ShutdownHandle {
        self.stop.clone()
    }

    pub fn model(&self) -> Arc<Model> {
        Arc::clone(&self.model)
    }

    /// Accept loop; returns after shutdown once every session has ended.
    pub fn run(self) -> Result<ServiceStats, ServiceError> {
        info!(
            "serving {} on {} (max {} sessions, timeout {:?})",
            self.model.mode,
            self.local_addr()?,
            self.limits.max_sessions,
            self.limits.session_timeout
        );
        let mut workers: Vec<JoinHandle<()>> = Vec::new();
        while !self.stop.is_shutdown() {
            let stream = match self.listener.accept() {
                Ok((stream, _)) => stream,
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    thread::sleep(ACCEPT_POLL);
                    continue;
                }
                Err(e) => {
                    error!("accept failed: {e}");
                    thread::sleep(ACCEPT_POLL);
                    continue;
                }
            };
            stream.set_nonblocking(false)?;
            stream.set_nodelay(true).ok();
            workers.retain(|w| !w.is_finished());
            let c = &self.counters;
            if c.active.fetch_add(1, Ordering::SeqCst) >= self.limits.max_sessions {
                c.active.fetch_sub(1, Ordering::SeqCst);
                c.busy.fetch_add(1, Ordering::SeqCst);
                warn!("rejecting {:?}: at capacity", stream.peer_addr().ok());
                workers.push(thread::spawn(move || reject_busy(stream)));
                continue;
            }
            let guard = ActiveGuard(Arc::clone(c));
            let model = Arc::clone(&self.model);
            let limits = self.limits;
            let counters = Arc::clone(c);
            workers.push(thread::spawn(move || {
                let _guard = guard;
                let report = handle_session(stream, &model, &limits);
                let slot = if report.ok() { &counters.ok } else { &counters.failed };
                slot.fetch_add(1, Ordering::SeqCst);
            }));
        }
        for w in workers {
            let _ = w.join();
        }
        let c = &self.counters;
        Ok(ServiceStats {
            sessions_ok: c.ok.load(Ordering::SeqCst),
            sessions_failed: c.failed.load(Ordering::SeqCst),
            busy_rejections: c.busy.load(Ordering::SeqCst),
        })
    }

    /// Runs the accept loop on a background thread.
    pub fn spawn(self) -> Result<RunningService, ServiceError> {
        let addr = self.local_addr()?;
        let handle = self.shutdown_handle();
        let model = self.model();
        let join = thread::spawn(move || self.run());
        Ok(RunningService {
            addr,
            handle,
            model,
            join,
        })
    }
}

pub struct RunningService {
    pub addr: SocketAddr,
    pub handle: ShutdownHandle,
    pub model: Arc<Model>,
    join: JoinHandle<Result<ServiceStats, ServiceError>>,
}

impl RunningService {
    pub fn stop(self) -> Result<ServiceStats, ServiceError> {
        self.handle.shutdown();
        self.join.join().expect("service thread panicked")
    }
}
