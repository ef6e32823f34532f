//! Frame fuzzing, a reference state table for the dialogue, and session
//! isolation over loopback.

use std::io::{self, Cursor, Read, Write};
use std::net::TcpStream;
use std::panic::{self, AssertUnwindSafe};
use std::thread;

use anyhow::{bail, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use secdood_cloud::{Limits, Model, ServeMode, Service};
use secdood_core::crypto::{keygen, Ciphertext, EncryptedInput, FixedPointCodec, KeyGenOptions};
use secdood_core::hypernet::{HyperNetConfig, HyperNetParams};
use secdood_core::mask::MaskPlan;
use secdood_core::protocol::{
    decode_frame, encode_frame, read_frame, write_frame, Dialogue, Message, MsgType, Peer, FRAME_HEADER_LEN,
};
use secdood_device::{decrypt_params, encrypt_upload, exchange, exchange_plaintext, DeviceError, SessionSpec};

use crate::Check;

fn sample_messages() -> Result<Vec<Message>> {
    let kp = keygen(KeyGenOptions::insecure_test(21))?;
    let codec = FixedPointCodec::default();
    let ct = |x: f64| -> Result<Ciphertext> { Ok(kp.public.encrypt(&codec.encode(x, &kp.public)?)?) };
    Ok(vec![
        Message::Hello { client_id: 9, caps: 1 },
        Message::PubKey(kp.public.clone()),
        Message::MaskPlan(MaskPlan::from_encrypted(6, 0.5, vec![0, 4, 5])?),
        Message::Features {
            session: 3,
            channels: vec![EncryptedInput { index: 1, ct: ct(0.5)? }, EncryptedInput { index: 4, ct: ct(-2.0)? }],
            sentinel: ct(0.8125)?,
        },
        Message::Params {
            session: 3,
            features: 1,
            classes: 1,
            values: vec![ct(1.0)?, ct(2.0)?],
            sentinel: ct(0.8125)?,
        },
        Message::PlainFeatures {
            session: 4,
            channels: vec![(0, 1.5), (2, -0.25)],
        },
        Message::PlainParams {
            session: 4,
            features: 1,
            classes: 2,
            values: vec![0.0, 1.0, 2.0, 3.0],
        },
        Message::Error {
            code: 4,
            text: "bad frame".into(),
        },
    ])
}

fn mutate(seed: &[u8], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut b = seed.to_vec();
    match rng.random_range(0..7) {
        0 => {
            let n = rng.random_range(0..96);
            (0..n).map(|_| rng.random()).collect()
        }
        1 => {
            for _ in 0..rng.random_range(1..8) {
                let i = rng.random_range(0..b.len());
                b[i] ^= 1 << rng.random_range(0..8);
            }
            b
        }
        2 => {
            b.truncate(rng.random_range(0..b.len()));
            b
        }
        3 => {
            b.extend((0..rng.random_range(1..32)).map(|_| rng.random::<u8>()));
            b
        }
        4 => {
            // header intact, declared length rewritten
            let len: u32 = if rng.random() { rng.random() } else { rng.random_range(0..b.len() as u32 + 8) };
            b[7..11].copy_from_slice(&len.to_le_bytes());
            b
        }
        5 => {
            b[6] = rng.random();
            b
        }
        _ => {
            // payload bytes scrambled in place, framing kept consistent
            for _ in 0..rng.random_range(1..16) {
                if b.len() > FRAME_HEADER_LEN {
                    let i = rng.random_range(FRAME_HEADER_LEN..b.len());
                    b[i] = rng.random();
                }
            }
            b
        }
    }
}

/// Decodes `frames` mutated frames; returns (panics, accepted).
pub fn fuzz_frames(frames: usize, seed: u64) -> Result<(usize, usize)> {
    let seeds: Vec<Vec<u8>> = sample_messages()?.iter().map(encode_frame).collect::<Result<_, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hook = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    let (mut panics, mut accepted) = (0, 0);
    for i in 0..frames {
        let bytes = mutate(&seeds[i % seeds.len()], &mut rng);
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| {
            let a = decode_frame(&bytes);
            let b = read_frame(&mut Cursor::new(&bytes));
            (a.is_ok(), b.is_ok())
        }));
        match outcome {
            Ok((a, _)) => accepted += a as usize,
            Err(_) => panics += 1,
        }
    }
    panic::set_hook(hook);
    Ok((panics, accepted))
}

/// Reference table: every complete session, written out. A transcript is
/// legal iff it is a prefix of one of these.
pub fn oracle_accepts(transcript: &[(Peer, MsgType)]) -> bool {
    use MsgType::*;
    use Peer::*;
    let happy: [&[(Peer, MsgType)]; 4] = [
        &[(Device, Hello), (Device, PubKey), (Device, Features), (Cloud, Params)],
        &[(Device, Hello), (Cloud, MaskPlan), (Device, PubKey), (Device, Features), (Cloud, Params)],
        &[(Device, Hello), (Device, PlainFeatures), (Cloud, PlainParams)],
        &[(Device, Hello), (Cloud, MaskPlan), (Device, PlainFeatures), (Cloud, PlainParams)],
    ];
    let mut complete: Vec<Vec<(Peer, MsgType)>> = happy.iter().map(|h| h.to_vec()).collect();
    for h in happy {
        for cut in 0..h.len() {
            for from in [Device, Cloud] {
                let mut t = h[..cut].to_vec();
                t.push((from, Error));
                complete.push(t);
            }
        }
    }
    complete.iter().any(|c| c.len() >= transcript.len() && c[..transcript.len()] == *transcript)
}

fn dialogue_accepts(transcript: &[(Peer, MsgType)]) -> bool {
    let mut d = Dialogue::default();
    transcript.iter().all(|&(p, t)| d.advance(p, t).is_ok())
}

/// Random transcripts, biased towards legal ones, judged by both the
/// production dialogue and the reference table.
pub fn fuzz_transcripts(count: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut disagreements, mut legal) = (0, 0);
    for _ in 0..count {
        let len = rng.random_range(0..7);
        let mut t = Vec::with_capacity(len);
        for _ in 0..len {
            let mut d = Dialogue::default();
            let follow = rng.random_bool(0.8) && t.iter().all(|&(p, ty)| d.advance(p, ty).is_ok());
            let next = if follow && !d.expected().is_empty() {
                let exp = d.expected();
                let ty = exp[rng.random_range(0..exp.len())];
                let from = ty.sender().unwrap_or(if rng.random() { Peer::Device } else { Peer::Cloud });
                (from, ty)
            } else {
                let ty = MsgType::ALL[rng.random_range(0..MsgType::ALL.len())];
                (if rng.random() { Peer::Device } else { Peer::Cloud }, ty)
            };
            t.push(next);
        }
        let want = oracle_accepts(&t);
        legal += want as usize;
        disagreements += (want != dialogue_accepts(&t)) as usize;
    }
    (disagreements, legal)
}

/// Logs each read and write chunk in order.
struct Tap<S> {
    inner: S,
    log: Vec<(Peer, Vec<u8>)>,
}

impl<S: Read> Read for Tap<S> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.log.push((Peer::Cloud, buf[..n].to_vec()));
        Ok(n)
    }
}

impl<S: Write> Write for Tap<S> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.log.push((Peer::Device, buf[..n].to_vec()));
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

/// Reassembles the frames on the wire, in the order they were exchanged.
fn transcript(log: &[(Peer, Vec<u8>)]) -> Result<Vec<(Peer, MsgType)>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < log.len() {
        let from = log[i].0;
        let mut run = Vec::new();
        while i < log.len() && log[i].0 == from {
            run.extend_from_slice(&log[i].1);
            i += 1;
        }
        let mut cur = Cursor::new(run.as_slice());
        while (cur.position() as usize) < run.len() {
            out.push((from, read_frame(&mut cur)?.msg_type()));
        }
    }
    Ok(out)
}

fn random_model(mode: ServeMode, plan: &MaskPlan) -> Result<Model> {
    let config = match mode {
        ServeMode::EncryptedAffine => HyperNetConfig::single(plan.channels(), 3),
        ServeMode::TrustedPlaintext => HyperNetConfig::two_layer(plan.channels(), 5, 3),
    };
    let params = HyperNetParams::init(config, &mut ChaCha8Rng::seed_from_u64(31))?;
    Ok(Model::new(params, plan.clone(), mode)?)
}

/// Encrypted and trusted-plaintext loopback sessions; returns each transcript.
pub fn loopback_transcripts() -> Result<Vec<Vec<(Peer, MsgType)>>> {
    let plan = MaskPlan::from_encrypted(6, 0.5, vec![0, 3, 4])?;
    let profile = vec![1.0, 0.0, -0.5, 2.0, 0.25, 0.0];
    let mut out = Vec::new();
    for mode in [ServeMode::EncryptedAffine, ServeMode::TrustedPlaintext] {
        let limits = Limits {
            insecure_test_keys: true,
            ..Limits::default()
        };
        let svc = Service::bind("127.0.0.1:0", random_model(mode, &plan)?, limits)?.spawn()?;
        let mut tap = Tap {
            inner: TcpStream::connect(svc.addr)?,
            log: Vec::new(),
        };
        let spec = SessionSpec {
            client_id: 1,
            session: 2,
            plan: &plan,
            profile: &profile,
            classes: 3,
            check_plan: true,
        };
        match mode {
            ServeMode::EncryptedAffine => {
                let kp = keygen(KeyGenOptions::insecure_test(22))?;
                exchange(&mut tap, &spec, &kp, &FixedPointCodec::default())?;
            }
            ServeMode::TrustedPlaintext => {
                exchange_plaintext(&mut tap, &spec)?;
            }
        }
        svc.stop()?;
        out.push(transcript(&tap.log)?);
    }
    Ok(out)
}

/// Two concurrent sessions under different keys; each PARAMS must decrypt
/// under its own key and be rejected under the other.
pub fn cross_key_isolation() -> Result<bool> {
    let plan = MaskPlan::from_encrypted(6, 0.5, vec![1, 2, 5])?;
    let limits = Limits {
        insecure_test_keys: true,
        ..Limits::default()
    };
    let svc = Service::bind("127.0.0.1:0", random_model(ServeMode::EncryptedAffine, &plan)?, limits)?.spawn()?;
    let addr = svc.addr;
    let codec = FixedPointCodec::default();
    let session = |seed: u64| {
        let plan = plan.clone();
        thread::spawn(move || -> Result<_> {
            let kp = keygen(KeyGenOptions::insecure_test(seed))?;
            let mut s = TcpStream::connect(addr)?;
            let profile = vec![0.5, 1.0, -1.0, 0.0, 0.0, 3.0];
            let upload = encrypt_upload(&kp.public, &profile, &plan, &codec, seed)?;
            for m in [Message::Hello { client_id: seed, caps: 0 }, Message::PubKey(kp.public.clone()), upload] {
                write_frame(&mut s, &m)?;
            }
            Ok((kp, read_frame(&mut s)?))
        })
    };
    let (a, b) = (session(41), session(42));
    let (Ok(a), Ok(b)) = (a.join(), b.join()) else {
        bail!("session thread panicked")
    };
    let ((ka, ma), (kb, mb)) = (a?, b?);
    svc.stop()?;
    let own = decrypt_params(&ka, ma.clone(), &codec, 41, 6, 3).is_ok() && decrypt_params(&kb, mb.clone(), &codec, 42, 6, 3).is_ok();
    let rejected = |r: Result<_, DeviceError>| matches!(r, Err(DeviceError::SentinelMismatch { .. } | DeviceError::Crypto(_)));
    Ok(own && rejected(decrypt_params(&kb, ma, &codec, 41, 6, 3)) && rejected(decrypt_params(&ka, mb, &codec, 42, 6, 3)))
}

pub fn protocol_robustness(frames: usize) -> Result<Check> {
    let (panics, accepted) = fuzz_frames(frames, 51)?;
    let (disagreements, legal) = fuzz_transcripts(frames, 52);
    let loopback = loopback_transcripts()?;
    let expected: [&[MsgType]; 2] = [
        &[MsgType::Hello, MsgType::MaskPlan, MsgType::PubKey, MsgType::Features, MsgType::Params],
        &[MsgType::Hello, MsgType::MaskPlan, MsgType::PlainFeatures, MsgType::PlainParams],
    ];
    let loopback_ok = loopback
        .iter()
        .zip(expected)
        .all(|(t, e)| oracle_accepts(t) && dialogue_accepts(t) && t.iter().map(|p| p.1).eq(e.iter().copied()));
    let isolated = cross_key_isolation()?;
    Ok(Check::new(
        panics == 0 && disagreements == 0 && loopback_ok && isolated,
        format!(
            "{frames} fuzzed frames: {panics} panics, {accepted} decoded; {frames} transcripts: {disagreements} disagreements ({legal} legal); loopback transcripts {}; cross-key isolation {}",
            if loopback_ok { "match" } else { "MISMATCH" },
            if isolated { "holds" } else { "BROKEN" }
        ),
    ))
}
