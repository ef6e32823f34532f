//! The device half of a session: upload construction, the frame exchange and
//! parameter decryption.

use std::io::{Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::thread;
use std::time::Duration;

use log::{debug, warn};
use rayon::prelude::*;

use secdood_core::crypto::{Ciphertext, EncryptedInput, FixedPointCodec, KeyPair, PublicKey};
use secdood_core::hypernet::GeneratedParams;
use secdood_core::mask::MaskPlan;
use secdood_core::protocol::{
    read_frame, write_frame, Dialogue, ErrorCode, Message, Peer, ProtocolError, CAP_WANT_MASK_PLAN, SENTINEL_VALUE,
};

use crate::DeviceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: usize,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::from_millis(200),
        }
    }
}

impl RetryPolicy {
    /// Runs `op` until it succeeds, fails permanently, or attempts run out,
    /// doubling the pause after each retryable failure.
    pub fn run<T>(&self, mut op: impl FnMut(usize) -> Result<T, DeviceError>) -> Result<T, DeviceError> {
        let mut wait = self.initial_backoff;
        let mut attempt = 0;
        loop {
            attempt += 1;
            match op(attempt) {
                Err(e) if e.retryable() && attempt < self.attempts => {
                    warn!("attempt {attempt} failed: {e}; retrying in {wait:?}");
                    thread::sleep(wait);
                    wait *= 2;
                }
                Err(e) if e.retryable() => {
                    return Err(DeviceError::Unreachable {
                        attempts: attempt,
                        last: e.to_string(),
                    })
                }
                other => return other,
            }
        }
    }
}

pub fn connect(addr: &str, timeout: Duration) -> Result<TcpStream, DeviceError> {
    let mut last = None;
    let addrs = addr
        .to_socket_addrs()
        .map_err(|e| DeviceError::Connect(format!("{addr}: {e}")))?;
    for a in addrs {
        match TcpStream::connect_timeout(&a, timeout) {
            Ok(s) => {
                s.set_read_timeout(Some(timeout)).ok();
                s.set_write_timeout(Some(timeout)).ok();
                s.set_nodelay(true).ok();
                return Ok(s);
            }
            Err(e) => last = Some(e),
        }
    }
    Err(DeviceError::Connect(format!(
        "{addr}: {}",
        last.map(|e| e.to_string()).unwrap_or_else(|| "no address".into())
    )))
}

/// FEATURES for the encrypted channels of `plan` only: masked channels are
/// never serialized. A fresh encryption of the sentinel constant follows.
pub fn encrypt_upload(
    pk: &PublicKey,
    profile: &[f64],
    plan: &MaskPlan,
    codec: &FixedPointCodec,
    session: u64,
) -> Result<Message, DeviceError> {
    if profile.len() != plan.channels() {
        return Err(DeviceError::Data(format!(
            "profile has {} channels, mask plan {}",
            profile.len(),
            plan.channels()
        )));
    }
    if let Some(i) = profile.iter().position(|v| !v.is_finite()) {
        return Err(DeviceError::Data(format!("profile channel {i} is not finite")));
    }
    let channels = plan
        .encrypted()
        .par_iter()
        .map(|&c| {
            Ok(EncryptedInput {
                index: c,
                ct: pk.encrypt(&codec.encode(profile[c], pk)?)?,
            })
        })
        .collect::<Result<Vec<_>, DeviceError>>()?;
    let sentinel = pk.encrypt(&codec.encode(SENTINEL_VALUE, pk)?)?;
    Ok(Message::Features {
        session,
        channels,
        sentinel,
    })
}

/// Checks the sentinel echo, then decodes `W` and `b` at their scale depth.
pub fn decrypt_params(
    keys: &KeyPair,
    msg: Message,
    codec: &FixedPointCodec,
    session: u64,
    features: usize,
    classes: usize,
) -> Result<GeneratedParams, DeviceError> {
    let Message::Params {
        session: got,
        features: f,
        classes: k,
        values,
        sentinel,
    } = msg
    else {
        return Err(DeviceError::Data(format!("expected PARAMS, got {}", msg.msg_type())));
    };
    if got != session {
        return Err(DeviceError::SessionMismatch { want: session, got });
    }
    if f as usize != features || k as usize != classes {
        return Err(DeviceError::Data(format!(
            "received a {f}x{k} classifier, data needs {features}x{classes}"
        )));
    }
    let decode = |ct: &Ciphertext| -> Result<f64, DeviceError> {
        let m = keys.private.decrypt(ct)?;
        Ok(codec.decode(&m, ct.scale(), &keys.public)?)
    };
    let echo = decode(&sentinel)?;
    let tol = 2f64.powi(-(codec.fraction_bits() as i32));
    if (echo - SENTINEL_VALUE).abs() > tol {
        return Err(DeviceError::SentinelMismatch { got: echo });
    }
    let flat = values.par_iter().map(decode).collect::<Result<Vec<_>, _>>()?;
    Ok(GeneratedParams::from_flat(features, classes, flat)?)
}

/// Frame I/O over any byte stream with the dialogue checked on both legs.
struct Channel<'a, S> {
    stream: &'a mut S,
    dialogue: Dialogue,
}

impl<S: Read + Write> Channel<'_, S> {
    fn send(&mut self, msg: &Message) -> Result<(), DeviceError> {
        self.dialogue.advance(Peer::Device, msg.msg_type())?;
        let sent = write_frame(self.stream, msg).and_then(|_| self.stream.flush().map_err(ProtocolError::Io));
        if let Err(e) = sent {
            // the cloud may have rejected an earlier frame and closed
            if let Ok(Message::Error { code, text }) = read_frame(self.stream) {
                return Err(DeviceError::Remote { code, text });
            }
            return Err(e.into());
        }
        Ok(())
    }

    fn recv(&mut self) -> Result<Message, DeviceError> {
        let msg = read_frame(self.stream)?;
        debug!("received {}", msg.msg_type());
        self.dialogue.advance(Peer::Cloud, msg.msg_type())?;
        if let Message::Error { code, text } = msg {
            return Err(DeviceError::Remote { code, text });
        }
        Ok(msg)
    }

    /// HELLO, then the cloud's plan if requested; the plan must equal ours.
    fn greet(&mut self, client_id: u64, plan: &MaskPlan, check_plan: bool) -> Result<(), DeviceError> {
        let caps = if check_plan { CAP_WANT_MASK_PLAN } else { 0 };
        self.send(&Message::Hello { client_id, caps })?;
        if check_plan {
            let Message::MaskPlan(remote) = self.recv()? else {
                unreachable!("only MASKPLAN or ERROR follow a plan request")
            };
            if &remote != plan {
                return Err(DeviceError::PlanMismatch {
                    local: plan.encrypted().to_vec(),
                    remote: remote.encrypted().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// What the device knows about one session before it starts.
#[derive(Debug, Clone)]
pub struct SessionSpec<'a> {
    pub client_id: u64,
    pub session: u64,
    pub plan: &'a MaskPlan,
    /// Batch-mean profile with masked channels already zeroed.
    pub profile: &'a [f64],
    pub classes: usize,
    /// Ask for the cloud's plan and abort unless it matches ours.
    pub check_plan: bool,
}

/// Encrypted session: HELLO, PUBKEY, FEATURES, then PARAMS.
pub fn exchange<S: Read + Write>(
    stream: &mut S,
    spec: &SessionSpec<'_>,
    keys: &KeyPair,
    codec: &FixedPointCodec,
) -> Result<GeneratedParams, DeviceError> {
    let upload = encrypt_upload(&keys.public, spec.profile, spec.plan, codec, spec.session)?;
    let mut ch = Channel {
        stream,
        dialogue: Dialogue::default(),
    };
    ch.greet(spec.client_id, spec.plan, spec.check_plan)?;
    ch.send(&Message::PubKey(keys.public.clone()))?;
    ch.send(&upload)?;
    let reply = ch.recv()?;
    decrypt_params(keys, reply, codec, spec.session, spec.plan.channels(), spec.classes)
}

/// Trusted-plaintext session: HELLO, PLAINFEATURES, then PLAINPARAMS.
pub fn exchange_plaintext<S: Read + Write>(stream: &mut S, spec: &SessionSpec<'_>) -> Result<GeneratedParams, DeviceError> {
    let channels = spec
        .plan
        .encrypted()
        .iter()
        .map(|&c| (c as u32, spec.profile[c] as f32))
        .collect();
    let mut ch = Channel {
        stream,
        dialogue: Dialogue::default(),
    };
    ch.greet(spec.client_id, spec.plan, spec.check_plan)?;
    ch.send(&Message::PlainFeatures {
        session: spec.session,
        channels,
    })?;
    let Message::PlainParams {
        session,
        features,
        classes,
        values,
    } = ch.recv()?
    else {
        unreachable!("only PLAINPARAMS or ERROR follow PLAINFEATURES")
    };
    if session != spec.session {
        return Err(DeviceError::SessionMismatch {
            want: spec.session,
            got: session,
        });
    }
    if features as usize != spec.plan.channels() || classes as usize != spec.classes {
        return Err(DeviceError::Data(format!("received a {features}x{classes} classifier")));
    }
    Ok(GeneratedParams::from_flat(
        features as usize,
        classes as usize,
        values.into_iter().map(f64::from).collect(),
    )?)
}

pub(crate) fn is_busy(e: &DeviceError) -> bool {
    matches!(e, DeviceError::Remote { code, .. } if *code == ErrorCode::Busy as u16)
}

#[cfg(test)]
mod tests {
    use super::*;
    use secdood_core::crypto::{keygen, KeyGenOptions};
    use secdood_core::mask::build_mask_plan;

    fn keys() -> KeyPair {
        keygen(KeyGenOptions::insecure_test(11)).unwrap()
    }

    #[test]
    fn upload_carries_ceil_alpha_c_ciphertexts() {
        let kp = keys();
        let codec = FixedPointCodec::default();
        let plan = build_mask_plan(&[0.1, 0.4, 0.3, 0.2], 0.5).unwrap();
        let Message::Features { channels, .. } = encrypt_upload(&kp.public, &[1.0, 2.0, 3.0, 4.0], &plan, &codec, 1).unwrap()
        else {
            panic!()
        };
        assert_eq!(channels.iter().map(|c| c.index).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn own_upload_decrypts_to_profile() {
        let kp = keys();
        let codec = FixedPointCodec::default();
        let profile = [0.25, -3.5, 7.125, 1e-3, -0.002, 12.0];
        let plan = MaskPlan::full(6);
        let Message::Features { channels, sentinel, .. } = encrypt_upload(&kp.public, &profile, &plan, &codec, 1).unwrap()
        else {
            panic!()
        };
        for c in &channels {
            let v = codec.decode(&kp.private.decrypt(&c.ct).unwrap(), 1, &kp.public).unwrap();
            assert!((v - profile[c.index]).abs() <= 2f64.powi(-24));
        }
        let s = codec.decode(&kp.private.decrypt(&sentinel).unwrap(), 1, &kp.public).unwrap();
        assert_eq!(s, SENTINEL_VALUE);
    }

    #[test]
    fn zero_profile_is_randomized() {
        let kp = keys();
        let codec = FixedPointCodec::default();
        let plan = MaskPlan::full(3);
        let Message::Features { channels, .. } = encrypt_upload(&kp.public, &[0.0; 3], &plan, &codec, 1).unwrap() else {
            panic!()
        };
        for c in &channels {
            assert_eq!(codec.decode(&kp.private.decrypt(&c.ct).unwrap(), 1, &kp.public).unwrap(), 0.0);
            // the trivial encryption of zero is the residue 1
            assert_ne!(c.ct, Ciphertext::from_parts(1u32.into(), 1).unwrap());
        }
        assert_ne!(channels[0].ct, channels[1].ct);
    }

    #[test]
    fn rejects_bad_profiles() {
        let kp = keys();
        let codec = FixedPointCodec::default();
        let plan = MaskPlan::full(2);
        assert!(matches!(
            encrypt_upload(&kp.public, &[1.0], &plan, &codec, 1),
            Err(DeviceError::Data(_))
        ));
        assert!(matches!(
            encrypt_upload(&kp.public, &[1.0, f64::NAN], &plan, &codec, 1),
            Err(DeviceError::Data(_))
        ));
        assert!(matches!(
            encrypt_upload(&kp.public, &[1.0, 1e9], &plan, &codec, 1),
            Err(DeviceError::Crypto(_))
        ));
    }

    #[test]
    fn retry_policy_backs_off_then_gives_up() {
        let policy = RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_millis(5),
        };
        let mut calls = 0;
        let start = std::time::Instant::now();
        let r: Result<(), _> = policy.run(|_| {
            calls += 1;
            Err(DeviceError::Connect("refused".into()))
        });
        assert_eq!(calls, 3);
        assert!(start.elapsed() >= Duration::from_millis(15));
        assert!(matches!(r, Err(DeviceError::Unreachable { attempts: 3, .. })));
        let mut calls = 0;
        let r = policy.run(|_| {
            calls += 1;
            Err::<(), _>(DeviceError::Data("bad".into()))
        });
        assert_eq!(calls, 1);
        assert!(matches!(r, Err(DeviceError::Data(_))));
    }
}
