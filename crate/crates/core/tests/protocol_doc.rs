//! The byte examples in protocol.md must be what the encoder produces.

use secdood_core::protocol::{decode_frame, encode_frame, Message};

const DOC: &str = include_str!("../../../protocol.md");

fn hex_blocks() -> Vec<Vec<u8>> {
    DOC.split("```")
        .skip(1)
        .step_by(2)
        .filter(|b| !b.trim().is_empty() && b.split_whitespace().all(|t| t.len() == 2 && u8::from_str_radix(t, 16).is_ok()))
        .map(|b| b.split_whitespace().map(|t| u8::from_str_radix(t, 16).unwrap()).collect())
        .collect()
}

#[test]
fn documented_examples_match_the_encoder() {
    let want = [
        Message::Hello { client_id: 0, caps: 0 },
        Message::Error {
            code: 3,
            text: "busy".into(),
        },
        Message::PlainFeatures {
            session: 1,
            channels: vec![(2, 1.0)],
        },
    ];
    let blocks = hex_blocks();
    assert_eq!(blocks.len(), want.len());
    for (bytes, msg) in blocks.iter().zip(&want) {
        assert_eq!(&encode_frame(msg).unwrap(), bytes, "{msg:?}");
        assert_eq!(&decode_frame(bytes).unwrap(), msg);
    }
}
