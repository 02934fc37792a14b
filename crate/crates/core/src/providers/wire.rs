//! OAV1 framing.
//!
//! A connection opens with both sides sending the 4 ASCII bytes `OAV1`.
//! Every message after that is
//!
//! ```text
//! length  u32 LE      bytes that follow (header line + payload)
//! header  UTF-8 JSON  one object with a "kind" field, terminated by '\n'
//! payload raw bytes   f32 LE tensors, or PNG (+ mask) bytes for REGISTER_VIEW
//! ```
//!
//! One request is in flight per connection; every request gets exactly one
//! response. `ERROR` may answer any request.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use super::{ProviderError, Result};

pub const MAGIC: &[u8; 4] = b"OAV1";
pub const PROTOCOL_VERSION: u32 = 1;
/// Upper bound on a single message, to reject garbage lengths early.
pub const MAX_MESSAGE: usize = 1 << 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RequestHeader {
    Hello {
        version: u32,
    },
    RegisterView {
        height: usize,
        width: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        image_id: Option<String>,
        png_bytes: usize,
        /// 0, or `height * width` bytes of 0/1 mask after the PNG.
        #[serde(default)]
        mask_bytes: usize,
    },
    Logits {
        view: u64,
        prompt: Vec<u32>,
        prefix: Vec<u32>,
    },
    Attention {
        view: u64,
    },
    Close {},
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ResponseHeader {
    Hello {
        version: u32,
        session_id: String,
        vocab_size: usize,
        eos_token: u32,
        vocab: Vec<String>,
    },
    View {
        handle: u64,
    },
    Logits {
        vocab_size: usize,
    },
    Attention {
        heads: usize,
        grid_h: usize,
        grid_w: usize,
    },
    Bye {},
    Error {
        message: String,
    },
}

/// Encode one message (length prefix included).
pub fn encode<H: Serialize>(header: &H, payload: &[u8]) -> Vec<u8> {
    let mut line = serde_json::to_vec(header).expect("headers serialize");
    line.push(b'\n');
    let len = (line.len() + payload.len()) as u32;
    let mut out = Vec::with_capacity(4 + len as usize);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&line);
    out.extend_from_slice(payload);
    out
}

pub fn write_message<H: Serialize>(w: &mut impl Write, header: &H, payload: &[u8]) -> io::Result<()> {
    w.write_all(&encode(header, payload))?;
    w.flush()
}

/// Read one message; `Ok(None)` on a clean EOF before the length prefix.
pub fn read_message<H: for<'de> Deserialize<'de>>(
    r: &mut impl Read,
) -> Result<Option<(H, Vec<u8>)>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_MESSAGE {
        return Err(ProviderError::Protocol(format!("message of {len} bytes too large")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    let nl = body
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ProviderError::Protocol("header line is not terminated".into()))?;
    let header = serde_json::from_slice(&body[..nl])
        .map_err(|e| ProviderError::Protocol(format!("bad header: {e}")))?;
    let payload = body.split_off(nl + 1);
    Ok(Some((header, payload)))
}

pub fn write_magic(w: &mut impl Write) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.flush()
}

pub fn expect_magic(r: &mut impl Read) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != MAGIC {
        return Err(ProviderError::Handshake(format!(
            "expected magic OAV1, got {:?}",
            String::from_utf8_lossy(&m)
        )));
    }
    Ok(())
}

pub fn f32_payload(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

pub fn parse_f32_payload(payload: &[u8], expected: usize) -> Result<Vec<f32>> {
    if payload.len() != expected * 4 {
        return Err(ProviderError::Protocol(format!(
            "expected {expected} f32 values, payload has {} bytes",
            payload.len()
        )));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hello_frame_bytes() {
        let bytes = encode(&RequestHeader::Hello { version: 1 }, &[]);
        let line = b"{\"kind\":\"HELLO\",\"version\":1}\n";
        assert_eq!(&bytes[..4], &(line.len() as u32).to_le_bytes());
        assert_eq!(&bytes[4..], line);
    }

    #[test]
    fn message_roundtrip_with_payload() {
        let h = ResponseHeader::Logits { vocab_size: 2 };
        let payload = f32_payload([1.5, -2.0]);
        let bytes = encode(&h, &payload);
        let (back, p): (ResponseHeader, _) = read_message(&mut bytes.as_slice()).unwrap().unwrap();
        assert_eq!(back, h);
        assert_eq!(parse_f32_payload(&p, 2).unwrap(), vec![1.5, -2.0]);
        assert!(parse_f32_payload(&p, 3).is_err());
    }

    #[test]
    fn eof_and_garbage() {
        let empty: &[u8] = &[];
        assert!(read_message::<RequestHeader>(&mut &*empty).unwrap().is_none());
        let mut bad = 5u32.to_le_bytes().to_vec();
        bad.extend_from_slice(b"{}}}}");
        assert!(matches!(
            read_message::<RequestHeader>(&mut bad.as_slice()),
            Err(ProviderError::Protocol(_))
        ));
        let mut huge = u32::MAX.to_le_bytes().to_vec();
        huge.extend_from_slice(b"x");
        assert!(read_message::<RequestHeader>(&mut huge.as_slice()).is_err());
    }

    #[test]
    fn magic_check() {
        assert!(expect_magic(&mut &b"OAV1"[..]).is_ok());
        assert!(matches!(
            expect_magic(&mut &b"OAV2"[..]),
            Err(ProviderError::Handshake(_))
        ));
    }
}
