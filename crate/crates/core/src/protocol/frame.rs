//! Length-prefixed canonical frames.
//!
//! A frame is a 4-byte big-endian length `N` followed by `N` bytes of UTF-8
//! object notation with lexicographically sorted keys and no insignificant
//! whitespace. Browser sockets carry the same text without the prefix.

use serde_json::Value;
use thiserror::Error;

use super::{EncodeError, Envelope, MsgType};

pub const FRAME_PREFIX_LEN: usize = 4;

/// Upper bound on a single frame body; anything larger is treated as corrupt.
pub const MAX_FRAME_LEN: usize = 64 * 1024 * 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("need more bytes: have {have}, frame needs {needed}")]
    NeedMoreBytes { have: usize, needed: usize },
    /// Unknown message type; carries the offending type name.
    #[error("protocol error: unknown msg_type `{0}`")]
    Protocol(String),
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("frame length {0} exceeds limit")]
    TooLarge(usize),
}

/// Canonical text form of an envelope, without a length prefix.
pub fn encode_text(envelope: &Envelope) -> Result<String, EncodeError> {
    envelope.validate()?;
    // Going through `Value` sorts every object's keys (its map is ordered).
    let value = serde_json::to_value(envelope).map_err(|e| EncodeError::Serialize(e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| EncodeError::Serialize(e.to_string()))
}

pub fn encode_frame(envelope: &Envelope) -> Result<Vec<u8>, EncodeError> {
    let text = encode_text(envelope)?;
    let len = u32::try_from(text.len())
        .ok()
        .filter(|&n| n as usize <= MAX_FRAME_LEN)
        .ok_or_else(|| EncodeError::Serialize(format!("frame of {} bytes too large", text.len())))?;
    let mut out = Vec::with_capacity(FRAME_PREFIX_LEN + text.len());
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(text.as_bytes());
    Ok(out)
}

/// Decodes the first frame in `bytes`, returning the envelope and the number
/// of bytes consumed.
pub fn decode_frame(bytes: &[u8]) -> Result<(Envelope, usize), DecodeError> {
    if bytes.len() < FRAME_PREFIX_LEN {
        return Err(DecodeError::NeedMoreBytes { have: bytes.len(), needed: FRAME_PREFIX_LEN });
    }
    let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if len > MAX_FRAME_LEN {
        return Err(DecodeError::TooLarge(len));
    }
    let total = FRAME_PREFIX_LEN + len;
    if bytes.len() < total {
        return Err(DecodeError::NeedMoreBytes { have: bytes.len(), needed: total });
    }
    let body = std::str::from_utf8(&bytes[FRAME_PREFIX_LEN..total])
        .map_err(|e| DecodeError::Malformed(e.to_string()))?;
    Ok((decode_text(body)?, total))
}

/// Decodes one unprefixed envelope.
pub fn decode_text(text: &str) -> Result<Envelope, DecodeError> {
    let value: Value = serde_json::from_str(text).map_err(|e| DecodeError::Malformed(e.to_string()))?;
    let msg_type = value
        .get("msg_type")
        .ok_or_else(|| DecodeError::Malformed("missing msg_type".into()))?;
    let name = msg_type
        .as_str()
        .ok_or_else(|| DecodeError::Malformed("msg_type is not a string".into()))?;
    if name.parse::<MsgType>().is_err() {
        return Err(DecodeError::Protocol(name.to_string()));
    }
    let envelope: Envelope =
        serde_json::from_value(value).map_err(|e| DecodeError::Malformed(e.to_string()))?;
    if envelope.sender.name.is_empty() {
        return Err(DecodeError::Malformed("sender name is empty".into()));
    }
    Ok(envelope)
}
