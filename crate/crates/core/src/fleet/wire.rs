//! Frame format: a 4-byte big-endian length followed by one JSON object
//! whose `type` field names the message.

use std::io::{self, Read, Write};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EvalJob, EvalResult};
use crate::archgraph::Shape;
use crate::autodiff::Tensor;

pub const PROTOCOL: &str = "nasdip/1";
/// Frames above this size are rejected as malformed.
pub const MAX_FRAME: usize = 256 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello {
        protocol: String,
        #[serde(default)]
        slots: usize,
    },
    Blob {
        digest: String,
        data: String,
    },
    Job {
        job: EvalJob,
    },
    Result {
        result: EvalResult,
    },
    Bye {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
}

impl Message {
    pub fn hello(slots: usize) -> Self {
        Message::Hello {
            protocol: PROTOCOL.to_string(),
            slots,
        }
    }

    pub fn blob(image: &Tensor<f32>) -> Self {
        let bytes = encode_image(image);
        Message::Blob {
            digest: digest_bytes(&bytes),
            data: STANDARD.encode(bytes),
        }
    }
}

pub fn write_frame<W: Write>(w: &mut W, msg: &Message) -> io::Result<()> {
    let body = serde_json::to_vec(msg).map_err(io::Error::other)?;
    if body.len() > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame too large"));
    }
    let mut buf = Vec::with_capacity(4 + body.len());
    buf.extend_from_slice(&(body.len() as u32).to_be_bytes());
    buf.extend_from_slice(&body);
    w.write_all(&buf)?;
    w.flush()
}

/// Reads one frame. `Ok(None)` on a clean end of stream before any byte of
/// a new frame; `InvalidData` for oversized or unparsable frames.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Message>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_FRAME {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame of {n} bytes exceeds limit"),
        ));
    }
    let mut body = vec![0u8; n];
    r.read_exact(&mut body)?;
    serde_json::from_slice(&body)
        .map(Some)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

/// `[channels, height, width]` as u32 LE, then the samples as f32 LE.
pub fn encode_image(image: &Tensor<f32>) -> Vec<u8> {
    let s = image.shape;
    let mut out = Vec::with_capacity(12 + 4 * image.data.len());
    for d in [s.channels, s.height, s.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &image.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_image(bytes: &[u8]) -> Option<Tensor<f32>> {
    let dim = |i: usize| -> Option<usize> {
        Some(u32::from_le_bytes(bytes.get(4 * i..4 * i + 4)?.try_into().ok()?) as usize)
    };
    let shape = Shape::new(dim(0)?, dim(1)?, dim(2)?);
    let body = &bytes[12..];
    if body.len() != 4 * shape.numel() {
        return None;
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    Some(Tensor::from_vec(shape, data))
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content address of an image.
pub fn image_digest(image: &Tensor<f32>) -> String {
    digest_bytes(&encode_image(image))
}

/// Decodes a blob frame, checking its digest.
pub fn open_blob(digest: &str, data: &str) -> Result<Tensor<f32>, String> {
    let bytes = STANDARD
        .decode(data)
        .map_err(|e| format!("blob is not base64: {e}"))?;
    if digest_bytes(&bytes) != digest {
        return Err("blob digest mismatch".into());
    }
    decode_image(&bytes).ok_or_else(|| "blob has an inconsistent shape header".into())
}
