//! Length-prefixed binary messages between the server and TCP clients.
//!
//! Frame: `[length u32 LE][type u8][payload]`, where `length` counts the type
//! byte plus the payload. All integers and floats are little-endian.
//!
//! | tag  | message     | payload |
//! |------|-------------|---------|
//! | 0x01 | HELLO       | client_id u32, proto_version u16 |
//! | 0x02 | FIT         | round u32, epochs u32, lr f64, shuffle_seed u64, param blob |
//! | 0x03 | FIT_RESULT  | client_id u32, num_samples u64, train_loss f64, param blob |
//! | 0x04 | EVAL        | param blob |
//! | 0x05 | EVAL_RESULT | rmse f64, success f64 |
//! | 0x06 | SHUTDOWN    | (empty) |
//!
//! A param blob is `param_count u64` followed by that many f64 values.
//! Messages only ever carry parameters and scalar metrics.

use std::io::{self, Read, Write};

use thiserror::Error;

pub const PROTO_VERSION: u16 = 1;
/// Largest accepted value of the length field.
pub const MAX_FRAME: usize = 256 << 20;

const TAG_HELLO: u8 = 0x01;
const TAG_FIT: u8 = 0x02;
const TAG_FIT_RESULT: u8 = 0x03;
const TAG_EVAL: u8 = 0x04;
const TAG_EVAL_RESULT: u8 = 0x05;
const TAG_SHUTDOWN: u8 = 0x06;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("unknown message tag 0x{0:02x}")]
    BadTag(u8),
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("frame length {0} exceeds the {MAX_FRAME}-byte cap")]
    Oversize(u64),
    #[error("protocol version {0} is not supported (expected {PROTO_VERSION})")]
    Version(u16),
    #[error("malformed payload: {0}")]
    Structure(String),
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitRequest {
    pub round: u32,
    pub epochs: u32,
    pub lr: f64,
    pub shuffle_seed: u64,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub client_id: u32,
    pub num_samples: u64,
    pub train_loss: f64,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { client_id: u32, proto_version: u16 },
    Fit(FitRequest),
    FitResult(FitResult),
    Eval { params: Vec<f64> },
    EvalResult { rmse: f64, success: f64 },
    Shutdown,
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::Hello { .. } => TAG_HELLO,
            Message::Fit(_) => TAG_FIT,
            Message::FitResult(_) => TAG_FIT_RESULT,
            Message::Eval { .. } => TAG_EVAL,
            Message::EvalResult { .. } => TAG_EVAL_RESULT,
            Message::Shutdown => TAG_SHUTDOWN,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "HELLO",
            Message::Fit(_) => "FIT",
            Message::FitResult(_) => "FIT_RESULT",
            Message::Eval { .. } => "EVAL",
            Message::EvalResult { .. } => "EVAL_RESULT",
            Message::Shutdown => "SHUTDOWN",
        }
    }
}

fn put_params(out: &mut Vec<u8>, params: &[f64]) {
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    out.reserve(params.len() * 8);
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
}

/// Encodes a complete frame, length prefix included.
pub fn encode_message(msg: &Message) -> Vec<u8> {
    let mut out = vec![0; 4];
    out.push(msg.tag());
    match msg {
        Message::Hello {
            client_id,
            proto_version,
        } => {
            out.extend_from_slice(&client_id.to_le_bytes());
            out.extend_from_slice(&proto_version.to_le_bytes());
        }
        Message::Fit(f) => {
            out.extend_from_slice(&f.round.to_le_bytes());
            out.extend_from_slice(&f.epochs.to_le_bytes());
            out.extend_from_slice(&f.lr.to_le_bytes());
            out.extend_from_slice(&f.shuffle_seed.to_le_bytes());
            put_params(&mut out, &f.params);
        }
        Message::FitResult(r) => {
            out.extend_from_slice(&r.client_id.to_le_bytes());
            out.extend_from_slice(&r.num_samples.to_le_bytes());
            out.extend_from_slice(&r.train_loss.to_le_bytes());
            put_params(&mut out, &r.params);
        }
        Message::Eval { params } => put_params(&mut out, params),
        Message::EvalResult { rmse, success } => {
            out.extend_from_slice(&rmse.to_le_bytes());
            out.extend_from_slice(&success.to_le_bytes());
        }
        Message::Shutdown => {}
    }
    let len = (out.len() - 4) as u32;
    out[..4].copy_from_slice(&len.to_le_bytes());
    out
}

struct Payload<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Payload<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(ProtocolError::Structure(format!(
                "payload ends {} bytes short at offset {}",
                n - available,
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, ProtocolError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ProtocolError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Parameter blob; it must run exactly to the end of the payload.
    fn params(&mut self) -> Result<Vec<f64>, ProtocolError> {
        let count = self.u64()?;
        let rest = self.bytes.len() - self.pos;
        if count.checked_mul(8) != Some(rest as u64) {
            return Err(ProtocolError::Structure(format!(
                "param_count {count} does not match a {rest}-byte blob"
            )));
        }
        Ok(self
            .take(rest)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(self) -> Result<(), ProtocolError> {
        if self.pos != self.bytes.len() {
            return Err(ProtocolError::Structure(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Decodes a tag and its payload (the frame without the length prefix).
pub fn decode_body(tag: u8, payload: &[u8]) -> Result<Message, ProtocolError> {
    let mut p = Payload {
        bytes: payload,
        pos: 0,
    };
    let msg = match tag {
        TAG_HELLO => {
            let client_id = p.u32()?;
            let proto_version = p.u16()?;
            if proto_version != PROTO_VERSION {
                return Err(ProtocolError::Version(proto_version));
            }
            Message::Hello {
                client_id,
                proto_version,
            }
        }
        TAG_FIT => Message::Fit(FitRequest {
            round: p.u32()?,
            epochs: p.u32()?,
            lr: p.f64()?,
            shuffle_seed: p.u64()?,
            params: p.params()?,
        }),
        TAG_FIT_RESULT => Message::FitResult(FitResult {
            client_id: p.u32()?,
            num_samples: p.u64()?,
            train_loss: p.f64()?,
            params: p.params()?,
        }),
        TAG_EVAL => Message::Eval {
            params: p.params()?,
        },
        TAG_EVAL_RESULT => Message::EvalResult {
            rmse: p.f64()?,
            success: p.f64()?,
        },
        TAG_SHUTDOWN => Message::Shutdown,
        other => return Err(ProtocolError::BadTag(other)),
    };
    p.finish()?;
    Ok(msg)
}

fn frame_len(prefix: [u8; 4]) -> Result<usize, ProtocolError> {
    let len = u32::from_le_bytes(prefix) as usize;
    if len > MAX_FRAME {
        return Err(ProtocolError::Oversize(len as u64));
    }
    if len == 0 {
        return Err(ProtocolError::Truncated {
            needed: 1,
            available: 0,
        });
    }
    Ok(len)
}

/// Decodes exactly one complete frame.
pub fn decode_message(bytes: &[u8]) -> Result<Message, ProtocolError> {
    if bytes.len() < 4 {
        return Err(ProtocolError::Truncated {
            needed: 4,
            available: bytes.len(),
        });
    }
    let len = frame_len(bytes[..4].try_into().unwrap())?;
    let body = &bytes[4..];
    if body.len() < len {
        return Err(ProtocolError::Truncated {
            needed: len,
            available: body.len(),
        });
    }
    if body.len() > len {
        return Err(ProtocolError::Structure(format!(
            "{} bytes after the frame",
            body.len() - len
        )));
    }
    decode_body(body[0], &body[1..])
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<(), ProtocolError> {
    w.write_all(&encode_message(msg))?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. A clean end of stream before the first byte is `Closed`.
pub fn read_message<R: Read>(r: &mut R) -> Result<Message, ProtocolError> {
    let mut prefix = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut prefix[got..]) {
            Ok(0) if got == 0 => return Err(ProtocolError::Closed),
            Ok(0) => {
                return Err(ProtocolError::Truncated {
                    needed: 4,
                    available: got,
                })
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = frame_len(prefix)?;
    let mut body = Vec::new();
    let read = r.take(len as u64).read_to_end(&mut body)?;
    if read < len {
        return Err(ProtocolError::Truncated {
            needed: len,
            available: read,
        });
    }
    decode_body(body[0], &body[1..])
}
