//! Little-endian framing shared by the hub, registry and daemon protocols.
//!
//! A control frame is `len: u32 LE | opcode: u8 | payload`, where `len`
//! counts every byte after the length field (opcode included). Strings are
//! `len: u32 LE | UTF-8 bytes`.

use std::io::{self, Read, Write};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("frame truncated: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("frame length {declared} does not match {actual} bytes present")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("invalid UTF-8 in string field")]
    Utf8,
    #[error("unexpected opcode {got:#04x}, wanted {wanted:#04x}")]
    UnexpectedOpcode { got: u8, wanted: u8 },
    #[error("frame of {0} bytes exceeds the size cap")]
    TooLarge(usize),
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
}

/// Opcodes of the control framing.
pub mod op {
    pub const ATTACH: u8 = 0x01;
    pub const ATTACH_ACK: u8 = 0x02;
    pub const GOSSIP: u8 = 0x03;
    pub const REVERSE_REQUEST: u8 = 0x04;
    pub const RELAY_OPEN: u8 = 0x05;
    pub const RELAY_DATA: u8 = 0x06;
    pub const RELAY_CLOSE: u8 = 0x07;
    pub const HELLO: u8 = 0x08;
    pub const DETACH: u8 = 0x09;

    pub const JOIN: u8 = 0x20;
    pub const LEAVE: u8 = 0x21;
    pub const HEARTBEAT: u8 = 0x22;
    pub const EVENT: u8 = 0x23;

    pub const CREATE_WORKER: u8 = 0x40;
    pub const CALL: u8 = 0x41;
    pub const STATUS: u8 = 0x42;
    pub const CANCEL_WORKER: u8 = 0x43;
    pub const STOP: u8 = 0x44;
    pub const REPORT_DRIFT: u8 = 0x45;
    pub const CALL_FAILED: u8 = 0x46;
    pub const OK: u8 = 0x4e;
    pub const FAIL: u8 = 0x4f;
}

pub fn encode_frame(opcode: u8, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + payload.len());
    out.extend_from_slice(&(payload.len() as u32 + 1).to_le_bytes());
    out.push(opcode);
    out.extend_from_slice(payload);
    out
}

/// Decodes exactly one control frame occupying all of `bytes`.
pub fn decode_frame(bytes: &[u8]) -> Result<(u8, &[u8]), WireError> {
    if bytes.len() < 5 {
        return Err(WireError::Truncated { needed: 5 - bytes.len() });
    }
    let declared = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    if declared != bytes.len() - 4 || declared == 0 {
        return Err(WireError::LengthMismatch {
            declared,
            actual: bytes.len() - 4,
        });
    }
    Ok((bytes[4], &bytes[5..]))
}

/// Decodes a frame and insists on its opcode.
pub fn expect_frame(bytes: &[u8], wanted: u8) -> Result<&[u8], WireError> {
    let (got, payload) = decode_frame(bytes)?;
    if got != wanted {
        return Err(WireError::UnexpectedOpcode { got, wanted });
    }
    Ok(payload)
}

/// Writes one control frame to a byte stream.
pub fn write_frame(w: &mut impl Write, opcode: u8, payload: &[u8]) -> io::Result<()> {
    w.write_all(&encode_frame(opcode, payload))?;
    w.flush()
}

/// Reads one control frame from a byte stream. Frames above `cap` bytes
/// are rejected before their body is read.
pub fn read_frame(r: &mut impl Read, cap: usize) -> io::Result<(u8, Vec<u8>)> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len == 0 || len > cap {
        return Err(io::Error::new(io::ErrorKind::InvalidData, WireError::TooLarge(len)));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    let opcode = body.remove(0);
    Ok((opcode, body))
}

#[derive(Debug, Default, Clone)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn i32(&mut self, v: i32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn i64(&mut self, v: i64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f32(&mut self, v: f32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    /// Length-prefixed byte string.
    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
        self
    }

    pub fn raw(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(b);
        self
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn frame(self, opcode: u8) -> Vec<u8> {
        encode_frame(opcode, &self.buf)
    }
}

#[derive(Debug, Clone)]
pub struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::Truncated {
                needed: n - self.buf.len(),
            });
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        self.array().map(u32::from_le_bytes)
    }

    pub fn i32(&mut self) -> Result<i32, WireError> {
        self.array().map(i32::from_le_bytes)
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        self.array().map(u64::from_le_bytes)
    }

    pub fn i64(&mut self) -> Result<i64, WireError> {
        self.array().map(i64::from_le_bytes)
    }

    pub fn f32(&mut self) -> Result<f32, WireError> {
        self.array().map(f32::from_le_bytes)
    }

    pub fn f64(&mut self) -> Result<f64, WireError> {
        self.array().map(f64::from_le_bytes)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], WireError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String, WireError> {
        let b = self.bytes()?;
        std::str::from_utf8(b).map(str::to_owned).map_err(|_| WireError::Utf8)
    }

    pub fn remaining(&self) -> usize {
        self.buf.len()
    }

    pub fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.buf)
    }

    pub fn finish(&self) -> Result<(), WireError> {
        match self.buf.len() {
            0 => Ok(()),
            n => Err(WireError::Trailing(n)),
        }
    }
}
