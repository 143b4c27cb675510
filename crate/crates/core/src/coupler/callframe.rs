//! The call frame exchanged between the coupler and a kernel.
//!
//! ```text
//! callId u32 | functionId u32 | callCount u32
//! nInts u32 | nLongs u32 | nFloats u32 | nDoubles u32 | nStrings u32
//! ints i32* | longs i64* | floats f32* | doubles f64* | strings (u32 len, UTF-8)*
//! ```
//! All integers are little-endian. A reply whose functionId is 0 is an error
//! and carries exactly one string, the message.

use crate::wire::{Reader, WireError, Writer};

/// Function id reserved for error replies.
pub const ERROR_FUNCTION: u32 = 0;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CallFrame {
    pub call_id: u32,
    pub function_id: u32,
    pub call_count: u32,
    pub ints: Vec<i32>,
    pub longs: Vec<i64>,
    pub floats: Vec<f32>,
    pub doubles: Vec<f64>,
    pub strings: Vec<String>,
}

impl CallFrame {
    pub fn new(call_id: u32, function_id: u32, call_count: u32) -> Self {
        Self {
            call_id,
            function_id,
            call_count,
            ..Self::default()
        }
    }

    pub fn error(call_id: u32, message: impl Into<String>) -> Self {
        Self {
            call_id,
            function_id: ERROR_FUNCTION,
            call_count: 1,
            strings: vec![message.into()],
            ..Self::default()
        }
    }

    pub fn is_error(&self) -> bool {
        self.function_id == ERROR_FUNCTION
    }

    /// The message of an error reply.
    pub fn error_message(&self) -> Option<&str> {
        if self.is_error() {
            self.strings.first().map(String::as_str)
        } else {
            None
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.call_id).u32(self.function_id).u32(self.call_count);
        w.u32(self.ints.len() as u32)
            .u32(self.longs.len() as u32)
            .u32(self.floats.len() as u32)
            .u32(self.doubles.len() as u32)
            .u32(self.strings.len() as u32);
        for &v in &self.ints {
            w.i32(v);
        }
        for &v in &self.longs {
            w.i64(v);
        }
        for &v in &self.floats {
            w.f32(v);
        }
        for &v in &self.doubles {
            w.f64(v);
        }
        for s in &self.strings {
            w.str(s);
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let call_id = r.u32()?;
        let function_id = r.u32()?;
        let call_count = r.u32()?;
        let mut counts = [0usize; 5];
        for c in &mut counts {
            *c = r.u32()? as usize;
        }
        // fixed-width sections must fit before anything is allocated
        let fixed = counts[0] * 4 + counts[1] * 8 + counts[2] * 4 + counts[3] * 8;
        if r.remaining() < fixed + counts[4] * 4 {
            return Err(WireError::Truncated {
                needed: fixed + counts[4] * 4 - r.remaining(),
            });
        }
        let ints = (0..counts[0]).map(|_| r.i32()).collect::<Result<_, _>>()?;
        let longs = (0..counts[1]).map(|_| r.i64()).collect::<Result<_, _>>()?;
        let floats = (0..counts[2]).map(|_| r.f32()).collect::<Result<_, _>>()?;
        let doubles = (0..counts[3]).map(|_| r.f64()).collect::<Result<_, _>>()?;
        let strings = (0..counts[4]).map(|_| r.str()).collect::<Result<_, _>>()?;
        r.finish()?;
        Ok(Self {
            call_id,
            function_id,
            call_count,
            ints,
            longs,
            floats,
            doubles,
            strings,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_fixed() {
        let mut f = CallFrame::new(7, 3, 1);
        f.ints = vec![-1];
        f.doubles = vec![0.5];
        f.strings = vec!["ab".into()];
        let b = f.encode();
        let mut want = Vec::new();
        for v in [7u32, 3, 1, 1, 0, 0, 1, 1] {
            want.extend_from_slice(&v.to_le_bytes());
        }
        want.extend_from_slice(&(-1i32).to_le_bytes());
        want.extend_from_slice(&0.5f64.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(b"ab");
        assert_eq!(b, want);
        assert_eq!(CallFrame::decode(&b).unwrap(), f);
    }

    #[test]
    fn error_reply() {
        let e = CallFrame::error(9, "boom");
        assert!(e.is_error());
        let back = CallFrame::decode(&e.encode()).unwrap();
        assert_eq!(back.error_message(), Some("boom"));
        assert_eq!(back.call_id, 9);
    }

    #[test]
    fn rejects_damage() {
        let mut f = CallFrame::new(1, 2, 2);
        f.longs = vec![1, 2];
        let b = f.encode();
        assert!(CallFrame::decode(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(matches!(CallFrame::decode(&extra), Err(WireError::Trailing(1))));
        let mut huge = b;
        huge[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(CallFrame::decode(&huge).is_err());
    }

    proptest! {
        #[test]
        fn round_trips(
            call_id: u32, function_id: u32, call_count: u32,
            ints in proptest::collection::vec(any::<i32>(), 0..8),
            longs in proptest::collection::vec(any::<i64>(), 0..8),
            floats in proptest::collection::vec(any::<f32>(), 0..8),
            doubles in proptest::collection::vec(any::<f64>(), 0..8),
            strings in proptest::collection::vec(".{0,12}", 0..4),
        ) {
            let f = CallFrame { call_id, function_id, call_count, ints, longs, floats, doubles, strings };
            let back = CallFrame::decode(&f.encode()).unwrap();
            // compare bit patterns so NaN payloads count
            prop_assert_eq!(back.encode(), f.encode());
        }
    }
}
