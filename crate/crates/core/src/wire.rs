//! Binary framing of the round protocol.
//!
//! Every message travels as one frame:
//!
//! ```text
//! offset  size  field
//! 0       4     body length L (u32, little endian), excluding these 4 bytes
//! 4       4     magic "FGVI"
//! 8       2     version (u16 LE), currently 1
//! 10      1     message type: 1 Broadcast, 2 Update, 3 Ack, 4 Abort
//! 11      ..    payload (type specific, below)
//! 4+L-4   4     CRC-32 (IEEE) of bytes [4, 4+L-4), u32 LE
//! ```
//!
//! Payloads (all integers and floats little endian, floats IEEE-754 binary64,
//! matrices row-major):
//!
//! ```text
//! Broadcast  round u64 | dim u32 | precision f64[dim*dim] | shift f64[dim]
//! Update     client_id u32 | round u64 | dim u32 | Δprecision f64[dim*dim] | Δshift f64[dim]
//! Ack        (empty)
//! Abort      reason_len u32 | reason UTF-8 bytes
//! ```
//!
//! An `Ack` is therefore an 11 byte body (magic, version, type, CRC) behind a
//! 4 byte length prefix: `0b000000 46475649 0100 03 <crc32>`.
//! The checksum makes every single-byte corruption of a frame a decode error.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::client::SiteFactor;
use crate::error::{FedGviError, Result};
use crate::exp_family::NatGaussian;
use crate::linalg::SymMat;
use nalgebra::DVector;

pub const MAGIC: [u8; 4] = *b"FGVI";
pub const VERSION: u16 = 1;
pub const MAX_DIM: u32 = 1 << 20;
/// Largest body accepted from a stream.
pub const MAX_FRAME_LEN: u32 = 1 << 30;

const TYPE_BROADCAST: u8 = 1;
const TYPE_UPDATE: u8 = 2;
const TYPE_ACK: u8 = 3;
const TYPE_ABORT: u8 = 4;
const HEADER_LEN: usize = 7;
const CRC_LEN: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated frame: needed {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unknown protocol version {0}")]
    UnknownVersion(u16),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("length mismatch: declared {declared}, actual {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("dimension {0} exceeds the protocol limit")]
    DimensionTooLarge(u64),
    #[error("abort reason is not valid UTF-8")]
    InvalidUtf8,
    #[error("invalid message: {0}")]
    InvalidMessage(String),
}

#[derive(Clone, Debug)]
pub enum RoundMessage {
    Broadcast {
        round: u64,
        precision: Vec<f64>,
        shift: Vec<f64>,
    },
    Update {
        client_id: u32,
        round: u64,
        delta_precision: Vec<f64>,
        delta_shift: Vec<f64>,
    },
    Ack,
    Abort {
        reason: String,
    },
}

fn bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Bit-level equality: floats compare by their IEEE-754 encoding.
impl PartialEq for RoundMessage {
    fn eq(&self, other: &Self) -> bool {
        use RoundMessage::*;
        match (self, other) {
            (
                Broadcast {
                    round: r1,
                    precision: p1,
                    shift: s1,
                },
                Broadcast {
                    round: r2,
                    precision: p2,
                    shift: s2,
                },
            ) => r1 == r2 && bits_eq(p1, p2) && bits_eq(s1, s2),
            (
                Update {
                    client_id: c1,
                    round: r1,
                    delta_precision: p1,
                    delta_shift: s1,
                },
                Update {
                    client_id: c2,
                    round: r2,
                    delta_precision: p2,
                    delta_shift: s2,
                },
            ) => c1 == c2 && r1 == r2 && bits_eq(p1, p2) && bits_eq(s1, s2),
            (Ack, Ack) => true,
            (Abort { reason: a }, Abort { reason: b }) => a == b,
            _ => false,
        }
    }
}

impl RoundMessage {
    pub fn broadcast(round: u64, posterior: &NatGaussian) -> Self {
        RoundMessage::Broadcast {
            round,
            precision: posterior.precision().to_row_major(),
            shift: posterior.shift().iter().copied().collect(),
        }
    }

    pub fn update(client_id: u32, round: u64, delta: &SiteFactor) -> Self {
        RoundMessage::Update {
            client_id,
            round,
            delta_precision: delta.delta_precision.to_row_major(),
            delta_shift: delta.delta_shift.iter().copied().collect(),
        }
    }

    pub fn abort(reason: impl Into<String>) -> Self {
        RoundMessage::Abort {
            reason: reason.into(),
        }
    }

    /// The posterior carried by a `Broadcast`.
    pub fn posterior(&self) -> Result<NatGaussian> {
        match self {
            RoundMessage::Broadcast {
                precision, shift, ..
            } => NatGaussian::new(
                SymMat::from_row_major(shift.len(), precision)?,
                DVector::from_column_slice(shift),
            ),
            _ => Err(FedGviError::Protocol("expected a Broadcast".into())),
        }
    }

    /// The site delta carried by an `Update`.
    pub fn site_delta(&self) -> Result<SiteFactor> {
        match self {
            RoundMessage::Update {
                round,
                delta_precision,
                delta_shift,
                ..
            } => Ok(SiteFactor {
                delta_precision: SymMat::from_row_major(delta_shift.len(), delta_precision)?,
                delta_shift: DVector::from_column_slice(delta_shift),
                round_updated: *round,
            }),
            _ => Err(FedGviError::Protocol("expected an Update".into())),
        }
    }

    pub fn round(&self) -> Option<u64> {
        match self {
            RoundMessage::Broadcast { round, .. } | RoundMessage::Update { round, .. } => {
                Some(*round)
            }
            _ => None,
        }
    }
}

fn check_arrays(matrix: &[f64], vector: &[f64]) -> std::result::Result<u32, WireError> {
    let dim = vector.len();
    if dim as u64 > MAX_DIM as u64 {
        return Err(WireError::DimensionTooLarge(dim as u64));
    }
    if matrix.len() != dim * dim {
        return Err(WireError::InvalidMessage(format!(
            "matrix has {} entries, expected {}",
            matrix.len(),
            dim * dim
        )));
    }
    Ok(dim as u32)
}

fn put_floats(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Encodes one message as a complete frame (length prefix included).
pub fn encode(msg: &RoundMessage) -> std::result::Result<Vec<u8>, WireError> {
    let mut body = Vec::with_capacity(64);
    body.extend_from_slice(&MAGIC);
    body.extend_from_slice(&VERSION.to_le_bytes());
    match msg {
        RoundMessage::Broadcast {
            round,
            precision,
            shift,
        } => {
            let dim = check_arrays(precision, shift)?;
            body.push(TYPE_BROADCAST);
            body.extend_from_slice(&round.to_le_bytes());
            body.extend_from_slice(&dim.to_le_bytes());
            put_floats(&mut body, precision);
            put_floats(&mut body, shift);
        }
        RoundMessage::Update {
            client_id,
            round,
            delta_precision,
            delta_shift,
        } => {
            let dim = check_arrays(delta_precision, delta_shift)?;
            body.push(TYPE_UPDATE);
            body.extend_from_slice(&client_id.to_le_bytes());
            body.extend_from_slice(&round.to_le_bytes());
            body.extend_from_slice(&dim.to_le_bytes());
            put_floats(&mut body, delta_precision);
            put_floats(&mut body, delta_shift);
        }
        RoundMessage::Ack => body.push(TYPE_ACK),
        RoundMessage::Abort { reason } => {
            body.push(TYPE_ABORT);
            let bytes = reason.as_bytes();
            let len = u32::try_from(bytes.len())
                .map_err(|_| WireError::InvalidMessage("abort reason too long".into()))?;
            body.extend_from_slice(&len.to_le_bytes());
            body.extend_from_slice(bytes);
        }
    }
    let crc = crc32fast::hash(&body);
    body.extend_from_slice(&crc.to_le_bytes());
    let len = u32::try_from(body.len())
        .ok()
        .filter(|&l| l <= MAX_FRAME_LEN)
        .ok_or_else(|| WireError::InvalidMessage("frame too large".into()))?;
    let mut frame = Vec::with_capacity(body.len() + 4);
    frame.extend_from_slice(&len.to_le_bytes());
    frame.extend_from_slice(&body);
    Ok(frame)
}

/// Decodes exactly one frame; trailing bytes are a length mismatch.
pub fn decode(bytes: &[u8]) -> std::result::Result<RoundMessage, WireError> {
    if bytes.len() < 4 {
        return Err(WireError::Truncated {
            needed: 4,
            available: bytes.len(),
        });
    }
    let declared = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let available = bytes.len() - 4;
    if available < declared {
        return Err(WireError::Truncated {
            needed: declared + 4,
            available: bytes.len(),
        });
    }
    if available > declared {
        return Err(WireError::LengthMismatch {
            declared,
            actual: available,
        });
    }
    decode_body(&bytes[4..])
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], WireError> {
        if self.buf.len() - self.pos < n {
            return Err(WireError::LengthMismatch {
                declared: self.buf.len(),
                actual: self.pos + n,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn floats(&mut self, n: usize) -> std::result::Result<Vec<f64>, WireError> {
        let raw = self.take(n.checked_mul(8).ok_or(WireError::DimensionTooLarge(n as u64))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn dim(&mut self) -> std::result::Result<usize, WireError> {
        let dim = self.u32()?;
        if dim > MAX_DIM {
            return Err(WireError::DimensionTooLarge(dim as u64));
        }
        let dim = dim as usize;
        // the payload must hold dim² + dim floats exactly
        let expected = (dim * dim + dim) * 8;
        let remaining = self.buf.len() - self.pos;
        if remaining != expected {
            return Err(WireError::LengthMismatch {
                declared: expected,
                actual: remaining,
            });
        }
        Ok(dim)
    }

    fn finish(&self) -> std::result::Result<(), WireError> {
        if self.pos != self.buf.len() {
            return Err(WireError::LengthMismatch {
                declared: self.pos,
                actual: self.buf.len(),
            });
        }
        Ok(())
    }
}

fn decode_body(body: &[u8]) -> std::result::Result<RoundMessage, WireError> {
    if body.len() < HEADER_LEN + CRC_LEN {
        return Err(WireError::Truncated {
            needed: HEADER_LEN + CRC_LEN,
            available: body.len(),
        });
    }
    let magic: [u8; 4] = body[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(body[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(WireError::UnknownVersion(version));
    }
    let (content, crc_bytes) = body.split_at(body.len() - CRC_LEN);
    let crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(content) != crc {
        return Err(WireError::ChecksumMismatch);
    }
    let kind = content[6];
    let mut cur = Cursor {
        buf: &content[HEADER_LEN..],
        pos: 0,
    };
    let msg = match kind {
        TYPE_BROADCAST => {
            let round = cur.u64()?;
            let dim = cur.dim()?;
            let precision = cur.floats(dim * dim)?;
            let shift = cur.floats(dim)?;
            RoundMessage::Broadcast {
                round,
                precision,
                shift,
            }
        }
        TYPE_UPDATE => {
            let client_id = cur.u32()?;
            let round = cur.u64()?;
            let dim = cur.dim()?;
            let delta_precision = cur.floats(dim * dim)?;
            let delta_shift = cur.floats(dim)?;
            RoundMessage::Update {
                client_id,
                round,
                delta_precision,
                delta_shift,
            }
        }
        TYPE_ACK => RoundMessage::Ack,
        TYPE_ABORT => {
            let len = cur.u32()? as usize;
            let raw = cur.take(len)?;
            let reason = std::str::from_utf8(raw)
                .map_err(|_| WireError::InvalidUtf8)?
                .to_owned();
            RoundMessage::Abort { reason }
        }
        other => return Err(WireError::UnknownType(other)),
    };
    cur.finish()?;
    Ok(msg)
}

/// Decodes a concatenation of frames.
pub fn decode_stream(bytes: &[u8]) -> std::result::Result<Vec<RoundMessage>, WireError> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let rest = &bytes[pos..];
        if rest.len() < 4 {
            return Err(WireError::Truncated {
                needed: 4,
                available: rest.len(),
            });
        }
        let len = u32::from_le_bytes(rest[0..4].try_into().unwrap()) as usize;
        if rest.len() < 4 + len {
            return Err(WireError::Truncated {
                needed: 4 + len,
                available: rest.len(),
            });
        }
        out.push(decode(&rest[..4 + len])?);
        pos += 4 + len;
    }
    Ok(out)
}

/// Reads one frame from a byte stream. `Ok(None)` on clean end of stream.
pub fn read_frame<R: Read>(reader: &mut R) -> Result<Option<RoundMessage>> {
    let mut len_buf = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match reader.read(&mut len_buf[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(WireError::Truncated {
                    needed: 4,
                    available: got,
                }
                .into())
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(len_buf);
    if len > MAX_FRAME_LEN {
        return Err(WireError::LengthMismatch {
            declared: len as usize,
            actual: MAX_FRAME_LEN as usize,
        }
        .into());
    }
    let mut frame = vec![0u8; 4 + len as usize];
    frame[..4].copy_from_slice(&len_buf);
    reader.read_exact(&mut frame[4..]).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            FedGviError::Wire(WireError::Truncated {
                needed: 4 + len as usize,
                available: 4,
            })
        } else {
            e.into()
        }
    })?;
    Ok(Some(decode(&frame)?))
}

pub fn write_frame<W: Write>(writer: &mut W, msg: &RoundMessage) -> Result<()> {
    let frame = encode(msg)?;
    writer.write_all(&frame)?;
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn update_msg(dim: usize) -> RoundMessage {
        RoundMessage::Update {
            client_id: 3,
            round: 7,
            delta_precision: (0..dim * dim).map(|i| i as f64 * 0.5).collect(),
            delta_shift: (0..dim).map(|i| -(i as f64)).collect(),
        }
    }

    #[test]
    fn ack_layout() {
        let frame = encode(&RoundMessage::Ack).unwrap();
        assert_eq!(frame.len(), 4 + 4 + 2 + 1 + 4);
        assert_eq!(&frame[0..4], &11u32.to_le_bytes());
        assert_eq!(&frame[4..8], b"FGVI");
        assert_eq!(&frame[8..10], &[1, 0]);
        assert_eq!(frame[10], 3);
        assert_eq!(decode(&frame).unwrap(), RoundMessage::Ack);
    }

    #[test]
    fn update_layout_offsets() {
        let frame = encode(&update_msg(2)).unwrap();
        // prefix + header + client + round + dim + 6 floats + crc
        assert_eq!(frame.len(), 4 + 7 + 4 + 8 + 4 + 6 * 8 + 4);
        assert_eq!(&frame[11..15], &3u32.to_le_bytes());
        assert_eq!(&frame[15..23], &7u64.to_le_bytes());
        assert_eq!(&frame[23..27], &2u32.to_le_bytes());
        assert_eq!(&frame[27..35], &0.0f64.to_le_bytes());
        assert_eq!(&frame[35..43], &0.5f64.to_le_bytes());
    }

    #[test]
    fn distinct_decode_errors() {
        let frame = encode(&update_msg(1)).unwrap();
        assert!(matches!(decode(&frame[..2]), Err(WireError::Truncated { .. })));
        assert!(matches!(
            decode(&frame[..frame.len() - 1]),
            Err(WireError::Truncated { .. })
        ));
        let mut extra = frame.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(WireError::LengthMismatch { .. })));
        let mut bad = frame.clone();
        bad[4] = b'X';
        assert!(matches!(decode(&bad), Err(WireError::BadMagic(_))));
        let mut bad = frame.clone();
        bad[8] = 9;
        assert!(matches!(decode(&bad), Err(WireError::UnknownVersion(9))));
        // unknown type with a valid checksum
        let mut body = frame[4..frame.len() - 4].to_vec();
        body[6] = 42;
        let crc = crc32fast::hash(&body);
        body.extend_from_slice(&crc.to_le_bytes());
        let mut f = (body.len() as u32).to_le_bytes().to_vec();
        f.extend_from_slice(&body);
        assert!(matches!(decode(&f), Err(WireError::UnknownType(42))));
        let mut bad = frame.clone();
        bad[30] ^= 1;
        assert!(matches!(decode(&bad), Err(WireError::ChecksumMismatch)));
    }

    #[test]
    fn dim_inconsistent_with_payload_is_length_mismatch() {
        let mut body = encode(&update_msg(2)).unwrap()[4..].to_vec();
        body.truncate(body.len() - 4);
        body[19..23].copy_from_slice(&3u32.to_le_bytes());
        let crc = crc32fast::hash(&body);
        body.extend_from_slice(&crc.to_le_bytes());
        let mut f = (body.len() as u32).to_le_bytes().to_vec();
        f.extend_from_slice(&body);
        assert!(matches!(decode(&f), Err(WireError::LengthMismatch { .. })));
    }

    #[test]
    fn encode_rejects_inconsistent_arrays() {
        let m = RoundMessage::Broadcast {
            round: 1,
            precision: vec![1.0, 2.0],
            shift: vec![0.0],
        };
        assert!(matches!(encode(&m), Err(WireError::InvalidMessage(_))));
    }

    #[test]
    fn every_single_byte_flip_is_rejected() {
        let msgs = [
            RoundMessage::Ack,
            RoundMessage::abort("timeout"),
            update_msg(1),
            update_msg(2),
            RoundMessage::Broadcast {
                round: 2,
                precision: vec![1.0],
                shift: vec![0.25],
            },
        ];
        for msg in &msgs {
            let frame = encode(msg).unwrap();
            for i in 0..frame.len() {
                for bit in 0..8 {
                    let mut f = frame.clone();
                    f[i] ^= 1 << bit;
                    assert!(decode(&f).is_err(), "byte {i} bit {bit} of {msg:?}");
                }
                for v in [0u8, 0xff, frame[i].wrapping_add(1)] {
                    if v == frame[i] {
                        continue;
                    }
                    let mut f = frame.clone();
                    f[i] = v;
                    assert!(decode(&f).is_err());
                }
            }
        }
    }

    fn arb_message() -> impl Strategy<Value = RoundMessage> {
        let floats = |n: usize| prop::collection::vec(any::<f64>(), n);
        prop_oneof![
            Just(RoundMessage::Ack),
            ".{0,40}".prop_map(|reason| RoundMessage::Abort { reason }),
            (any::<u64>(), 0usize..4).prop_flat_map(move |(round, d)| {
                (floats(d * d), floats(d)).prop_map(move |(precision, shift)| {
                    RoundMessage::Broadcast {
                        round,
                        precision,
                        shift,
                    }
                })
            }),
            (any::<u32>(), any::<u64>(), 0usize..4).prop_flat_map(move |(c, round, d)| {
                (floats(d * d), floats(d)).prop_map(move |(p, s)| RoundMessage::Update {
                    client_id: c,
                    round,
                    delta_precision: p,
                    delta_shift: s,
                })
            }),
        ]
    }

    /// Reader that hands out at most `chunk` bytes per call.
    struct Chunked<'a> {
        data: &'a [u8],
        chunk: usize,
    }

    impl Read for Chunked<'_> {
        fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
            let n = self.chunk.min(buf.len()).min(self.data.len());
            buf[..n].copy_from_slice(&self.data[..n]);
            self.data = &self.data[n..];
            Ok(n)
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn round_trip_bit_exact(msg in arb_message()) {
            let frame = encode(&msg).unwrap();
            prop_assert_eq!(decode(&frame).unwrap(), msg.clone());
            // canonical: re-encoding the decoded message yields identical bytes
            prop_assert_eq!(encode(&decode(&frame).unwrap()).unwrap(), frame);
        }
    }

    proptest! {
        #[test]
        fn concatenated_frames_survive_any_chunking(
            msgs in prop::collection::vec(arb_message(), 1..6),
            chunk in 1usize..40,
        ) {
            let mut stream = Vec::new();
            for m in &msgs {
                stream.extend(encode(m).unwrap());
            }
            prop_assert_eq!(&decode_stream(&stream).unwrap(), &msgs);
            let mut reader = Chunked { data: &stream, chunk };
            let mut got = Vec::new();
            while let Some(m) = read_frame(&mut reader).unwrap() {
                got.push(m);
            }
            prop_assert_eq!(got, msgs);
        }
    }
}
