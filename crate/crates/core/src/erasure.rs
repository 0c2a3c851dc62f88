//! MAC-layer erasure code: a source message of `K x L` symbols is expanded into
//! `N = 2^s - 1` indexed packets of `K` symbols, any `L` of which recover it.
//!
//! Packet `i` is `G_i * M^T` where `G_i = [1, a_i, a_i^2, ...]` is a
//! Vandermonde row (see [`GaloisField::generator_row`]). Because the code is
//! linear, XOR-ing two packets with the same index yields the packet of the
//! XOR-ed messages, which is what lets the receiver use XOR packets decoded
//! at the PHY layer as equations.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::galois::{GaloisError, GaloisField, GfElement, GfMatrix};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ErasureError {
    #[error(transparent)]
    Field(#[from] GaloisError),
    #[error("invalid code parameters K={k}, L={l} for N={n}")]
    InvalidParameters { k: usize, l: usize, n: usize },
    #[error("message has {got} symbols, expected {expected}")]
    MessageShape { got: usize, expected: usize },
    #[error("packet index {index} outside 1..={max}")]
    IndexOutOfRange { index: usize, max: usize },
    #[error("need {need} packets with distinct indices, have {have}")]
    InsufficientPackets { have: usize, need: usize },
    #[error("duplicate packet index {0}")]
    DuplicateIndex(usize),
    #[error("packets from different streams ({0} and {1})")]
    StreamMismatch(Stream, Stream),
    #[error("packet indices differ ({0} vs {1})")]
    IndexMismatch(usize, usize),
    #[error("payload has {got} symbols, expected {expected}")]
    PayloadLength { got: usize, expected: usize },
    #[error("malformed packet encoding: {0}")]
    Malformed(String),
}

/// Which linear system a packet belongs to: node A, node B, or their XOR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stream {
    A,
    B,
    #[serde(rename = "X")]
    AxorB,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::A, Stream::B, Stream::AxorB];

    /// Wire tag: bit 0 is A, bit 1 is B.
    pub fn tag(self) -> u8 {
        match self {
            Stream::A => 0b01,
            Stream::B => 0b10,
            Stream::AxorB => 0b11,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Stream> {
        match tag {
            0b01 => Some(Stream::A),
            0b10 => Some(Stream::B),
            0b11 => Some(Stream::AxorB),
            _ => None,
        }
    }

    /// Tag of the XOR of packets from two streams. Combining a stream with
    /// itself keeps the tag (the result encodes the XOR of two messages of
    /// that stream).
    pub fn combine(self, other: Stream) -> Stream {
        if self == other {
            self
        } else {
            Stream::from_tag(self.tag() ^ other.tag()).expect("distinct tags xor to a valid tag")
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Stream::A => "A",
            Stream::B => "B",
            Stream::AxorB => "X",
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// `K x L` symbol matrix. Row `r` holds the `L` symbols that end up, mixed,
/// in position `r` of every coded packet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceMessage {
    k: usize,
    l: usize,
    stream: Stream,
    symbols: Vec<GfElement>,
}

impl SourceMessage {
    pub fn new(k: usize, l: usize, stream: Stream, symbols: Vec<GfElement>) -> Result<Self, ErasureError> {
        if symbols.len() != k * l {
            return Err(ErasureError::MessageShape {
                got: symbols.len(),
                expected: k * l,
            });
        }
        Ok(Self { k, l, stream, symbols })
    }

    pub fn zeros(k: usize, l: usize, stream: Stream) -> Self {
        Self {
            k,
            l,
            stream,
            symbols: vec![GfElement::ZERO; k * l],
        }
    }

    /// Uniformly random message over the given field.
    pub fn random<R: Rng + ?Sized>(field: &GaloisField, k: usize, l: usize, stream: Stream, rng: &mut R) -> Self {
        let order = field.order() as u32;
        let symbols = (0..k * l)
            .map(|_| GfElement(rng.random_range(0..order) as u8))
            .collect();
        Self { k, l, stream, symbols }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn stream(&self) -> Stream {
        self.stream
    }

    pub fn with_stream(mut self, stream: Stream) -> Self {
        self.stream = stream;
        self
    }

    pub fn symbols(&self) -> &[GfElement] {
        &self.symbols
    }

    pub fn row(&self, r: usize) -> &[GfElement] {
        &self.symbols[r * self.l..(r + 1) * self.l]
    }

    /// Symbol-wise sum of two messages of the same shape.
    pub fn xor(&self, other: &SourceMessage) -> Result<SourceMessage, ErasureError> {
        if self.k != other.k || self.l != other.l {
            return Err(ErasureError::MessageShape {
                got: other.symbols.len(),
                expected: self.symbols.len(),
            });
        }
        Ok(SourceMessage {
            k: self.k,
            l: self.l,
            stream: self.stream.combine(other.stream),
            symbols: self.symbols.iter().zip(&other.symbols).map(|(&a, &b)| a + b).collect(),
        })
    }
}

/// One coded packet `C_i` of a stream.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CodedPacket {
    pub index: usize,
    pub stream: Stream,
    pub payload: Vec<GfElement>,
}

impl CodedPacket {
    pub fn payload_bytes(&self) -> Vec<u8> {
        self.payload.iter().map(|s| s.0).collect()
    }

    pub fn from_payload_bytes(index: usize, stream: Stream, bytes: &[u8]) -> Self {
        Self {
            index,
            stream,
            payload: bytes.iter().map(|&b| GfElement(b)).collect(),
        }
    }

    /// Wire form: index (u16 big-endian), stream tag, then the K payload bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(3 + self.payload.len());
        out.extend_from_slice(&(self.index as u16).to_be_bytes());
        out.push(self.stream.tag());
        out.extend(self.payload.iter().map(|s| s.0));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ErasureError> {
        if bytes.len() < 3 {
            return Err(ErasureError::Malformed(format!("{} bytes is shorter than the header", bytes.len())));
        }
        let index = u16::from_be_bytes([bytes[0], bytes[1]]) as usize;
        if index == 0 {
            return Err(ErasureError::Malformed("packet index 0".into()));
        }
        let stream = Stream::from_tag(bytes[2])
            .ok_or_else(|| ErasureError::Malformed(format!("unknown stream tag {:#04x}", bytes[2])))?;
        Ok(Self::from_payload_bytes(index, stream, &bytes[3..]))
    }
}

/// Symbol-wise XOR of two packets carrying the same index.
pub fn xor_packets(p: &CodedPacket, q: &CodedPacket) -> Result<CodedPacket, ErasureError> {
    if p.index != q.index {
        return Err(ErasureError::IndexMismatch(p.index, q.index));
    }
    if p.payload.len() != q.payload.len() {
        return Err(ErasureError::PayloadLength {
            got: q.payload.len(),
            expected: p.payload.len(),
        });
    }
    Ok(CodedPacket {
        index: p.index,
        stream: p.stream.combine(q.stream),
        payload: p.payload.iter().zip(&q.payload).map(|(&a, &b)| a + b).collect(),
    })
}

/// Vandermonde erasure code with fixed packet size `K` and decode threshold `L`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErasureCode {
    field: GaloisField,
    k: usize,
    l: usize,
}

impl ErasureCode {
    pub fn new(field: GaloisField, k: usize, l: usize) -> Result<Self, ErasureError> {
        let n = field.nonzero_count();
        if k == 0 || l == 0 || l > n {
            return Err(ErasureError::InvalidParameters { k, l, n });
        }
        Ok(Self { field, k, l })
    }

    /// GF(256) code.
    pub fn gf256(k: usize, l: usize) -> Result<Self, ErasureError> {
        Self::new(GaloisField::gf256().clone(), k, l)
    }

    pub fn field(&self) -> &GaloisField {
        &self.field
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn l(&self) -> usize {
        self.l
    }

    /// Number of distinct packets, `N = 2^s - 1`.
    pub fn n(&self) -> usize {
        self.field.nonzero_count()
    }

    pub fn random_message<R: Rng + ?Sized>(&self, stream: Stream, rng: &mut R) -> SourceMessage {
        SourceMessage::random(&self.field, self.k, self.l, stream, rng)
    }

    fn check_index(&self, index: usize) -> Result<(), ErasureError> {
        if index == 0 || index > self.n() {
            return Err(ErasureError::IndexOutOfRange { index, max: self.n() });
        }
        Ok(())
    }

    pub fn encode_packet(&self, m: &SourceMessage, index: usize) -> Result<CodedPacket, ErasureError> {
        self.check_index(index)?;
        if m.k != self.k || m.l != self.l {
            return Err(ErasureError::MessageShape {
                got: m.symbols.len(),
                expected: self.k * self.l,
            });
        }
        let g = self.field.generator_row(index, self.l)?;
        let payload = (0..self.k).map(|r| self.field.dot(&g, m.row(r))).collect();
        Ok(CodedPacket {
            index,
            stream: m.stream,
            payload,
        })
    }

    /// Recovers the message from at least `L` packets of one stream with
    /// distinct indices. The `L` lowest indices are used.
    pub fn decode_message(&self, packets: &[CodedPacket]) -> Result<SourceMessage, ErasureError> {
        let mut by_index: BTreeMap<usize, &CodedPacket> = BTreeMap::new();
        let stream = packets.first().map(|p| p.stream);
        for p in packets {
            self.check_index(p.index)?;
            if Some(p.stream) != stream {
                return Err(ErasureError::StreamMismatch(stream.unwrap(), p.stream));
            }
            if p.payload.len() != self.k {
                return Err(ErasureError::PayloadLength {
                    got: p.payload.len(),
                    expected: self.k,
                });
            }
            if by_index.insert(p.index, p).is_some() {
                return Err(ErasureError::DuplicateIndex(p.index));
            }
        }
        if by_index.len() < self.l {
            return Err(ErasureError::InsufficientPackets {
                have: by_index.len(),
                need: self.l,
            });
        }
        let chosen: Vec<&CodedPacket> = by_index.values().take(self.l).copied().collect();
        let indices: Vec<usize> = chosen.iter().map(|p| p.index).collect();
        let g = GfMatrix::generator(&self.field, &indices, self.l)?;
        let g_inv = g.invert(&self.field)?;
        let c = GfMatrix::from_rows(chosen.iter().map(|p| p.payload.clone()).collect());
        // M^T = G~^-1 C~, an L x K matrix.
        let mt = g_inv.mul(&self.field, &c)?;
        let mut symbols = Vec::with_capacity(self.k * self.l);
        for r in 0..self.k {
            for j in 0..self.l {
                symbols.push(mt.get(j, r));
            }
        }
        SourceMessage::new(self.k, self.l, stream.expect("nonempty"), symbols)
    }
}
