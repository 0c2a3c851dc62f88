//! PHY channel code: the 802.11 rate-1/2, constraint-length-7 convolutional
//! code (generators 133/171 octal), a hard-output Viterbi decoder over 8-bit
//! soft inputs, and CRC-32 framing with an XOR-aware check.
//!
//! Bits are stored one per `u8` (0 or 1). Bytes are serialized LSB first,
//! and the CRC field is appended little-endian, as in the 802.11 FCS.

use thiserror::Error;

/// Constraint length.
pub const CONSTRAINT_LEN: usize = 7;
/// Zero bits appended to flush the encoder.
pub const TAIL_BITS: usize = CONSTRAINT_LEN - 1;
pub const CRC_BITS: usize = 32;
pub const GEN_A: u32 = 0o133;
pub const GEN_B: u32 = 0o171;

const STATES: usize = 1 << TAIL_BITS;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConvError {
    #[error("frame of {0} bits is shorter than the CRC field")]
    FrameTooShort(usize),
    #[error("frame of {0} bits is not byte aligned")]
    NotByteAligned(usize),
    #[error("soft input of {0} values is not 2 x (info bits + {TAIL_BITS})")]
    SoftLength(usize),
}

/// Ordered bit sequence, one bit per byte.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct BitFrame(pub Vec<u8>);

impl BitFrame {
    pub fn zeros(len: usize) -> Self {
        BitFrame(vec![0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        BitFrame(
            bytes
                .iter()
                .flat_map(|&b| (0..8).map(move |i| (b >> i) & 1))
                .collect(),
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ConvError> {
        if self.0.len() % 8 != 0 {
            return Err(ConvError::NotByteAligned(self.0.len()));
        }
        Ok(self
            .0
            .chunks(8)
            .map(|c| c.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | ((b & 1) << i)))
            .collect())
    }

    pub fn xor(&self, other: &BitFrame) -> BitFrame {
        assert_eq!(self.len(), other.len(), "xor of frames with different lengths");
        BitFrame(self.0.iter().zip(&other.0).map(|(a, b)| a ^ b).collect())
    }

    /// Payload followed by its CRC-32.
    pub fn with_crc(payload: &[u8]) -> Self {
        let mut bytes = payload.to_vec();
        bytes.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
        Self::from_bytes(&bytes)
    }

    /// Splits a CRC-terminated frame into payload bytes and the CRC field.
    pub fn split_crc(&self) -> Result<(Vec<u8>, u32), ConvError> {
        if self.0.len() < CRC_BITS {
            return Err(ConvError::FrameTooShort(self.0.len()));
        }
        let bytes = self.to_bytes()?;
        let (payload, field) = bytes.split_at(bytes.len() - 4);
        Ok((payload.to_vec(), u32::from_le_bytes(field.try_into().unwrap())))
    }
}

/// Soft input to the Viterbi decoder. 128 is the midpoint; larger values favor bit 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(transparent)]
pub struct QuantizedSoftBit(pub u8);

impl QuantizedSoftBit {
    pub const ERASURE: QuantizedSoftBit = QuantizedSoftBit(128);

    /// Signed value `q - 128`.
    #[inline]
    pub fn centered(self) -> i32 {
        self.0 as i32 - 128
    }
}

/// Standard CRC-32 check.
pub fn crc_check(frame: &BitFrame) -> Result<bool, ConvError> {
    let (payload, field) = frame.split_crc()?;
    Ok(crc32fast::hash(&payload) == field)
}

/// Check for a frame claimed to be the XOR of two valid equal-length frames.
///
/// CRC-32 is affine: `crc(m) = lin(m) ^ c_n` where `c_n = crc(0^n)` depends
/// only on the length. XOR-ing two valid frames cancels both offsets, so the
/// XOR frame satisfies `crc(payload) ^ field == crc(0^n)`.
pub fn crc_check_xor(frame: &BitFrame) -> Result<bool, ConvError> {
    let (payload, field) = frame.split_crc()?;
    let zero = crc32fast::hash(&vec![0u8; payload.len()]);
    Ok(crc32fast::hash(&payload) ^ field == zero)
}

#[inline]
fn parity(x: u32) -> u8 {
    (x.count_ones() & 1) as u8
}

// Register window: bit 6 is the current input, bits 5..0 the previous six
// inputs (bit 5 most recent). The state is the low six bits.
#[inline]
fn outputs(window: u32) -> (u8, u8) {
    (parity(window & GEN_A), parity(window & GEN_B))
}

/// Rate-1/2 encoding with six zero tail bits: output length is `2 * (n + 6)`.
pub fn conv_encode(frame: &BitFrame) -> BitFrame {
    let mut out = Vec::with_capacity(2 * (frame.len() + TAIL_BITS));
    let mut state: u32 = 0;
    for &bit in frame.0.iter().chain(std::iter::repeat_n(&0u8, TAIL_BITS)) {
        let window = ((bit as u32 & 1) << TAIL_BITS) | state;
        let (a, b) = outputs(window);
        out.push(a);
        out.push(b);
        state = window >> 1;
    }
    BitFrame(out)
}

struct Trellis {
    // For next state s and dropped bit d: the two output bits packed as 2*a + b.
    branch: [[u8; 2]; STATES],
}

impl Trellis {
    const fn build() -> Trellis {
        let mut branch = [[0u8; 2]; STATES];
        let mut s = 0;
        while s < STATES {
            let input = (s >> (TAIL_BITS - 1)) as u32;
            let mut d = 0;
            while d < 2 {
                let prev = (((s & (STATES / 2 - 1)) << 1) | d) as u32;
                let window = (input << TAIL_BITS) | prev;
                let a = ((window & GEN_A).count_ones() & 1) as u8;
                let b = ((window & GEN_B).count_ones() & 1) as u8;
                branch[s][d] = 2 * a + b;
                d += 1;
            }
            s += 1;
        }
        Trellis { branch }
    }
}

static TRELLIS: Trellis = Trellis::build();

/// Maximum-metric path through the terminated trellis.
///
/// The path metric is `sum_k (q[k] - 128) * x[k]` with `x = +1` for a coded
/// 0 bit and `-1` for a 1 bit. When both predecessors of a state tie, the
/// one whose oldest register bit is 0 wins; globally this selects, among all
/// maximum-metric inputs, the one that is smallest when read as an integer
/// with the last information bit most significant.
pub fn viterbi_decode_with_metric(soft: &[QuantizedSoftBit]) -> Result<(BitFrame, i64), ConvError> {
    if soft.len() % 2 != 0 || soft.len() < 2 * TAIL_BITS {
        return Err(ConvError::SoftLength(soft.len()));
    }
    let steps = soft.len() / 2;
    const UNREACHABLE: i64 = i64::MIN / 4;
    let mut metric = [UNREACHABLE; STATES];
    metric[0] = 0;
    let mut next = [0i64; STATES];
    let mut decisions: Vec<u64> = Vec::with_capacity(steps);

    for pair in soft.chunks_exact(2) {
        let r0 = pair[0].centered() as i64;
        let r1 = pair[1].centered() as i64;
        // Indexed by 2*a + b.
        let bm = [r0 + r1, r0 - r1, -r0 + r1, -r0 - r1];
        let mut dec: u64 = 0;
        for (s, slot) in next.iter_mut().enumerate() {
            let base = (s & (STATES / 2 - 1)) << 1;
            let [o0, o1] = TRELLIS.branch[s];
            let c0 = metric[base] + bm[o0 as usize];
            let c1 = metric[base | 1] + bm[o1 as usize];
            if c1 > c0 {
                *slot = c1;
                dec |= 1 << s;
            } else {
                *slot = c0;
            }
        }
        std::mem::swap(&mut metric, &mut next);
        decisions.push(dec);
    }

    let mut bits = vec![0u8; steps];
    let mut state = 0usize;
    for t in (0..steps).rev() {
        bits[t] = (state >> (TAIL_BITS - 1)) as u8;
        let d = ((decisions[t] >> state) & 1) as usize;
        state = ((state & (STATES / 2 - 1)) << 1) | d;
    }
    bits.truncate(steps - TAIL_BITS);
    Ok((BitFrame(bits), metric[0]))
}

pub fn viterbi_decode(soft: &[QuantizedSoftBit]) -> Result<BitFrame, ConvError> {
    viterbi_decode_with_metric(soft).map(|(f, _)| f)
}

/// Quantized soft bits a noiseless channel would produce for a coded frame.
pub fn hard_soft_bits(coded: &BitFrame) -> Vec<QuantizedSoftBit> {
    coded
        .0
        .iter()
        .map(|&b| QuantizedSoftBit(if b == 0 { 255 } else { 0 }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook shift register: taps listed from the current input backwards.
    fn shift_register_encode(bits: &[u8]) -> Vec<u8> {
        let g0 = [1, 0, 1, 1, 0, 1, 1];
        let g1 = [1, 1, 1, 1, 0, 0, 1];
        let mut reg = [0u8; 7];
        let mut out = Vec::new();
        for &b in bits.iter().chain([0u8; 6].iter()) {
            reg.rotate_right(1);
            reg[0] = b;
            out.push(reg.iter().zip(g0).map(|(r, g)| r & g).fold(0, |a, x| a ^ x));
            out.push(reg.iter().zip(g1).map(|(r, g)| r & g).fold(0, |a, x| a ^ x));
        }
        out
    }

    fn random_frame(rng: &mut impl Rng, len: usize) -> BitFrame {
        BitFrame((0..len).map(|_| rng.random_range(0..2u8)).collect())
    }

    #[test]
    fn zero_input_encodes_to_zero() {
        assert!(conv_encode(&BitFrame::zeros(40)).0.iter().all(|&b| b == 0));
    }

    #[test]
    fn impulse_response_is_generator_pair() {
        let mut input = vec![1u8];
        input.extend([0; 9]);
        let got = conv_encode(&BitFrame(input.clone()));
        assert_eq!(got.0, shift_register_encode(&input));
        // 133 = 1011011, 171 = 1111001, interleaved.
        let expected = [1, 1, 0, 1, 1, 1, 1, 1, 0, 0, 1, 0, 1, 1];
        assert_eq!(&got.0[..14], &expected);
        assert!(got.0[14..].iter().all(|&b| b == 0));
        assert_eq!(got.len(), 2 * (10 + TAIL_BITS));
    }

    #[test]
    fn encoder_matches_shift_register() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for len in [1, 7, 33, 300] {
            let f = random_frame(&mut rng, len);
            assert_eq!(conv_encode(&f).0, shift_register_encode(&f.0));
        }
    }

    #[test]
    fn noiseless_decoding_recovers_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let len = rng.random_range(1..600);
            let f = random_frame(&mut rng, len);
            let soft = hard_soft_bits(&conv_encode(&f));
            assert_eq!(viterbi_decode(&soft).unwrap(), f);
        }
    }

    #[test]
    fn rejects_bad_soft_length() {
        assert_eq!(viterbi_decode(&[QuantizedSoftBit(0); 13]), Err(ConvError::SoftLength(13)));
        assert_eq!(viterbi_decode(&[QuantizedSoftBit(0); 10]), Err(ConvError::SoftLength(10)));
    }

    #[test]
    fn all_erasures_decode_to_zero_by_tie_rule() {
        let soft = vec![QuantizedSoftBit::ERASURE; 2 * (12 + TAIL_BITS)];
        let (bits, metric) = viterbi_decode_with_metric(&soft).unwrap();
        assert_eq!(metric, 0);
        assert_eq!(bits, BitFrame::zeros(12));
    }

    #[test]
    fn crc_roundtrip_and_single_bit_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let payload: Vec<u8> = (0..64).map(|_| rng.random()).collect();
        let f = BitFrame::with_crc(&payload);
        assert_eq!(f.len(), 8 * 64 + CRC_BITS);
        assert!(crc_check(&f).unwrap());
        assert_eq!(f.split_crc().unwrap().0, payload);
        for k in 0..f.len() {
            let mut g = f.clone();
            g.0[k] ^= 1;
            assert!(!crc_check(&g).unwrap());
        }
    }

    #[test]
    fn crc_xor_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p1: Vec<u8> = (0..32).map(|_| rng.random()).collect();
        let p2: Vec<u8> = (0..32).map(|_| rng.random()).collect();
        let (f1, f2) = (BitFrame::with_crc(&p1), BitFrame::with_crc(&p2));
        let x = f1.xor(&f2);
        // Explicit: the xor frame's CRC field is crc(p1) ^ crc(p2).
        let (px, field) = x.split_crc().unwrap();
        assert_eq!(field, crc32fast::hash(&p1) ^ crc32fast::hash(&p2));
        assert_eq!(px, p1.iter().zip(&p2).map(|(a, b)| a ^ b).collect::<Vec<_>>());
        assert!(crc_check_xor(&x).unwrap());
        // A plain xor frame is not a valid standard frame.
        assert!(!crc_check(&x).unwrap());
        for k in 0..x.len() {
            let mut g = x.clone();
            g.0[k] ^= 1;
            assert!(!crc_check_xor(&g).unwrap());
        }
    }

    #[test]
    fn short_frames_are_errors() {
        assert_eq!(crc_check(&BitFrame::zeros(16)), Err(ConvError::FrameTooShort(16)));
        assert_eq!(crc_check_xor(&BitFrame::zeros(31)), Err(ConvError::FrameTooShort(31)));
        assert_eq!(crc_check(&BitFrame::zeros(33)), Err(ConvError::NotByteAligned(33)));
    }

    proptest! {
        #[test]
        fn encoder_is_linear(a in proptest::collection::vec(0u8..2, 1..200), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = random_frame(&mut rng, a.len());
            let a = BitFrame(a);
            prop_assert_eq!(conv_encode(&a.xor(&b)), conv_encode(&a).xor(&conv_encode(&b)));
        }

        #[test]
        fn xor_of_valid_frames_passes_xor_check(a in proptest::collection::vec(any::<u8>(), 1..80), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<u8> = (0..a.len()).map(|_| rng.random()).collect();
            let x = BitFrame::with_crc(&a).xor(&BitFrame::with_crc(&b));
            prop_assert!(crc_check_xor(&x).unwrap());
        }

        #[test]
        fn bytes_roundtrip(a in proptest::collection::vec(any::<u8>(), 0..40)) {
            prop_assert_eq!(BitFrame::from_bytes(&a).to_bytes().unwrap(), a);
        }
    }
}
