//! Per-slot PHY decoding: the reduced-constellation MUD and PNC decoders,
//! successive interference cancellation, CRC validation, outcome
//! classification and PHY-layer bridging.
//!
//! A packet travels as its wire form (index, stream tag, payload) followed by
//! a CRC-32, convolutionally encoded and BPSK mapped. Because the tags of A and
//! B are disjoint bit masks and both users send the same index, the XOR of the
//! two frames carries the header `[0, 0, tag(A) ^ tag(B)]`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{bpsk_map, transmit, ChannelError, ChannelUse, Complex, RxFrame};
use crate::convcode::{conv_encode, crc_check, crc_check_xor, viterbi_decode, BitFrame, QuantizedSoftBit, CRC_BITS, TAIL_BITS};
use crate::demod::{
    hmax2_pnc, hmax2_user, interference_as_noise_soft, pnc_soft_frame, quantize_frame, rmud_soft_frame,
    single_user_soft_frame, QuantizerParams, SoftBit, User, DEFAULT_ALPHA,
};
use crate::erasure::{xor_packets, CodedPacket, Stream};

const HEADER_BYTES: usize = 3;

/// Number of coded bits carrying a packet with `k` payload symbols.
pub fn coded_len(k: usize) -> usize {
    2 * ((HEADER_BYTES + k) * 8 + CRC_BITS + TAIL_BITS)
}

/// Info bits of the PHY frame for a packet: wire bytes plus CRC.
pub fn packet_frame(p: &CodedPacket) -> BitFrame {
    BitFrame::with_crc(&p.to_bytes())
}

/// BPSK symbols of the coded frame for a packet.
pub fn modulate_packet(p: &CodedPacket) -> Vec<f64> {
    bpsk_map(&conv_encode(&packet_frame(p)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MudKind {
    Rmud,
    Sic,
    /// Union of the RMUD and SIC successes.
    RmudSic,
}

impl MudKind {
    fn runs_rmud(self) -> bool {
        matches!(self, MudKind::Rmud | MudKind::RmudSic)
    }

    fn runs_sic(self) -> bool {
        matches!(self, MudKind::Sic | MudKind::RmudSic)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub mud: MudKind,
    /// Run the PNC decoder alongside the MUD decoder.
    pub pnc: bool,
    pub alpha: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { mud: MudKind::Rmud, pnc: true, alpha: DEFAULT_ALPHA }
    }
}

/// Outcome of the MUD decoder: (i) both, (ii) only A, (iii) only B, (iv) neither.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MudOutcome {
    Both,
    OnlyA,
    OnlyB,
    Neither,
}

impl MudOutcome {
    fn from_presence(a: bool, b: bool) -> Self {
        match (a, b) {
            (true, true) => MudOutcome::Both,
            (true, false) => MudOutcome::OnlyA,
            (false, true) => MudOutcome::OnlyB,
            (false, false) => MudOutcome::Neither,
        }
    }

    pub fn roman(self) -> &'static str {
        match self {
            MudOutcome::Both => "i",
            MudOutcome::OnlyA => "ii",
            MudOutcome::OnlyB => "iii",
            MudOutcome::Neither => "iv",
        }
    }

    pub fn has_a(self) -> bool {
        matches!(self, MudOutcome::Both | MudOutcome::OnlyA)
    }

    pub fn has_b(self) -> bool {
        matches!(self, MudOutcome::Both | MudOutcome::OnlyB)
    }
}

/// Combined MUD/PNC outcome; eight values in total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotEvent {
    pub mud: MudOutcome,
    /// Whether the PNC decoder delivered the XOR packet (I) or not (II).
    pub xor: bool,
}

impl SlotEvent {
    pub const ALL: [SlotEvent; 8] = {
        use MudOutcome::*;
        [
            SlotEvent { mud: Both, xor: true },
            SlotEvent { mud: Both, xor: false },
            SlotEvent { mud: OnlyA, xor: true },
            SlotEvent { mud: OnlyA, xor: false },
            SlotEvent { mud: OnlyB, xor: true },
            SlotEvent { mud: OnlyB, xor: false },
            SlotEvent { mud: Neither, xor: true },
            SlotEvent { mud: Neither, xor: false },
        ]
    };

    pub fn group(self) -> EventGroup {
        match (self.mud, self.xor) {
            (MudOutcome::Both, _) => EventGroup::AB,
            (MudOutcome::OnlyA | MudOutcome::OnlyB, true) => EventGroup::NativeAndXor,
            (MudOutcome::OnlyA | MudOutcome::OnlyB, false) => EventGroup::SingleNative,
            (MudOutcome::Neither, true) => EventGroup::X,
            (MudOutcome::Neither, false) => EventGroup::None,
        }
    }
}

impl fmt::Display for SlotEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({})({})", self.mud.roman(), if self.xor { "I" } else { "II" })
    }
}

impl FromStr for SlotEvent {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("malformed event label {s:?}");
        let rest = s.strip_prefix('(').ok_or_else(bad)?;
        let (mud, rest) = rest.split_once(")(").ok_or_else(bad)?;
        let pnc = rest.strip_suffix(')').ok_or_else(bad)?;
        let mud = match mud {
            "i" => MudOutcome::Both,
            "ii" => MudOutcome::OnlyA,
            "iii" => MudOutcome::OnlyB,
            "iv" => MudOutcome::Neither,
            _ => return Err(bad()),
        };
        let xor = match pnc {
            "I" => true,
            "II" => false,
            _ => return Err(bad()),
        };
        Ok(SlotEvent { mud, xor })
    }
}

impl Serialize for SlotEvent {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SlotEvent {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Five-way projection of the eight events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventGroup {
    #[serde(rename = "NONE")]
    None,
    #[serde(rename = "X")]
    X,
    #[serde(rename = "A|B")]
    SingleNative,
    #[serde(rename = "AX|BX")]
    NativeAndXor,
    #[serde(rename = "AB")]
    AB,
}

impl EventGroup {
    pub const ALL: [EventGroup; 5] =
        [EventGroup::None, EventGroup::X, EventGroup::SingleNative, EventGroup::NativeAndXor, EventGroup::AB];

    pub fn label(self) -> &'static str {
        match self {
            EventGroup::None => "NONE",
            EventGroup::X => "X",
            EventGroup::SingleNative => "A|B",
            EventGroup::NativeAndXor => "AX|BX",
            EventGroup::AB => "AB",
        }
    }

    pub fn position(self) -> usize {
        self as usize
    }
}

impl fmt::Display for EventGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotOutcome {
    pub decoded_a: Option<CodedPacket>,
    pub decoded_b: Option<CodedPacket>,
    pub decoded_x: Option<CodedPacket>,
    /// Event observed before any bridging.
    pub event: SlotEvent,
}

impl SlotOutcome {
    pub fn new(decoded_a: Option<CodedPacket>, decoded_b: Option<CodedPacket>, decoded_x: Option<CodedPacket>) -> Self {
        let event = SlotEvent {
            mud: MudOutcome::from_presence(decoded_a.is_some(), decoded_b.is_some()),
            xor: decoded_x.is_some(),
        };
        Self { decoded_a, decoded_b, decoded_x, event }
    }

    pub fn empty() -> Self {
        Self::new(None, None, None)
    }

    pub fn group(&self) -> EventGroup {
        self.event.group()
    }
}

/// Fills the missing native packet when exactly one native and the XOR packet
/// are present. The event label is left as observed.
pub fn phy_bridge(o: &SlotOutcome) -> SlotOutcome {
    let mut out = o.clone();
    match (&o.decoded_a, &o.decoded_b, &o.decoded_x) {
        (Some(a), None, Some(x)) => {
            out.decoded_b = xor_packets(a, x).ok().filter(|p| p.stream == Stream::B);
        }
        (None, Some(b), Some(x)) => {
            out.decoded_a = xor_packets(b, x).ok().filter(|p| p.stream == Stream::A);
        }
        _ => {}
    }
    out
}

fn quantized(soft: &[SoftBit], alpha: f64, hmax2: f64) -> Option<Vec<QuantizedSoftBit>> {
    let params = QuantizerParams::new(alpha, hmax2).ok()?;
    Some(quantize_frame(soft, &params))
}

/// Viterbi decode and CRC check; returns the info frame when the CRC passes.
fn decode_native(soft: &[SoftBit], alpha: f64, hmax2: f64) -> Option<BitFrame> {
    let frame = viterbi_decode(&quantized(soft, alpha, hmax2)?).ok()?;
    crc_check(&frame).ok()?.then_some(frame)
}

fn native_packet(frame: &BitFrame, index: usize, stream: Stream) -> Option<CodedPacket> {
    let (bytes, _) = frame.split_crc().ok()?;
    let p = CodedPacket::from_bytes(&bytes).ok()?;
    (p.index == index && p.stream == stream).then_some(p)
}

fn xor_packet(soft: &[SoftBit], alpha: f64, hmax2: f64, index: usize) -> Option<CodedPacket> {
    let frame = viterbi_decode(&quantized(soft, alpha, hmax2)?).ok()?;
    if !crc_check_xor(&frame).ok()? {
        return None;
    }
    let (bytes, _) = frame.split_crc().ok()?;
    let expected = [0, 0, Stream::A.tag() ^ Stream::B.tag()];
    if bytes.len() < HEADER_BYTES || bytes[..HEADER_BYTES] != expected {
        return None;
    }
    Some(CodedPacket::from_payload_bytes(index, Stream::AxorB, &bytes[HEADER_BYTES..]))
}

fn stream_of(user: User) -> Stream {
    match user {
        User::A => Stream::A,
        User::B => Stream::B,
    }
}

fn gains(ch: &ChannelUse, user: User) -> &[Complex] {
    match user {
        User::A => &ch.gains_a,
        User::B => &ch.gains_b,
    }
}

/// RMUD on a two-user frame.
pub fn rmud_decode(rx: &RxFrame, ch: &ChannelUse, alpha: f64, index: usize) -> (Option<CodedPacket>, Option<CodedPacket>) {
    let (soft_a, soft_b) = rmud_soft_frame(rx, ch);
    let a = decode_native(&soft_a, alpha, hmax2_user(ch, User::A)).and_then(|f| native_packet(&f, index, Stream::A));
    let b = decode_native(&soft_b, alpha, hmax2_user(ch, User::B)).and_then(|f| native_packet(&f, index, Stream::B));
    (a, b)
}

/// PNC decoding of the XOR packet.
pub fn pnc_decode(rx: &RxFrame, ch: &ChannelUse, alpha: f64, index: usize) -> Option<CodedPacket> {
    xor_packet(&pnc_soft_frame(rx, ch), alpha, hmax2_pnc(ch), index)
}

/// One fixed-order SIC pass: decode `first` treating the other user as
/// noise, then cancel it and decode the other user from the residual.
pub fn sic_decode_ordered(
    rx: &RxFrame,
    ch: &ChannelUse,
    first: User,
    alpha: f64,
    index: usize,
) -> (Option<CodedPacket>, Option<CodedPacket>) {
    let second = first.other();
    let (h1, h2) = (gains(ch, first), gains(ch, second));
    let noise = 2.0 * ch.sigma2;
    let soft1: Vec<SoftBit> = rx
        .samples
        .iter()
        .zip(h1.iter().zip(h2))
        .map(|(&y, (&a, &b))| interference_as_noise_soft(y, a, b, ch.sigma2))
        .collect();
    let hmax2_1 = h1.iter().zip(h2).map(|(a, b)| a.norm_sqr() / (b.norm_sqr() + noise)).fold(0.0, f64::max);
    let Some(frame1) = decode_native(&soft1, alpha, hmax2_1) else {
        return (None, None);
    };
    let Some(p1) = native_packet(&frame1, index, stream_of(first)) else {
        return (None, None);
    };
    // Re(conj(h2) (y - h1 x1)) equals Re(y~) |h2|^2 for y~ = (y - h1 x1) / h2,
    // and stays finite when h2 is tiny.
    let x1 = bpsk_map(&conv_encode(&frame1));
    let residual: Vec<Complex> = rx.samples.iter().zip(h1).zip(&x1).map(|((&y, &h), &x)| y - h * x).collect();
    let soft2 = single_user_soft_frame(&residual, h2);
    let p2 = decode_native(&soft2, alpha, hmax2_user(ch, second))
        .and_then(|f| native_packet(&f, index, stream_of(second)));
    match first {
        User::A => (Some(p1), p2),
        User::B => (p2, Some(p1)),
    }
}

/// Parallel SIC: both orders, keeping every packet that passed in either.
pub fn sic_decode(rx: &RxFrame, ch: &ChannelUse, alpha: f64, index: usize) -> (Option<CodedPacket>, Option<CodedPacket>) {
    let (a1, b1) = sic_decode_ordered(rx, ch, User::A, alpha, index);
    let (a2, b2) = sic_decode_ordered(rx, ch, User::B, alpha, index);
    (a1.or(a2), b1.or(b2))
}

/// Decodes one two-user slot in which both users sent packet `index`.
pub fn decode_slot(rx: &RxFrame, ch: &ChannelUse, cfg: &DecoderConfig, index: usize) -> SlotOutcome {
    let (mut a, mut b) = (None, None);
    if cfg.mud.runs_rmud() {
        (a, b) = rmud_decode(rx, ch, cfg.alpha, index);
    }
    if cfg.mud.runs_sic() && (a.is_none() || b.is_none()) {
        let (sa, sb) = sic_decode(rx, ch, cfg.alpha, index);
        a = a.or(sa);
        b = b.or(sb);
    }
    let x = if cfg.pnc { pnc_decode(rx, ch, cfg.alpha, index) } else { None };
    SlotOutcome::new(a, b, x)
}

/// Single-user slot: `ch.gains_a` holds the active user's gains.
pub fn decode_single(rx: &RxFrame, ch: &ChannelUse, alpha: f64, index: usize, stream: Stream) -> Option<CodedPacket> {
    let soft = single_user_soft_frame(&rx.samples, &ch.gains_a);
    decode_native(&soft, alpha, hmax2_user(ch, User::A)).and_then(|f| native_packet(&f, index, stream))
}

/// Transmits both packets over `ch` and decodes the slot.
pub fn simulate_slot<R: Rng + ?Sized>(
    pa: &CodedPacket,
    pb: &CodedPacket,
    ch: &ChannelUse,
    cfg: &DecoderConfig,
    rng: &mut R,
) -> Result<SlotOutcome, ChannelError> {
    let xa = modulate_packet(pa);
    let xb = modulate_packet(pb);
    let rx = transmit(&xa, Some(&xb), ch, rng)?;
    Ok(decode_slot(&rx, ch, cfg, pa.index))
}

/// Number of delivered packets that differ from the transmitted ones.
pub fn undetected_errors(o: &SlotOutcome, truth_a: &CodedPacket, truth_b: &CodedPacket) -> usize {
    let truth_x = xor_packets(truth_a, truth_b).ok();
    let mut errors = 0;
    for (got, want) in [(&o.decoded_a, Some(truth_a)), (&o.decoded_b, Some(truth_b)), (&o.decoded_x, truth_x.as_ref())] {
        if let (Some(g), Some(w)) = (got, want) {
            if g != w {
                errors += 1;
            }
        }
    }
    errors
}
