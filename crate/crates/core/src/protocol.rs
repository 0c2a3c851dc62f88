//! Slotted uplink sessions: polling schedule, the per-slot PHY and MAC
//! pipeline, throughput accounting and trace record/replay.
//!
//! The access point polls pairs of nodes in turn, each poll covering a fixed
//! number of transmission slots. Within a slot both nodes of the pair send the
//! same packet index of their current message. Messages are acknowledged only
//! once fully decoded, at which point all `L` packets of that message are
//! credited. Throughput is credited packets per transmission slot.

pub mod trace;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use trace::{Trace, TraceHeader, TraceRecord, TxEntry, TRACE_VERSION};

use crate::channel::{draw_channel, perturb_csi, transmit, ChannelError, ChannelModel};
use crate::demod::DEFAULT_ALPHA;
use crate::erasure::{xor_packets, CodedPacket, ErasureCode, ErasureError, SourceMessage, Stream};
use crate::galois::{GaloisError, GaloisField};
use crate::macdec::{next_index, EquationStore, MacError};
use crate::phydec::{
    coded_len, decode_single, decode_slot, modulate_packet, DecoderConfig, EventGroup, MudKind, SlotEvent, SlotOutcome,
};

/// Sessions with at least this many decoded messages per node report a
/// throughput that is not dominated by the partial message at the end.
pub const MIN_ROUNDS: usize = 50;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Mac(#[from] MacError),
    #[error(transparent)]
    Erasure(#[from] ErasureError),
    #[error(transparent)]
    Galois(#[from] GaloisError),
    #[error("group frequencies are invalid: {0}")]
    Frequencies(String),
    #[error("trace line {line}: {message}")]
    TraceFormat { line: usize, message: String },
    #[error("trace slot {slot}: {message}")]
    TraceSlot { slot: usize, message: String },
    #[error("trace I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Access scheme and PHY decoder combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// One node at a time; the other waits until the current message is done.
    #[serde(rename = "SU")]
    Su,
    #[serde(rename = "RMUD")]
    Rmud,
    #[serde(rename = "SIC")]
    Sic,
    #[serde(rename = "NCMA-RMUD")]
    NcmaRmud,
    #[serde(rename = "NCMA-SIC")]
    NcmaSic,
    #[serde(rename = "NCMA-RMUD+SIC")]
    NcmaRmudSic,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Su, Variant::Rmud, Variant::Sic, Variant::NcmaRmud, Variant::NcmaSic, Variant::NcmaRmudSic];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Su => "SU",
            Variant::Rmud => "RMUD",
            Variant::Sic => "SIC",
            Variant::NcmaRmud => "NCMA-RMUD",
            Variant::NcmaSic => "NCMA-SIC",
            Variant::NcmaRmudSic => "NCMA-RMUD+SIC",
        }
    }

    /// Two-user decoder; `None` for single-user access.
    pub fn decoder(self, alpha: f64) -> Option<DecoderConfig> {
        let (mud, pnc) = match self {
            Variant::Su => return None,
            Variant::Rmud => (MudKind::Rmud, false),
            Variant::Sic => (MudKind::Sic, false),
            Variant::NcmaRmud => (MudKind::Rmud, true),
            Variant::NcmaSic => (MudKind::Sic, true),
            Variant::NcmaRmudSic => (MudKind::RmudSic, true),
        };
        Some(DecoderConfig { mud, pnc, alpha })
    }

    pub fn mac_mode(self) -> MacMode {
        match self {
            Variant::Su => MacMode::SingleUser,
            Variant::Rmud | Variant::Sic => MacMode::MudOnly,
            Variant::NcmaRmud | Variant::NcmaSic | Variant::NcmaRmudSic => MacMode::Ncma,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

/// How the MAC layer uses each slot's PHY results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MacMode {
    /// Live single-user access: only the active node transmits.
    SingleUser,
    /// Native packets as decoded by the MUD decoder, no XOR packets.
    MudOnly,
    /// Native and XOR packets with PHY and MAC bridging.
    Ncma,
    /// Replay of a two-user trace as if only the active node had sent:
    /// its packet counts only when the MUD decoder delivered it natively.
    SuProjection,
}

impl FromStr for MacMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "single-user" | "su" => Ok(MacMode::SingleUser),
            "mud-only" | "mud" => Ok(MacMode::MudOnly),
            "ncma" => Ok(MacMode::Ncma),
            "su-projection" => Ok(MacMode::SuProjection),
            _ => Err(format!("unknown MAC mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub snr_db: f64,
    /// Packets per source message.
    pub l: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub nodes: Vec<NodeConfig>,
    /// Node indices of each concurrently polled pair.
    pub pairs: Vec<[usize; 2]>,
    pub slots_per_poll: usize,
    /// Total transmission slots in the session.
    pub slots: usize,
    /// Payload symbols per packet.
    pub k: usize,
    pub field_bits: u32,
    pub variant: Variant,
    pub alpha: f64,
    pub channel: ChannelModel,
    /// Relative standard deviation of the receiver's channel estimate error.
    pub csi_error: f64,
    /// Drop the noise term entirely (every slot decodes cleanly).
    #[serde(default)]
    pub noiseless: bool,
    pub seed: u64,
}

impl SessionConfig {
    pub const DEFAULT_SLOTS_PER_POLL: usize = 3;
    pub const DEFAULT_K: usize = 64;

    /// A single pair of nodes with the given SNRs and message lengths.
    pub fn two_user(snr_a_db: f64, snr_b_db: f64, l_a: usize, l_b: usize, variant: Variant, slots: usize, seed: u64) -> Self {
        Self {
            nodes: vec![NodeConfig { snr_db: snr_a_db, l: l_a }, NodeConfig { snr_db: snr_b_db, l: l_b }],
            pairs: vec![[0, 1]],
            slots_per_poll: Self::DEFAULT_SLOTS_PER_POLL,
            slots,
            k: Self::DEFAULT_K,
            field_bits: 8,
            variant,
            alpha: DEFAULT_ALPHA,
            channel: ChannelModel::FixedPhase,
            csi_error: 0.0,
            noiseless: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::Config(m));
        if self.nodes.is_empty() || self.pairs.is_empty() {
            return bad("at least one pair of nodes is required".into());
        }
        if self.slots == 0 || self.slots_per_poll == 0 || self.k == 0 {
            return bad("slots, slots_per_poll and k must be positive".into());
        }
        let field = GaloisField::with_bits(self.field_bits)?;
        let mut used = vec![false; self.nodes.len()];
        for pair in &self.pairs {
            if pair[0] == pair[1] {
                return bad(format!("pair {pair:?} repeats a node"));
            }
            for &n in pair {
                match used.get_mut(n) {
                    None => return bad(format!("pair {pair:?} references unknown node {n}")),
                    Some(true) => return bad(format!("node {n} appears in more than one pair")),
                    Some(u) => *u = true,
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.snr_db.is_finite() {
                return bad(format!("node {i} has non-finite SNR"));
            }
            if node.l == 0 || node.l > field.nonzero_count() {
                return bad(format!("node {i}: L = {} outside 1..={}", node.l, field.nonzero_count()));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return bad(format!("alpha {} outside (0, 0.5)", self.alpha));
        }
        if !(self.csi_error >= 0.0 && self.csi_error.is_finite()) {
            return bad(format!("csi_error {} must be a finite non-negative number", self.csi_error));
        }
        Ok(())
    }
}

/// Relative frequencies of the five event groups.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupFrequencies {
    #[serde(rename = "NONE")]
    pub none: f64,
    #[serde(rename = "X")]
    pub x: f64,
    #[serde(rename = "A|B")]
    pub single: f64,
    #[serde(rename = "AX|BX")]
    pub native_xor: f64,
    #[serde(rename = "AB")]
    pub ab: f64,
}

impl GroupFrequencies {
    pub fn from_counts(counts: &[usize; 5]) -> Option<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return None;
        }
        let f = |g: EventGroup| counts[g.position()] as f64 / total as f64;
        Some(Self {
            none: f(EventGroup::None),
            x: f(EventGroup::X),
            single: f(EventGroup::SingleNative),
            native_xor: f(EventGroup::NativeAndXor),
            ab: f(EventGroup::AB),
        })
    }

    pub fn get(&self, g: EventGroup) -> f64 {
        match g {
            EventGroup::None => self.none,
            EventGroup::X => self.x,
            EventGroup::SingleNative => self.single,
            EventGroup::NativeAndXor => self.native_xor,
            EventGroup::AB => self.ab,
        }
    }
}

/// Packets per slot that the observed PHY events could support at most: two
/// for `AB` and `AX|BX`, one for `A|B` and for a lone XOR packet.
pub fn upper_bound(freq: &GroupFrequencies) -> Result<f64, ProtocolError> {
    let all = EventGroup::ALL.map(|g| freq.get(g));
    if let Some(v) = all.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(ProtocolError::Frequencies(format!("{v} is not a probability")));
    }
    let sum: f64 = all.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(ProtocolError::Frequencies(format!("frequencies sum to {sum}")));
    }
    Ok(2.0 * (freq.ab + freq.native_xor) + freq.single + freq.x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub node: usize,
    /// Packets of fully decoded messages.
    pub packets: usize,
    pub messages: usize,
    pub abandoned: usize,
    /// Slots granted to this node's pair.
    pub slots: usize,
    pub throughput: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub slots: usize,
    pub nodes: Vec<NodeStats>,
    /// Two-user slots per group, indexed by [`EventGroup::position`].
    pub group_counts: [usize; 5],
    /// Two-user slots per event, in [`SlotEvent::ALL`] order.
    pub event_counts: [usize; 8],
    pub throughput: f64,
    pub upper_bound: Option<f64>,
    /// Every node decoded at least [`MIN_ROUNDS`] messages.
    pub long_enough: bool,
    /// Delivered packets that differ from what was sent (CRC misses).
    pub undetected_errors: usize,
    pub mac_conflicts: usize,
}

impl SessionStats {
    pub fn group_frequencies(&self) -> Option<GroupFrequencies> {
        GroupFrequencies::from_counts(&self.group_counts)
    }

    pub fn packets(&self) -> usize {
        self.nodes.iter().map(|n| n.packets).sum()
    }
}

/// Message `seq` of `node`; depends only on the session seed.
pub fn node_message(seed: u64, node: usize, seq: u64, code: &ErasureCode) -> SourceMessage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + node as u64);
    rng.set_word_pos((seq as u128) << 32);
    code.random_message(Stream::A, &mut rng)
}

struct PairState {
    nodes: [usize; 2],
    store: EquationStore,
    seq: [u64; 2],
    messages: [SourceMessage; 2],
    next_index: usize,
    // Node position (0 or 1) allowed to transmit in single-user modes.
    active: usize,
}

const NATIVE: [Stream; 2] = [Stream::A, Stream::B];

/// MAC bookkeeping shared by live sessions and replays.
struct MacEngine {
    seed: u64,
    mode: MacMode,
    codes: Vec<ErasureCode>,
    n: usize,
    pairs: Vec<PairState>,
    packets: Vec<usize>,
    messages: Vec<usize>,
    abandoned: Vec<usize>,
    pair_slots: Vec<usize>,
    group_counts: [usize; 5],
    event_counts: [usize; 8],
    undetected: usize,
}

impl MacEngine {
    fn new(cfg: &SessionConfig, lengths: &[usize], mode: MacMode) -> Result<Self, ProtocolError> {
        let field = GaloisField::with_bits(cfg.field_bits)?;
        let codes = lengths
            .iter()
            .map(|&l| ErasureCode::new(field.clone(), cfg.k, l))
            .collect::<Result<Vec<_>, _>>()?;
        let mut pairs = Vec::with_capacity(cfg.pairs.len());
        for &nodes in &cfg.pairs {
            let store = EquationStore::new(field.clone(), cfg.k, lengths[nodes[0]], lengths[nodes[1]])?;
            let messages = [0, 1].map(|p| node_message(cfg.seed, nodes[p], 0, &codes[nodes[p]]).with_stream(NATIVE[p]));
            pairs.push(PairState { nodes, store, seq: [0, 0], messages, next_index: 1, active: 0 });
        }
        let nodes = cfg.nodes.len();
        Ok(Self {
            seed: cfg.seed,
            mode,
            n: field.nonzero_count(),
            codes,
            pairs,
            packets: vec![0; nodes],
            messages: vec![0; nodes],
            abandoned: vec![0; nodes],
            pair_slots: vec![0; cfg.pairs.len()],
            group_counts: [0; 5],
            event_counts: [0; 8],
            undetected: 0,
        })
    }

    fn truth(&self, pair: usize, pos: usize, index: usize) -> Result<CodedPacket, ProtocolError> {
        let p = &self.pairs[pair];
        Ok(self.codes[p.nodes[pos]].encode_packet(&p.messages[pos], index)?)
    }

    fn truth_xor(&self, pair: usize, index: usize) -> Result<CodedPacket, ProtocolError> {
        Ok(xor_packets(&self.truth(pair, 0, index)?, &self.truth(pair, 1, index)?)?)
    }

    fn count_errors(&mut self, pair: usize, index: usize, o: &SlotOutcome) -> Result<(), ProtocolError> {
        for (pos, got) in [&o.decoded_a, &o.decoded_b].into_iter().enumerate() {
            if let Some(got) = got {
                if *got != self.truth(pair, pos, index)? {
                    self.undetected += 1;
                }
            }
        }
        if let Some(x) = &o.decoded_x {
            if *x != self.truth_xor(pair, index)? {
                self.undetected += 1;
            }
        }
        Ok(())
    }

    /// Applies one two-user slot; `raw` is the PHY result before bridging.
    fn two_user_slot(&mut self, pair: usize, raw: &SlotOutcome) -> Result<(), ProtocolError> {
        let index = self.pairs[pair].next_index;
        self.pair_slots[pair] += 1;
        self.group_counts[raw.group().position()] += 1;
        let e = SlotEvent::ALL.iter().position(|e| *e == raw.event).expect("every event is listed");
        self.event_counts[e] += 1;
        self.count_errors(pair, index, raw)?;
        let store = &mut self.pairs[pair].store;
        match self.mode {
            MacMode::Ncma => store.ingest(index, &crate::phydec::phy_bridge(raw))?,
            MacMode::MudOnly => store.ingest(index, &SlotOutcome::new(raw.decoded_a.clone(), raw.decoded_b.clone(), None))?,
            MacMode::SuProjection => {
                let active = self.pairs[pair].active;
                let p = [&raw.decoded_a, &raw.decoded_b][active].as_ref();
                self.pairs[pair].store.ingest_single(index, NATIVE[active], p)?;
            }
            MacMode::SingleUser => {
                return Err(ProtocolError::Config("two-user slot in single-user mode".into()));
            }
        }
        self.finish_slot(pair)
    }

    /// Applies one single-user slot sent by the pair's active node.
    fn single_user_slot(&mut self, pair: usize, packet: Option<&CodedPacket>) -> Result<(), ProtocolError> {
        let index = self.pairs[pair].next_index;
        let active = self.pairs[pair].active;
        self.pair_slots[pair] += 1;
        if let Some(p) = packet {
            if *p != self.truth(pair, active, index)? {
                self.undetected += 1;
            }
        }
        self.pairs[pair].store.ingest_single(index, NATIVE[active], packet)?;
        self.finish_slot(pair)
    }

    fn new_message(&mut self, pair: usize, pos: usize) -> Result<(), ProtocolError> {
        let p = &mut self.pairs[pair];
        let node = p.nodes[pos];
        p.seq[pos] += 1;
        p.messages[pos] = node_message(self.seed, node, p.seq[pos], &self.codes[node]).with_stream(NATIVE[pos]);
        if matches!(self.mode, MacMode::SingleUser | MacMode::SuProjection) {
            p.active = 1 - pos;
        }
        Ok(())
    }

    fn finish_slot(&mut self, pair: usize) -> Result<(), ProtocolError> {
        self.pairs[pair].store.resolve()?;
        let solved = NATIVE.map(|s| self.pairs[pair].store.is_solved(s));
        for pos in 0..2 {
            if solved[pos] {
                let node = self.pairs[pair].nodes[pos];
                self.packets[node] += self.codes[node].l();
                self.messages[node] += 1;
            }
        }
        match solved {
            [true, false] | [false, true] => {
                let pos = solved.iter().position(|&s| s).unwrap();
                let l = self.codes[self.pairs[pair].nodes[pos]].l();
                self.pairs[pair].store.rotate_pairing(NATIVE[pos], l)?;
                self.new_message(pair, pos)?;
            }
            [true, true] => {
                for pos in 0..2 {
                    let l = self.codes[self.pairs[pair].nodes[pos]].l();
                    self.pairs[pair].store.restart_stream(NATIVE[pos], l)?;
                    self.new_message(pair, pos)?;
                }
            }
            [false, false] => {}
        }
        // A message that has used every index without being decoded is dropped.
        for pos in 0..2 {
            if self.pairs[pair].store.sent_count(NATIVE[pos]) >= self.n {
                let node = self.pairs[pair].nodes[pos];
                self.abandoned[node] += 1;
                self.pairs[pair].store.restart_stream(NATIVE[pos], self.codes[node].l())?;
                self.new_message(pair, pos)?;
            }
        }
        let p = &mut self.pairs[pair];
        p.next_index = next_index(p.next_index, self.n);
        Ok(())
    }

    fn stats(&self, cfg: &SessionConfig) -> SessionStats {
        let mut node_slots = vec![0; cfg.nodes.len()];
        for (pair, nodes) in cfg.pairs.iter().enumerate() {
            for &n in nodes {
                node_slots[n] = self.pair_slots[pair];
            }
        }
        let nodes: Vec<NodeStats> = (0..cfg.nodes.len())
            .map(|n| NodeStats {
                node: n,
                packets: self.packets[n],
                messages: self.messages[n],
                abandoned: self.abandoned[n],
                slots: node_slots[n],
                throughput: if node_slots[n] == 0 { 0.0 } else { self.packets[n] as f64 / node_slots[n] as f64 },
            })
            .collect();
        let slots: usize = self.pair_slots.iter().sum();
        let total: usize = self.packets.iter().sum();
        let upper_bound = GroupFrequencies::from_counts(&self.group_counts).map(|f| upper_bound(&f).expect("counts give valid frequencies"));
        SessionStats {
            slots,
            long_enough: cfg.pairs.iter().flatten().all(|&n| self.messages[n] >= MIN_ROUNDS),
            nodes,
            group_counts: self.group_counts,
            event_counts: self.event_counts,
            throughput: if slots == 0 { 0.0 } else { total as f64 / slots as f64 },
            upper_bound,
            undetected_errors: self.undetected,
            mac_conflicts: self.pairs.iter().map(|p| p.store.conflicts()).sum(),
        }
    }
}

/// Pair polled in a given slot.
fn scheduled_pair(cfg: &SessionConfig, slot: usize) -> usize {
    (slot / cfg.slots_per_poll) % cfg.pairs.len()
}

/// Seed of the channel realization for each slot, in order.
fn channel_seeds(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

/// Runs a session and returns its statistics and per-slot trace.
pub fn run_session(cfg: &SessionConfig) -> Result<(SessionStats, Trace), ProtocolError> {
    cfg.validate()?;
    let lengths: Vec<usize> = cfg.nodes.iter().map(|n| n.l).collect();
    let mode = cfg.variant.mac_mode();
    let decoder = cfg.variant.decoder(cfg.alpha);
    let mut mac = MacEngine::new(cfg, &lengths, mode)?;
    let mut seeds = channel_seeds(cfg.seed);
    let frame_len = coded_len(cfg.k);
    let mut records = Vec::with_capacity(cfg.slots);

    for slot in 0..cfg.slots {
        let pair = scheduled_pair(cfg, slot);
        let channel_seed = seeds.next_u64();
        let mut rng = ChaCha8Rng::seed_from_u64(channel_seed);
        let state = &mac.pairs[pair];
        let index = state.next_index;
        let nodes = state.nodes;

        let record = match decoder {
            None => {
                let pos = state.active;
                let node = nodes[pos];
                let sent = mac.truth(pair, pos, index)?;
                let mut ch = draw_channel(cfg.nodes[node].snr_db, None, cfg.channel, frame_len, &mut rng)?;
                ch.noiseless = cfg.noiseless;
                let rx = transmit(&modulate_packet(&sent), None, &ch, &mut rng)?;
                let est = perturb_csi(&ch, cfg.csi_error, &mut rng);
                let got = decode_single(&rx, &est, cfg.alpha, index, NATIVE[pos]);
                let record = TraceRecord {
                    slot,
                    pair,
                    event: None,
                    index,
                    tx: vec![TxEntry { node, msg: state.seq[pos], index }],
                    packets: got.iter().map(|p| hex::encode(p.to_bytes())).collect(),
                    channel_seed,
                };
                mac.single_user_slot(pair, got.as_ref())?;
                record
            }
            Some(dec) => {
                let pa = mac.truth(pair, 0, index)?;
                let pb = mac.truth(pair, 1, index)?;
                let (snr_a, snr_b) = (cfg.nodes[nodes[0]].snr_db, cfg.nodes[nodes[1]].snr_db);
                let mut ch = draw_channel(snr_a, Some(snr_b), cfg.channel, frame_len, &mut rng)?;
                ch.noiseless = cfg.noiseless;
                let rx = transmit(&modulate_packet(&pa), Some(&modulate_packet(&pb)), &ch, &mut rng)?;
                let est = perturb_csi(&ch, cfg.csi_error, &mut rng);
                let raw = decode_slot(&rx, &est, &dec, index);
                let record = TraceRecord {
                    slot,
                    pair,
                    event: Some(raw.event),
                    index,
                    tx: (0..2).map(|pos| TxEntry { node: nodes[pos], msg: state.seq[pos], index }).collect(),
                    packets: [&raw.decoded_a, &raw.decoded_b, &raw.decoded_x]
                        .into_iter()
                        .flatten()
                        .map(|p| hex::encode(p.to_bytes()))
                        .collect(),
                    channel_seed,
                };
                mac.two_user_slot(pair, &raw)?;
                record
            }
        };
        records.push(record);
    }

    let stats = mac.stats(cfg);
    let trace = Trace { header: TraceHeader { version: TRACE_VERSION, seed: cfg.seed, config: cfg.clone() }, records };
    Ok((stats, trace))
}

/// MAC parameters that may differ from the recorded session.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayOverrides {
    pub mode: Option<MacMode>,
    /// Message length per node index.
    pub lengths: BTreeMap<usize, usize>,
}

impl ReplayOverrides {
    pub fn mode(mode: MacMode) -> Self {
        Self { mode: Some(mode), lengths: BTreeMap::new() }
    }

    pub fn with_length(mut self, node: usize, l: usize) -> Self {
        self.lengths.insert(node, l);
        self
    }
}

fn parse_packet(hex_str: &str, slot: usize) -> Result<CodedPacket, ProtocolError> {
    let bytes = hex::decode(hex_str).map_err(|e| ProtocolError::TraceSlot { slot, message: format!("bad packet hex: {e}") })?;
    CodedPacket::from_bytes(&bytes).map_err(|e| ProtocolError::TraceSlot { slot, message: e.to_string() })
}

/// Re-runs MAC decoding over the PHY outcomes recorded in a trace.
///
/// Recorded payloads are used whenever they belong to the same message as in
/// the replay (same `K`, `L` and message sequence number); otherwise the
/// transmitted packets are regenerated from the session seed, since the
/// trace records which packets decoded rather than their contents for
/// messages that only exist under the new parameters.
pub fn replay(trace: &Trace, overrides: &ReplayOverrides) -> Result<SessionStats, ProtocolError> {
    let cfg = &trace.header.config;
    cfg.validate()?;
    let recorded_mode = cfg.variant.mac_mode();
    let mode = overrides.mode.unwrap_or(recorded_mode);
    if (recorded_mode == MacMode::SingleUser) != (mode == MacMode::SingleUser) {
        return Err(ProtocolError::Config(format!(
            "a {} trace cannot be replayed in {mode:?} mode",
            cfg.variant
        )));
    }
    if mode == MacMode::Ncma && recorded_mode != MacMode::Ncma {
        return Err(ProtocolError::Config(format!("a {} trace has no XOR outcomes to replay in NCMA mode", cfg.variant)));
    }
    let mut lengths: Vec<usize> = cfg.nodes.iter().map(|n| n.l).collect();
    for (&node, &l) in &overrides.lengths {
        *lengths
            .get_mut(node)
            .ok_or_else(|| ProtocolError::Config(format!("length override for unknown node {node}")))? = l;
    }
    let mut effective = cfg.clone();
    for (n, &l) in effective.nodes.iter_mut().zip(&lengths) {
        n.l = l;
    }
    effective.validate()?;
    let mut mac = MacEngine::new(&effective, &lengths, mode)?;

    for (expected_slot, rec) in trace.records.iter().enumerate() {
        let slot = rec.slot;
        let fail = |message: String| ProtocolError::TraceSlot { slot, message };
        if slot != expected_slot {
            return Err(fail(format!("expected slot {expected_slot}")));
        }
        let pair = scheduled_pair(cfg, slot);
        if rec.pair != pair {
            return Err(fail(format!("recorded pair {} but the schedule polls pair {pair}", rec.pair)));
        }
        let state = &mac.pairs[pair];
        if rec.index != state.next_index {
            return Err(fail(format!("recorded index {} but the pair is at index {}", rec.index, state.next_index)));
        }
        let index = rec.index;
        let recorded: Vec<CodedPacket> = rec.packets.iter().map(|h| parse_packet(h, slot)).collect::<Result<_, _>>()?;
        if recorded.iter().any(|p| p.index != index || p.payload.len() != cfg.k) {
            return Err(fail("packet index or length disagrees with the record".into()));
        }
        // A recorded packet is reused when its message is the one in flight.
        let same_message = |pos: usize| {
            let node = state.nodes[pos];
            rec.tx.iter().any(|t| t.node == node && t.msg == state.seq[pos]) && lengths[node] == cfg.nodes[node].l
        };
        let pick = |stream: Stream, reuse: bool| -> Result<Option<CodedPacket>, ProtocolError> {
            Ok(if reuse { recorded.iter().find(|p| p.stream == stream).cloned() } else { None })
        };

        match rec.event {
            None => {
                let [tx] = rec.tx.as_slice() else {
                    return Err(fail("single-user record must list one transmitter".into()));
                };
                let pos = state.active;
                if tx.node != state.nodes[pos] {
                    return Err(fail(format!("node {} transmitted but node {} is active in the replay", tx.node, state.nodes[pos])));
                }
                if recorded.len() > 1 || recorded.iter().any(|p| p.stream != NATIVE[pos]) {
                    return Err(fail("unexpected packets in single-user record".into()));
                }
                let got = match (recorded.first(), same_message(pos)) {
                    (None, _) => None,
                    (Some(p), true) => Some(p.clone()),
                    (Some(_), false) => Some(mac.truth(pair, pos, index)?),
                };
                mac.single_user_slot(pair, got.as_ref())?;
            }
            Some(event) => {
                if rec.tx.len() != 2 {
                    return Err(fail("two-user record must list two transmitters".into()));
                }
                let present = [event.mud.has_a(), event.mud.has_b(), event.xor];
                let streams = [Stream::A, Stream::B, Stream::AxorB];
                for (s, want) in streams.iter().zip(present) {
                    if recorded.iter().filter(|p| p.stream == *s).count() != want as usize {
                        return Err(fail(format!("packets do not match event {event}")));
                    }
                }
                let reuse = [same_message(0), same_message(1)];
                let a = if present[0] { pick(Stream::A, reuse[0])?.map_or_else(|| mac.truth(pair, 0, index), Ok).map(Some)? } else { None };
                let b = if present[1] { pick(Stream::B, reuse[1])?.map_or_else(|| mac.truth(pair, 1, index), Ok).map(Some)? } else { None };
                let x = if present[2] {
                    pick(Stream::AxorB, reuse[0] && reuse[1])?.map_or_else(|| mac.truth_xor(pair, index), Ok).map(Some)?
                } else {
                    None
                };
                mac.two_user_slot(pair, &SlotOutcome::new(a, b, x))?;
            }
        }
    }
    if trace.records.len() != cfg.slots {
        return Err(ProtocolError::TraceFormat {
            line: trace.records.len() + 1,
            message: format!("trace has {} records, header announces {}", trace.records.len(), cfg.slots),
        });
    }
    Ok(mac.stats(&effective))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn freq(none: f64, x: f64, single: f64, native_xor: f64, ab: f64) -> GroupFrequencies {
        GroupFrequencies { none, x, single, native_xor, ab }
    }

    #[test]
    fn upper_bound_examples() {
        assert_eq!(upper_bound(&freq(0.0, 0.0, 0.0, 0.0, 1.0)).unwrap(), 2.0);
        assert_eq!(upper_bound(&freq(1.0, 0.0, 0.0, 0.0, 0.0)).unwrap(), 0.0);
        let v = upper_bound(&freq(0.2, 0.2, 0.1, 0.2, 0.3)).unwrap();
        assert!((v - 1.3).abs() < 1e-12);
        assert!(upper_bound(&freq(0.5, 0.0, 0.0, 0.0, 0.0)).is_err());
        assert!(upper_bound(&freq(-0.1, 0.1, 0.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn variant_labels_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.label().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.label()));
        }
        assert!("NCMA".parse::<Variant>().is_err());
    }

    #[test]
    fn config_validation() {
        let good = SessionConfig::two_user(10.0, 10.0, 4, 4, Variant::NcmaRmud, 10, 1);
        assert!(good.validate().is_ok());
        let mut c = good.clone();
        c.pairs.push([1, 0]);
        assert!(c.validate().is_err());
        let mut c = good.clone();
        c.pairs = vec![[0, 0]];
        assert!(c.validate().is_err());
        let mut c = good.clone();
        c.nodes[1].l = 256;
        assert!(c.validate().is_err());
        let mut c = good;
        c.slots = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn noiseless_session_reaches_two() {
        let mut cfg = SessionConfig::two_user(10.0, 10.0, 4, 4, Variant::NcmaRmud, 100, 7);
        cfg.k = 8;
        cfg.noiseless = true;
        cfg.channel = ChannelModel::RayleighBlock { group: ChannelModel::DEFAULT_GROUP };
        let (stats, trace) = run_session(&cfg).unwrap();
        assert_eq!(stats.group_counts[EventGroup::AB.position()], 100);
        assert_eq!(stats.throughput, 2.0);
        assert_eq!(stats.upper_bound, Some(2.0));
        assert_eq!(trace.records.len(), 100);
    }

    #[test]
    fn single_user_session_at_high_snr() {
        let mut cfg = SessionConfig::two_user(10.0, 10.0, 4, 4, Variant::Su, 100, 8);
        cfg.k = 8;
        cfg.noiseless = true;
        let (stats, _) = run_session(&cfg).unwrap();
        assert_eq!(stats.throughput, 1.0);
        assert_eq!(stats.nodes[0].packets, 52);
        assert_eq!(stats.nodes[1].packets, 48);
        assert_eq!(stats.upper_bound, None);
    }

    #[test]
    fn message_generation_is_keyed_by_node_and_sequence() {
        let code = ErasureCode::gf256(8, 4).unwrap();
        let m = |node, seq| node_message(9, node, seq, &code);
        assert_eq!(m(0, 3), m(0, 3));
        assert_ne!(m(0, 3), m(0, 4));
        assert_ne!(m(0, 3), m(1, 3));
        assert_ne!(node_message(10, 0, 3, &code), m(0, 3));
    }

    #[test]
    fn identity_replay_matches_live_run() {
        for variant in [Variant::Su, Variant::Rmud, Variant::NcmaRmud, Variant::NcmaRmudSic] {
            let mut cfg = SessionConfig::two_user(2.0, 3.0, 4, 4, variant, 300, 11);
            cfg.k = 8;
            let (stats, trace) = run_session(&cfg).unwrap();
            assert_eq!(replay(&trace, &ReplayOverrides::default()).unwrap(), stats, "{variant}");
        }
    }

    #[test]
    fn replay_rejects_mode_mismatch_and_bad_records() {
        let mut cfg = SessionConfig::two_user(2.0, 2.0, 4, 4, Variant::Rmud, 30, 12);
        cfg.k = 8;
        let (_, trace) = run_session(&cfg).unwrap();
        assert!(replay(&trace, &ReplayOverrides::mode(MacMode::Ncma)).is_err());
        assert!(replay(&trace, &ReplayOverrides::mode(MacMode::SingleUser)).is_err());
        let mut broken = trace.clone();
        broken.records[17].index += 1;
        match replay(&broken, &ReplayOverrides::default()) {
            Err(ProtocolError::TraceSlot { slot, .. }) => assert_eq!(slot, 17),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn multiple_pairs_share_slots() {
        let mut cfg = SessionConfig::two_user(10.0, 10.0, 4, 4, Variant::NcmaRmud, 96, 13);
        cfg.k = 8;
        cfg.noiseless = true;
        cfg.channel = ChannelModel::RayleighBlock { group: ChannelModel::DEFAULT_GROUP };
        cfg.nodes.extend(cfg.nodes.clone());
        cfg.pairs.push([2, 3]);
        let (stats, trace) = run_session(&cfg).unwrap();
        assert_eq!(trace.records.iter().filter(|r| r.pair == 1).count(), 48);
        assert!(trace.records[..3].iter().all(|r| r.pair == 0));
        assert!(trace.records[3..6].iter().all(|r| r.pair == 1));
        for n in &stats.nodes {
            assert_eq!(n.slots, 48);
        }
        assert_eq!(stats.throughput, 2.0);
    }
}
