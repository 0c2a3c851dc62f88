//! MAC-layer message decoding with three interacting equation systems: one
//! for each native stream and one for their XOR.
//!
//! Every packet is a linear equation in its stream's message. A stream is
//! solved once it holds as many distinct indices as its threshold. Solved
//! streams are re-encoded at every index already transmitted, and at each
//! such index any two of `{A, B, A xor B}` determine the third. Iterating
//! those two steps to a fixed point lets XOR packets bridge equations from
//! one native system into the other.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::erasure::{xor_packets, CodedPacket, ErasureCode, ErasureError, SourceMessage, Stream};
use crate::galois::GaloisField;
use crate::phydec::SlotOutcome;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MacError {
    #[error(transparent)]
    Erasure(#[from] ErasureError),
    #[error("index {index} was already transmitted on stream {stream}")]
    DuplicateIndex { stream: Stream, index: usize },
    #[error("packet for stream {got} at index {got_index} delivered to slot expecting {expected} at {expected_index}")]
    WrongPacket { got: Stream, got_index: usize, expected: Stream, expected_index: usize },
    #[error("rotation requires exactly one solved native stream (A solved: {a}, B solved: {b})")]
    RotationState { a: bool, b: bool },
    #[error("the XOR stream cannot be rotated on its own")]
    NotNative,
}

/// How a stored packet was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PacketOrigin {
    Phy,
    Bridged,
    Reencoded,
}

#[derive(Debug, Clone)]
struct EquationSystem {
    // None when the system can only be used for per-index bridging.
    code: Option<ErasureCode>,
    packets: BTreeMap<usize, (CodedPacket, PacketOrigin)>,
    sent: BTreeSet<usize>,
    solution: Option<SourceMessage>,
}

impl EquationSystem {
    fn new(code: Option<ErasureCode>) -> Self {
        Self { code, packets: BTreeMap::new(), sent: BTreeSet::new(), solution: None }
    }

    fn solvable(&self) -> bool {
        self.solution.is_none() && self.code.as_ref().is_some_and(|c| self.packets.len() >= c.l())
    }
}

/// Per-stream view used for debugging dumps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StreamSnapshot {
    pub threshold: Option<usize>,
    pub indices: Vec<usize>,
    pub sent: Vec<usize>,
    pub solved: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StoreSnapshot {
    #[serde(rename = "A")]
    pub a: StreamSnapshot,
    #[serde(rename = "B")]
    pub b: StreamSnapshot,
    #[serde(rename = "X")]
    pub x: StreamSnapshot,
    pub conflicts: usize,
}

/// The accumulated equations for the message pair currently in flight.
#[derive(Debug, Clone)]
pub struct EquationStore {
    field: GaloisField,
    k: usize,
    systems: [EquationSystem; 3],
    conflicts: usize,
}

fn slot(stream: Stream) -> usize {
    match stream {
        Stream::A => 0,
        Stream::B => 1,
        Stream::AxorB => 2,
    }
}

/// Cyclic successor of packet index `j` in `1..=n`.
pub fn next_index(j: usize, n: usize) -> usize {
    j % n + 1
}

impl EquationStore {
    pub fn new(field: GaloisField, k: usize, l_a: usize, l_b: usize) -> Result<Self, MacError> {
        let code_a = ErasureCode::new(field.clone(), k, l_a)?;
        let code_b = ErasureCode::new(field.clone(), k, l_b)?;
        let code_x = (l_a == l_b).then(|| code_a.clone());
        Ok(Self {
            field,
            k,
            systems: [
                EquationSystem::new(Some(code_a)),
                EquationSystem::new(Some(code_b)),
                EquationSystem::new(code_x),
            ],
            conflicts: 0,
        })
    }

    pub fn gf256(k: usize, l_a: usize, l_b: usize) -> Result<Self, MacError> {
        Self::new(GaloisField::gf256().clone(), k, l_a, l_b)
    }

    fn sys(&self, s: Stream) -> &EquationSystem {
        &self.systems[slot(s)]
    }

    fn sys_mut(&mut self, s: Stream) -> &mut EquationSystem {
        &mut self.systems[slot(s)]
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Decode threshold; `None` for the XOR system when `L_A != L_B`.
    pub fn threshold(&self, s: Stream) -> Option<usize> {
        self.sys(s).code.as_ref().map(ErasureCode::l)
    }

    pub fn xor_solvable(&self) -> bool {
        self.sys(Stream::AxorB).code.is_some()
    }

    pub fn packet_count(&self, s: Stream) -> usize {
        self.sys(s).packets.len()
    }

    pub fn indices(&self, s: Stream) -> Vec<usize> {
        self.sys(s).packets.keys().copied().collect()
    }

    pub fn packet(&self, s: Stream, index: usize) -> Option<&CodedPacket> {
        self.sys(s).packets.get(&index).map(|(p, _)| p)
    }

    pub fn origin(&self, s: Stream, index: usize) -> Option<PacketOrigin> {
        self.sys(s).packets.get(&index).map(|(_, o)| *o)
    }

    /// Number of indices transmitted for the stream's current message.
    pub fn sent_count(&self, s: Stream) -> usize {
        self.sys(s).sent.len()
    }

    pub fn solution(&self, s: Stream) -> Option<&SourceMessage> {
        self.sys(s).solution.as_ref()
    }

    pub fn is_solved(&self, s: Stream) -> bool {
        self.sys(s).solution.is_some()
    }

    /// Stored packets that disagreed with a later solution and were replaced.
    /// Nonzero only after an undetected CRC error.
    pub fn conflicts(&self) -> usize {
        self.conflicts
    }

    fn register_sent(&mut self, s: Stream, index: usize) -> Result<(), MacError> {
        if !self.sys_mut(s).sent.insert(index) {
            return Err(MacError::DuplicateIndex { stream: s, index });
        }
        Ok(())
    }

    fn store(&mut self, s: Stream, index: usize, p: &CodedPacket) -> Result<(), MacError> {
        if p.stream != s || p.index != index {
            return Err(MacError::WrongPacket { got: p.stream, got_index: p.index, expected: s, expected_index: index });
        }
        if p.payload.len() != self.k {
            return Err(ErasureError::PayloadLength { got: p.payload.len(), expected: self.k }.into());
        }
        self.sys_mut(s).packets.insert(index, (p.clone(), PacketOrigin::Phy));
        Ok(())
    }

    /// Records a two-user slot in which both users sent `index`. The outcome
    /// should already have been through PHY bridging.
    pub fn ingest(&mut self, index: usize, o: &SlotOutcome) -> Result<(), MacError> {
        for s in Stream::ALL {
            if self.sys(s).sent.contains(&index) {
                return Err(MacError::DuplicateIndex { stream: s, index });
            }
        }
        for (s, p) in [(Stream::A, &o.decoded_a), (Stream::B, &o.decoded_b), (Stream::AxorB, &o.decoded_x)] {
            if let Some(p) = p {
                if p.stream != s || p.index != index {
                    return Err(MacError::WrongPacket { got: p.stream, got_index: p.index, expected: s, expected_index: index });
                }
            }
        }
        for (s, p) in [(Stream::A, &o.decoded_a), (Stream::B, &o.decoded_b), (Stream::AxorB, &o.decoded_x)] {
            self.register_sent(s, index)?;
            if let Some(p) = p {
                self.store(s, index, p)?;
            }
        }
        Ok(())
    }

    /// Records a slot in which only one native stream transmitted.
    pub fn ingest_single(&mut self, index: usize, s: Stream, p: Option<&CodedPacket>) -> Result<(), MacError> {
        if s == Stream::AxorB {
            return Err(MacError::NotNative);
        }
        if let Some(p) = p {
            if p.stream != s || p.index != index {
                return Err(MacError::WrongPacket { got: p.stream, got_index: p.index, expected: s, expected_index: index });
            }
        }
        self.register_sent(s, index)?;
        if let Some(p) = p {
            self.store(s, index, p)?;
        }
        Ok(())
    }

    fn solve(&mut self, s: Stream) -> Result<(), MacError> {
        let sys = self.sys(s);
        let code = sys.code.as_ref().expect("solvable systems have a code");
        let packets: Vec<CodedPacket> = sys.packets.values().take(code.l()).map(|(p, _)| p.clone()).collect();
        let msg = code.decode_message(&packets)?;
        let mut fill = Vec::new();
        let mut conflicts = 0;
        for &i in &sys.sent {
            let p = code.encode_packet(&msg, i)?;
            match sys.packets.get(&i) {
                None => fill.push(p),
                Some((stored, _)) if *stored != p => {
                    conflicts += 1;
                    fill.push(p);
                }
                Some(_) => {}
            }
        }
        self.conflicts += conflicts;
        let sys = self.sys_mut(s);
        for p in fill {
            sys.packets.insert(p.index, (p, PacketOrigin::Reencoded));
        }
        sys.solution = Some(msg);
        Ok(())
    }

    /// Re-encodes solved systems at indices sent after they were solved.
    fn extend_solved(&mut self) -> Result<bool, MacError> {
        let mut changed = false;
        for sys in &mut self.systems {
            let (Some(code), Some(msg)) = (&sys.code, &sys.solution) else {
                continue;
            };
            let missing: Vec<usize> = sys.sent.iter().copied().filter(|i| !sys.packets.contains_key(i)).collect();
            for i in missing {
                sys.packets.insert(i, (code.encode_packet(msg, i)?, PacketOrigin::Reencoded));
                changed = true;
            }
        }
        Ok(changed)
    }

    /// Derives the third packet at every index where exactly two of the
    /// three streams are known. Returns whether anything was added.
    fn bridge(&mut self) -> Result<bool, MacError> {
        let mut additions = Vec::new();
        for &i in &self.sys(Stream::AxorB).sent {
            let [a, b, x] = [Stream::A, Stream::B, Stream::AxorB].map(|s| self.packet(s, i));
            let derived = match (a, b, x) {
                (Some(a), Some(b), None) => xor_packets(a, b)?,
                (Some(a), None, Some(x)) => xor_packets(a, x)?,
                (None, Some(b), Some(x)) => xor_packets(b, x)?,
                _ => continue,
            };
            additions.push(derived);
        }
        let changed = !additions.is_empty();
        for p in additions {
            self.sys_mut(p.stream).packets.insert(p.index, (p, PacketOrigin::Bridged));
        }
        Ok(changed)
    }

    /// Runs solving and bridging to a fixed point. Returns the streams newly
    /// solved by this call, in the order they were solved.
    pub fn resolve(&mut self) -> Result<Vec<Stream>, MacError> {
        let mut solved = Vec::new();
        loop {
            let mut changed = false;
            for s in Stream::ALL {
                if self.sys(s).solvable() {
                    self.solve(s)?;
                    solved.push(s);
                    changed = true;
                }
            }
            changed |= self.extend_solved()?;
            changed |= self.bridge()?;
            if !changed {
                return Ok(solved);
            }
        }
    }

    fn reset_xor(&mut self) {
        let enabled = self.threshold(Stream::A) == self.threshold(Stream::B);
        let code = enabled.then(|| self.sys(Stream::A).code.clone()).flatten();
        *self.sys_mut(Stream::AxorB) = EquationSystem::new(code);
    }

    /// Starts a fresh message on `s` (threshold `l`) and resets the XOR
    /// system. Equations of the other native stream are kept.
    pub fn restart_stream(&mut self, s: Stream, l: usize) -> Result<(), MacError> {
        if s == Stream::AxorB {
            return Err(MacError::NotNative);
        }
        let code = ErasureCode::new(self.field.clone(), self.k, l)?;
        *self.sys_mut(s) = EquationSystem::new(Some(code));
        self.reset_xor();
        Ok(())
    }

    /// Replaces the single solved native stream with a new message. The new
    /// message continues the pair's cyclic index sequence, so callers keep
    /// using [`next_index`] on the last index sent.
    pub fn rotate_pairing(&mut self, finished: Stream, new_l: usize) -> Result<(), MacError> {
        if finished == Stream::AxorB {
            return Err(MacError::NotNative);
        }
        let (a, b) = (self.is_solved(Stream::A), self.is_solved(Stream::B));
        if a == b || !self.is_solved(finished) {
            return Err(MacError::RotationState { a, b });
        }
        self.restart_stream(finished, new_l)
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        let view = |s: Stream| StreamSnapshot {
            threshold: self.threshold(s),
            indices: self.indices(s),
            sent: self.sys(s).sent.iter().copied().collect(),
            solved: self.is_solved(s),
        };
        StoreSnapshot { a: view(Stream::A), b: view(Stream::B), x: view(Stream::AxorB), conflicts: self.conflicts }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const K: usize = 8;

    struct Pair {
        code: ErasureCode,
        ma: SourceMessage,
        mb: SourceMessage,
    }

    impl Pair {
        fn new(rng: &mut ChaCha8Rng, l: usize) -> Self {
            let code = ErasureCode::gf256(K, l).unwrap();
            let ma = code.random_message(Stream::A, rng);
            let mb = code.random_message(Stream::B, rng);
            Self { code, ma, mb }
        }

        fn outcome(&self, i: usize, a: bool, b: bool, x: bool) -> SlotOutcome {
            let pa = self.code.encode_packet(&self.ma, i).unwrap();
            let pb = self.code.encode_packet(&self.mb, i).unwrap();
            let px = xor_packets(&pa, &pb).unwrap();
            SlotOutcome::new(a.then_some(pa), b.then_some(pb), x.then_some(px))
        }
    }

    #[test]
    fn three_packet_bridging_scenario() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pair = Pair::new(&mut rng, 3);
        let mut store = EquationStore::gf256(K, 3, 3).unwrap();
        // Slots 1..5: A = {1, 4, 5}, B = {3, 4}, X = {2, 4}.
        let pattern = [(1, true, false, false), (2, false, false, true), (3, false, true, false), (4, true, true, true), (5, true, false, false)];
        for (i, a, b, x) in pattern {
            store.ingest(i, &pair.outcome(i, a, b, x)).unwrap();
        }
        let solved = store.resolve().unwrap();
        assert_eq!(solved[0], Stream::A);
        assert!(solved.contains(&Stream::B));
        assert_eq!(store.solution(Stream::A).unwrap().symbols(), pair.ma.symbols());
        assert_eq!(store.solution(Stream::B).unwrap().symbols(), pair.mb.symbols());
        assert_eq!(store.origin(Stream::A, 2), Some(PacketOrigin::Reencoded));
        assert_eq!(store.origin(Stream::B, 2), Some(PacketOrigin::Bridged));
        assert_eq!(store.packet(Stream::B, 2), Some(&pair.code.encode_packet(&pair.mb, 2).unwrap()));
    }

    #[test]
    fn nothing_to_do_below_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pair = Pair::new(&mut rng, 4);
        let mut store = EquationStore::gf256(K, 4, 4).unwrap();
        store.ingest(1, &pair.outcome(1, true, false, false)).unwrap();
        store.ingest(2, &pair.outcome(2, false, true, false)).unwrap();
        store.ingest(3, &SlotOutcome::empty()).unwrap();
        let before = store.snapshot();
        assert!(store.resolve().unwrap().is_empty());
        assert_eq!(store.snapshot(), before);
    }

    #[test]
    fn lone_xor_grows_only_the_xor_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pair = Pair::new(&mut rng, 4);
        let mut store = EquationStore::gf256(K, 4, 4).unwrap();
        store.ingest(7, &pair.outcome(7, false, false, true)).unwrap();
        store.resolve().unwrap();
        assert_eq!(store.packet_count(Stream::A), 0);
        assert_eq!(store.packet_count(Stream::B), 0);
        assert_eq!(store.packet_count(Stream::AxorB), 1);
    }

    #[test]
    fn xor_solve_first_equalizes_native_index_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pair = Pair::new(&mut rng, 3);
        let mut store = EquationStore::gf256(K, 3, 3).unwrap();
        for i in 1..=3 {
            store.ingest(i, &pair.outcome(i, false, false, true)).unwrap();
        }
        assert_eq!(store.resolve().unwrap(), vec![Stream::AxorB]);
        for (i, a, b) in [(4, true, false), (5, false, true), (6, false, false)] {
            store.ingest(i, &pair.outcome(i, a, b, false)).unwrap();
            store.resolve().unwrap();
            assert_eq!(store.indices(Stream::A), store.indices(Stream::B));
        }
    }

    #[test]
    fn duplicate_index_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pair = Pair::new(&mut rng, 3);
        let mut store = EquationStore::gf256(K, 3, 3).unwrap();
        store.ingest(4, &pair.outcome(4, true, false, false)).unwrap();
        assert!(matches!(store.ingest(4, &SlotOutcome::empty()), Err(MacError::DuplicateIndex { index: 4, .. })));
        let wrong = pair.outcome(5, true, false, false);
        assert!(matches!(store.ingest(6, &wrong), Err(MacError::WrongPacket { .. })));
    }

    #[test]
    fn rotation_keeps_survivor_and_resets_xor() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pair = Pair::new(&mut rng, 3);
        let mut store = EquationStore::gf256(K, 3, 3).unwrap();
        for (i, a, b, x) in [(9, true, true, true), (10, false, true, true)] {
            store.ingest(i, &pair.outcome(i, a, b, x)).unwrap();
        }
        assert!(matches!(store.rotate_pairing(Stream::B, 3), Err(MacError::RotationState { .. })));
        store.ingest(11, &pair.outcome(11, false, true, false)).unwrap();
        assert_eq!(store.resolve().unwrap(), vec![Stream::B]);
        // B solved; A picked up index 10 through the XOR packet.
        assert_eq!(store.indices(Stream::A), vec![9, 10]);
        store.rotate_pairing(Stream::B, 3).unwrap();
        assert_eq!(store.packet_count(Stream::A), 2);
        assert_eq!(store.packet_count(Stream::B), 0);
        assert_eq!(store.packet_count(Stream::AxorB), 0);
        assert_eq!(next_index(11, 255), 12);
        assert_eq!(next_index(255, 255), 1);
        // The new B message sends index 12 along with A.
        let pair2 = Pair { mb: pair.code.random_message(Stream::B, &mut rng), ..pair };
        store.ingest(12, &pair2.outcome(12, true, false, false)).unwrap();
        assert_eq!(store.resolve().unwrap(), vec![Stream::A]);
        assert_eq!(store.solution(Stream::A).unwrap().symbols(), pair2.ma.symbols());
    }

    #[test]
    fn unequal_thresholds_disable_xor_solving_but_keep_bridging() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let code_a = ErasureCode::gf256(K, 3).unwrap();
        let code_b = ErasureCode::gf256(K, 2).unwrap();
        let ma = code_a.random_message(Stream::A, &mut rng);
        let mb = code_b.random_message(Stream::B, &mut rng);
        let mut store = EquationStore::gf256(K, 3, 2).unwrap();
        assert!(!store.xor_solvable());
        for i in 1..=3 {
            let x = xor_packets(&code_a.encode_packet(&ma, i).unwrap(), &code_b.encode_packet(&mb, i).unwrap()).unwrap();
            store.ingest(i, &SlotOutcome::new(None, None, Some(x))).unwrap();
        }
        assert!(store.resolve().unwrap().is_empty());
        store.ingest(4, &SlotOutcome::new(None, Some(code_b.encode_packet(&mb, 4).unwrap()), None)).unwrap();
        store.ingest(5, &SlotOutcome::new(None, Some(code_b.encode_packet(&mb, 5).unwrap()), None)).unwrap();
        let solved = store.resolve().unwrap();
        assert_eq!(solved, vec![Stream::B, Stream::A]);
        assert_eq!(store.solution(Stream::A).unwrap().symbols(), ma.symbols());
    }

    fn random_round(rng: &mut ChaCha8Rng, pair: &Pair, slots: usize) -> Vec<(usize, SlotOutcome)> {
        (1..=slots)
            .map(|i| {
                let (a, b, x) = (rng.random_bool(0.3), rng.random_bool(0.3), rng.random_bool(0.4));
                (i, crate::phydec::phy_bridge(&pair.outcome(i, a, b, x)))
            })
            .collect()
    }

    #[test]
    fn fixed_point_is_order_independent_and_sound() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let pair = Pair::new(&mut rng, 4);
            let mut round = random_round(&mut rng, &pair, 10);
            let run = |round: &[(usize, SlotOutcome)], resolve_each: bool| {
                let mut store = EquationStore::gf256(K, 4, 4).unwrap();
                for (i, o) in round {
                    store.ingest(*i, o).unwrap();
                    if resolve_each {
                        store.resolve().unwrap();
                    }
                }
                store.resolve().unwrap();
                store
            };
            let reference = run(&round, false);
            round.shuffle(&mut rng);
            let shuffled = run(&round, true);
            for s in Stream::ALL {
                assert_eq!(reference.is_solved(s), shuffled.is_solved(s));
                assert_eq!(reference.indices(s), shuffled.indices(s));
            }
            for (s, m) in [(Stream::A, &pair.ma), (Stream::B, &pair.mb)] {
                if let Some(sol) = reference.solution(s) {
                    assert_eq!(sol.symbols(), m.symbols());
                    for i in reference.indices(s) {
                        assert_eq!(reference.packet(s, i), Some(&pair.code.encode_packet(m, i).unwrap()));
                    }
                }
            }
            assert_eq!(reference.conflicts(), 0);
        }
    }

    #[test]
    fn bridging_conserves_information_before_any_solve() {
        // Without a solve, each XOR packet yields at most one extra native packet.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let pair = Pair::new(&mut rng, 200);
            let mut store = EquationStore::gf256(K, 200, 200).unwrap();
            let (mut natives, mut xors) = (0, 0);
            for i in 1..=30 {
                let (a, b, x) = (rng.random_bool(0.3), rng.random_bool(0.3), rng.random_bool(0.4));
                natives += a as usize + b as usize;
                xors += x as usize;
                store.ingest(i, &pair.outcome(i, a, b, x)).unwrap();
            }
            store.resolve().unwrap();
            assert!(store.packet_count(Stream::A) + store.packet_count(Stream::B) <= natives + xors);
        }
    }

    #[test]
    fn snapshot_serializes() {
        let store = EquationStore::gf256(K, 2, 2).unwrap();
        let json = serde_json::to_string(&store.snapshot()).unwrap();
        assert!(json.contains("\"X\":{\"threshold\":2"));
    }
}
