use std::collections::BTreeMap;

use super::{Qos, TopicSpec};
use crate::wire::{
    AckNack, DataFrag, FragmentBuffer, Guid, Heartbeat, Reliability, SeqBitmap, SequenceNumber, WireError,
    MAX_BITMAP_BITS,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub writer: Guid,
    pub seq: SequenceNumber,
    pub payload: Vec<u8>,
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct HeartbeatOutcome {
    pub acknack: Option<AckNack>,
    /// Samples released because the heartbeat advanced past a gap.
    pub deliveries: Vec<Delivery>,
    /// Seqs given up as unrecoverable, as an inclusive range.
    pub skipped: Option<(SequenceNumber, SequenceNumber)>,
}

#[derive(Debug, Clone)]
struct WriterProxy {
    highest_delivered: u64,
    /// Received but not yet deliverable (RELIABLE only).
    pending: BTreeMap<u64, Vec<u8>>,
    fragments: BTreeMap<u64, FragmentBuffer>,
    last_heartbeat_count: Option<u32>,
}

impl WriterProxy {
    fn new() -> Self {
        WriterProxy {
            highest_delivered: 0,
            pending: BTreeMap::new(),
            fragments: BTreeMap::new(),
            last_heartbeat_count: None,
        }
    }

    fn has(&self, seq: u64) -> bool {
        seq <= self.highest_delivered || self.pending.contains_key(&seq)
    }
}

/// Reader-side state for one local reader and each writer it matched.
///
/// RELIABLE readers deliver seqs `1..` per writer with no gaps or
/// duplicates, buffering out-of-order arrivals. BEST_EFFORT readers deliver
/// a sample only if it is newer than everything already delivered.
#[derive(Debug, Clone)]
pub struct ReaderState {
    guid: Guid,
    topic: TopicSpec,
    qos: Qos,
    max_fragment_buffers: usize,
    writers: BTreeMap<Guid, WriterProxy>,
}

impl ReaderState {
    pub fn new(guid: Guid, topic: TopicSpec, qos: Qos, max_fragment_buffers: usize) -> Self {
        ReaderState { guid, topic, qos, max_fragment_buffers, writers: BTreeMap::new() }
    }

    pub fn guid(&self) -> Guid {
        self.guid
    }

    pub fn topic(&self) -> &TopicSpec {
        &self.topic
    }

    pub fn qos(&self) -> &Qos {
        &self.qos
    }

    fn is_reliable(&self) -> bool {
        self.qos.reliability == Reliability::Reliable
    }

    pub fn match_writer(&mut self, writer: Guid) {
        self.writers.entry(writer).or_insert_with(WriterProxy::new);
    }

    pub fn unmatch_writer(&mut self, writer: &Guid) -> bool {
        self.writers.remove(writer).is_some()
    }

    pub fn is_matched(&self, writer: &Guid) -> bool {
        self.writers.contains_key(writer)
    }

    pub fn matched_writers(&self) -> impl Iterator<Item = &Guid> {
        self.writers.keys()
    }

    pub fn highest_delivered(&self, writer: &Guid) -> Option<SequenceNumber> {
        self.writers.get(writer).map(|p| SequenceNumber(p.highest_delivered))
    }

    /// Accepts one complete sample and returns whatever becomes deliverable.
    pub fn deliver(&mut self, writer: Guid, seq: SequenceNumber, payload: Vec<u8>) -> Vec<Delivery> {
        let reliable = self.is_reliable();
        let Some(proxy) = self.writers.get_mut(&writer) else {
            return Vec::new();
        };
        let seq = seq.0;
        proxy.fragments.remove(&seq);
        if seq <= proxy.highest_delivered {
            return Vec::new();
        }
        if !reliable {
            proxy.highest_delivered = seq;
            proxy.fragments.retain(|&s, _| s > seq);
            return vec![Delivery { writer, seq: SequenceNumber(seq), payload }];
        }
        proxy.pending.entry(seq).or_insert(payload);
        drain_contiguous(writer, proxy)
    }

    /// Adds one fragment; completes delivery when its train is whole.
    pub fn on_fragment(&mut self, writer: Guid, frag: &DataFrag) -> Result<Vec<Delivery>, WireError> {
        let reliable = self.is_reliable();
        let cap = self.max_fragment_buffers;
        let Some(proxy) = self.writers.get_mut(&writer) else {
            return Ok(Vec::new());
        };
        let seq = frag.seq.0;
        if proxy.has(seq) {
            return Ok(Vec::new());
        }
        if let Some(buffer) = proxy.fragments.get_mut(&seq) {
            buffer.insert(frag)?;
        } else {
            let highest = proxy.highest_delivered;
            proxy.fragments.retain(|&s, _| s > highest);
            if proxy.fragments.len() >= cap {
                let (&oldest, _) = proxy.fragments.first_key_value().expect("non-empty");
                let (&newest, _) = proxy.fragments.last_key_value().expect("non-empty");
                if !reliable {
                    proxy.fragments.remove(&oldest);
                } else if seq < newest {
                    // Keep the buffers closest to delivery; the evicted train
                    // is still pending and will be requested again.
                    proxy.fragments.remove(&newest);
                } else {
                    return Ok(Vec::new());
                }
            }
            proxy.fragments.insert(seq, FragmentBuffer::new(frag)?);
        }
        let done = proxy.fragments.get_mut(&seq).and_then(FragmentBuffer::take_if_complete);
        Ok(match done {
            Some(payload) => self.deliver(writer, frag.seq, payload),
            None => Vec::new(),
        })
    }

    /// Answers a writer heartbeat.
    ///
    /// If the writer no longer holds the next seq this reader needs, the gap
    /// below `first_seq` is skipped. The ACKNACK acknowledges everything
    /// below `highest_delivered + 1` and marks each seq up to `last_seq`
    /// that has not arrived, within a 256-bit window.
    pub fn on_heartbeat(&mut self, writer: Guid, hb: &Heartbeat) -> HeartbeatOutcome {
        let mut outcome = HeartbeatOutcome::default();
        if !self.is_reliable() {
            return outcome;
        }
        let reader_id = self.guid.entity_id;
        let Some(proxy) = self.writers.get_mut(&writer) else {
            return outcome;
        };
        if let Some(last) = proxy.last_heartbeat_count {
            if hb.count <= last && last.wrapping_sub(hb.count) < u32::MAX / 2 {
                return outcome;
            }
        }
        proxy.last_heartbeat_count = Some(hb.count);

        let first = hb.first_seq.0;
        if first > proxy.highest_delivered + 1 {
            let from = proxy.highest_delivered + 1;
            let missing_below = (from..first).any(|s| !proxy.pending.contains_key(&s));
            if missing_below {
                log::warn!(
                    "reader {}: writer {writer} no longer holds seqs {from}..{}, skipping",
                    self.guid,
                    first - 1
                );
                outcome.skipped = Some((SequenceNumber(from), SequenceNumber(first - 1)));
            }
            // Whatever was buffered below `first` is still delivered in order.
            let mut released: Vec<Delivery> = Vec::new();
            let below: Vec<u64> = proxy.pending.range(..first).map(|(&s, _)| s).collect();
            for s in below {
                let payload = proxy.pending.remove(&s).expect("present");
                released.push(Delivery { writer, seq: SequenceNumber(s), payload });
            }
            proxy.highest_delivered = first - 1;
            proxy.fragments.retain(|&s, _| s >= first);
            released.extend(drain_contiguous(writer, proxy));
            outcome.deliveries = released;
        }

        let base = proxy.highest_delivered + 1;
        let last = hb.last_seq.0;
        let window = if last >= base { (last - base + 1).min(u64::from(MAX_BITMAP_BITS)) } else { 0 };
        let missing: Vec<u32> =
            (0..window).filter(|&i| !proxy.pending.contains_key(&(base + i))).map(|i| i as u32).collect();
        let bitmap = if missing.is_empty() {
            SeqBitmap::new(0)
        } else {
            let mut bits = SeqBitmap::new(window as u32);
            missing.iter().for_each(|&i| bits.set(i));
            bits
        };
        outcome.acknack = Some(AckNack {
            reader_id,
            writer_guid: writer,
            base_seq: SequenceNumber(base),
            final_flag: missing.is_empty(),
            missing: bitmap,
        });
        outcome
    }
}

fn drain_contiguous(writer: Guid, proxy: &mut WriterProxy) -> Vec<Delivery> {
    let mut out = Vec::new();
    while let Some(payload) = proxy.pending.remove(&(proxy.highest_delivered + 1)) {
        proxy.highest_delivered += 1;
        out.push(Delivery { writer, seq: SequenceNumber(proxy.highest_delivered), payload });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{fragment_payload, EntityId, GuidPrefix};
    use std::collections::BTreeSet;

    fn writer() -> Guid {
        Guid::new(GuidPrefix([1; 12]), EntityId(1))
    }

    fn reader(rel: Reliability) -> ReaderState {
        let qos = Qos { reliability: rel, ..Qos::default() };
        let mut r = ReaderState::new(Guid::new(GuidPrefix([2; 12]), EntityId(1)), TopicSpec::new("t", "T"), qos, 8);
        r.match_writer(writer());
        r
    }

    fn hb(first: u64, last: u64, count: u32) -> Heartbeat {
        Heartbeat {
            writer_id: EntityId(1),
            first_seq: SequenceNumber(first),
            last_seq: SequenceNumber(last),
            count,
            final_flag: false,
        }
    }

    fn seqs(d: &[Delivery]) -> Vec<u64> {
        d.iter().map(|d| d.seq.0).collect()
    }

    #[test]
    fn reliable_reorders() {
        let mut r = reader(Reliability::Reliable);
        assert!(r.deliver(writer(), SequenceNumber(2), vec![2]).is_empty());
        assert_eq!(seqs(&r.deliver(writer(), SequenceNumber(1), vec![1])), vec![1, 2]);
    }

    #[test]
    fn reliable_suppresses_duplicates() {
        let mut r = reader(Reliability::Reliable);
        let mut all = Vec::new();
        for s in [1, 2, 2] {
            all.extend(r.deliver(writer(), SequenceNumber(s), vec![s as u8]));
        }
        assert_eq!(seqs(&all), vec![1, 2]);
    }

    #[test]
    fn best_effort_drops_late_samples() {
        let mut r = reader(Reliability::BestEffort);
        let mut all = Vec::new();
        for s in [2, 1] {
            all.extend(r.deliver(writer(), SequenceNumber(s), vec![s as u8]));
        }
        assert_eq!(seqs(&all), vec![2]);
    }

    #[test]
    fn unmatched_writer_ignored() {
        let mut r = reader(Reliability::Reliable);
        let stranger = Guid::new(GuidPrefix([9; 12]), EntityId(1));
        assert!(r.deliver(stranger, SequenceNumber(1), vec![1]).is_empty());
        assert!(r.on_heartbeat(stranger, &hb(1, 3, 1)).acknack.is_none());
    }

    #[test]
    fn heartbeat_requests_gap() {
        let mut r = reader(Reliability::Reliable);
        r.deliver(writer(), SequenceNumber(1), vec![1]);
        r.deliver(writer(), SequenceNumber(3), vec![3]);
        let an = r.on_heartbeat(writer(), &hb(1, 3, 1)).acknack.unwrap();
        assert_eq!(an.base_seq, SequenceNumber(2));
        assert!(an.missing.get(0));
        assert_eq!(an.missing.count_set(), 1);
        assert!(!an.final_flag);
    }

    #[test]
    fn heartbeat_nothing_missing() {
        let mut r = reader(Reliability::Reliable);
        for s in 1..=3 {
            r.deliver(writer(), SequenceNumber(s), vec![1]);
        }
        let an = r.on_heartbeat(writer(), &hb(1, 3, 1)).acknack.unwrap();
        assert_eq!(an.base_seq, SequenceNumber(4));
        assert!(an.missing.is_empty());
        assert!(an.final_flag);
    }

    #[test]
    fn heartbeat_empty_history() {
        let mut r = reader(Reliability::Reliable);
        let an = r.on_heartbeat(writer(), &hb(1, 0, 1)).acknack.unwrap();
        assert_eq!(an.base_seq, SequenceNumber(1));
        assert!(an.missing.is_empty());
    }

    #[test]
    fn heartbeat_skips_evicted_gap() {
        let mut r = reader(Reliability::Reliable);
        r.deliver(writer(), SequenceNumber(1), vec![1]);
        r.deliver(writer(), SequenceNumber(6), vec![6]);
        let out = r.on_heartbeat(writer(), &hb(5, 10, 1));
        assert_eq!(out.skipped, Some((SequenceNumber(2), SequenceNumber(4))));
        assert!(out.deliveries.is_empty());
        let an = out.acknack.unwrap();
        assert_eq!(an.base_seq, SequenceNumber(5));
        let missing: Vec<u64> = an.missing_seqs().map(|s| s.0).collect();
        assert_eq!(missing, vec![5, 7, 8, 9, 10]);
        assert_eq!(seqs(&r.deliver(writer(), SequenceNumber(5), vec![5])), vec![5, 6]);
    }

    #[test]
    fn stale_heartbeat_count_ignored() {
        let mut r = reader(Reliability::Reliable);
        assert!(r.on_heartbeat(writer(), &hb(1, 2, 5)).acknack.is_some());
        assert!(r.on_heartbeat(writer(), &hb(1, 2, 4)).acknack.is_none());
        assert!(r.on_heartbeat(writer(), &hb(1, 2, 6)).acknack.is_some());
    }

    #[test]
    fn bitmap_window_capped() {
        let mut r = reader(Reliability::Reliable);
        let an = r.on_heartbeat(writer(), &hb(1, 1_000, 1)).acknack.unwrap();
        assert_eq!(an.missing.len(), 256);
        assert_eq!(an.missing.count_set(), 256);
    }

    #[test]
    fn fragments_reassemble_into_delivery() {
        let mut r = reader(Reliability::Reliable);
        let payload: Vec<u8> = (0..5_000u32).map(|i| i as u8).collect();
        let frags = fragment_payload(EntityId(1), SequenceNumber(1), &payload, 1_200).unwrap();
        let mut out = Vec::new();
        for f in frags.iter().rev() {
            out.extend(r.on_fragment(writer(), f).unwrap());
        }
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].payload, payload);
        // A late duplicate fragment of a delivered seq is ignored.
        assert!(r.on_fragment(writer(), &frags[0]).unwrap().is_empty());
    }

    #[test]
    fn reliable_fragment_cap_keeps_lowest_seqs() {
        let qos = Qos::reliable();
        let mut r = ReaderState::new(Guid::new(GuidPrefix([2; 12]), EntityId(1)), TopicSpec::new("t", "T"), qos, 2);
        r.match_writer(writer());
        let first_frag = |seq: u64| fragment_payload(EntityId(1), SequenceNumber(seq), &[0u8; 3_000], 1_200).unwrap();
        for seq in [3, 4, 5] {
            r.on_fragment(writer(), &first_frag(seq)[0]).unwrap();
        }
        // seq 5 was refused: buffers hold 3 and 4.
        r.on_fragment(writer(), &first_frag(2)[0]).unwrap();
        // seq 2 displaced the newest (4); completing 1 then 2 and 3 works.
        let mut out = r.deliver(writer(), SequenceNumber(1), vec![1]);
        for f in &first_frag(2)[1..] {
            out.extend(r.on_fragment(writer(), f).unwrap());
        }
        for f in &first_frag(3)[1..] {
            out.extend(r.on_fragment(writer(), f).unwrap());
        }
        assert_eq!(seqs(&out), vec![1, 2, 3]);
    }

    /// Exhaustive check of the heartbeat response against a set-based
    /// definition for every received subset of 1..=6 and every heartbeat
    /// range inside it.
    #[test]
    fn heartbeat_response_matches_set_oracle() {
        const N: u64 = 6;
        for mask in 0u32..(1 << N) {
            let received: BTreeSet<u64> = (1..=N).filter(|s| mask & (1 << (s - 1)) != 0).collect();
            for last in 0..=N {
                let mut r = reader(Reliability::Reliable);
                for &s in &received {
                    r.deliver(writer(), SequenceNumber(s), vec![0]);
                }
                let an = r.on_heartbeat(writer(), &hb(1, last, 1)).acknack.unwrap();

                let mut contiguous = 0;
                while received.contains(&(contiguous + 1)) {
                    contiguous += 1;
                }
                let expected_base = contiguous + 1;
                let expected_missing: Vec<u64> = (expected_base..=last).filter(|s| !received.contains(s)).collect();
                assert_eq!(an.base_seq.0, expected_base, "mask {mask:06b} last {last}");
                let got: Vec<u64> = an.missing_seqs().map(|s| s.0).collect();
                assert_eq!(got, expected_missing, "mask {mask:06b} last {last}");
                assert_eq!(an.final_flag, expected_missing.is_empty());
            }
        }
    }
}
