use std::collections::BTreeMap;
use std::sync::Arc;

use super::{PubSubError, Qos, TopicSpec};
use crate::transport::Locator;
use crate::wire::{AckNack, Guid, GuidPrefix, Heartbeat, Reliability, SeqBitmap, SequenceNumber};

#[derive(Debug, Clone)]
pub(crate) struct ReaderProxy {
    pub locator: Locator,
    pub reliability: Reliability,
    /// Every seq below this is acknowledged.
    pub acked_below: u64,
    /// First seq written after the match; earlier samples are not owed.
    pub start_seq: u64,
    last_request: Option<(u64, SeqBitmap, u64)>,
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct AckNackResponse {
    pub retransmit: Vec<SequenceNumber>,
    /// Sent when the reader asked for samples that were already evicted.
    pub heartbeat: Option<Heartbeat>,
}

/// Writer-side history cache and per-reader acknowledgment state.
#[derive(Debug, Clone)]
pub struct WriterHistory {
    guid: Guid,
    topic: TopicSpec,
    qos: Qos,
    samples: BTreeMap<u64, Arc<[u8]>>,
    next_seq: u64,
    heartbeat_count: u32,
    pub(crate) readers: BTreeMap<Guid, ReaderProxy>,
    pub(crate) last_heartbeat_us: Option<u64>,
}

impl WriterHistory {
    pub fn new(guid: Guid, topic: TopicSpec, qos: Qos) -> Self {
        WriterHistory {
            guid,
            topic,
            qos,
            samples: BTreeMap::new(),
            next_seq: 1,
            heartbeat_count: 0,
            readers: BTreeMap::new(),
            last_heartbeat_us: None,
        }
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

    pub fn next_seq(&self) -> SequenceNumber {
        SequenceNumber(self.next_seq)
    }

    /// Oldest retained seq, or `next_seq` when the history is empty.
    pub fn first_retained(&self) -> SequenceNumber {
        SequenceNumber(self.samples.keys().next().copied().unwrap_or(self.next_seq))
    }

    pub fn retained(&self) -> impl Iterator<Item = SequenceNumber> + '_ {
        self.samples.keys().map(|&s| SequenceNumber(s))
    }

    pub fn sample(&self, seq: SequenceNumber) -> Option<&Arc<[u8]>> {
        self.samples.get(&seq.0)
    }

    pub fn add_reader(&mut self, reader: Guid, locator: Locator, reliability: Reliability) {
        let start = self.next_seq;
        self.readers.entry(reader).or_insert(ReaderProxy {
            locator,
            reliability,
            acked_below: start,
            start_seq: start,
            last_request: None,
        });
    }

    pub fn remove_reader(&mut self, reader: &Guid) -> bool {
        self.readers.remove(reader).is_some()
    }

    pub fn remove_participant(&mut self, prefix: GuidPrefix) -> Vec<Guid> {
        let gone: Vec<Guid> = self.readers.keys().filter(|g| g.prefix == prefix).copied().collect();
        for g in &gone {
            self.readers.remove(g);
        }
        gone
    }

    pub fn matched_readers(&self) -> impl Iterator<Item = (&Guid, Locator, Reliability)> {
        self.readers.iter().map(|(g, p)| (g, p.locator, p.reliability))
    }

    fn reliable_readers(&self) -> impl Iterator<Item = &ReaderProxy> {
        let reliable = self.is_reliable();
        self.readers.values().filter(move |p| reliable && p.reliability == Reliability::Reliable)
    }

    /// True if some reliable reader has not acknowledged every written seq.
    pub fn has_unacknowledged(&self) -> bool {
        self.reliable_readers().any(|p| p.acked_below < self.next_seq)
    }

    pub fn is_acked_by_all(&self, seq: SequenceNumber) -> bool {
        self.reliable_readers().all(|p| p.acked_below > seq.0)
    }

    pub fn can_write(&self) -> bool {
        if self.samples.len() < self.qos.history_depth {
            return true;
        }
        let oldest = self.first_retained();
        self.is_acked_by_all(oldest)
    }

    /// Stores a new sample, evicting the oldest beyond `history_depth`.
    pub fn write(&mut self, payload: impl Into<Arc<[u8]>>) -> Result<SequenceNumber, PubSubError> {
        let payload = payload.into();
        if payload.is_empty() {
            return Err(PubSubError::EmptyPayload);
        }
        if !self.can_write() {
            return Err(PubSubError::HistoryFull);
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.samples.insert(seq, payload);
        while self.samples.len() > self.qos.history_depth {
            self.samples.pop_first();
        }
        Ok(SequenceNumber(seq))
    }

    fn make_heartbeat(&mut self, first: u64) -> Heartbeat {
        self.heartbeat_count = self.heartbeat_count.wrapping_add(1);
        let last = self.next_seq - 1;
        Heartbeat {
            writer_id: self.guid.entity_id,
            first_seq: SequenceNumber(first.clamp(1, last + 1)),
            last_seq: SequenceNumber(last),
            count: self.heartbeat_count,
            final_flag: false,
        }
    }

    /// Heartbeat for a destination whose earliest owed sample is `start_seq`.
    pub fn heartbeat_from(&mut self, start_seq: u64) -> Heartbeat {
        let first = self.first_retained().0.max(start_seq);
        self.make_heartbeat(first)
    }

    pub fn heartbeat(&mut self) -> Heartbeat {
        let first = self.first_retained().0;
        self.make_heartbeat(first)
    }

    /// Earliest seq owed to any reader at `locator`.
    pub(crate) fn start_seq_for(&self, locator: Locator) -> u64 {
        self.readers.values().filter(|p| p.locator == locator).map(|p| p.start_seq).min().unwrap_or(self.next_seq)
    }

    /// Processes an ACKNACK from `reader`.
    ///
    /// Requested seqs still in history are retransmitted. Requests for seqs
    /// that were already evicted are answered with a heartbeat whose
    /// `first_seq` is the oldest retained sample, which makes the reader
    /// skip the unrecoverable gap. A repeat of the previous request inside
    /// half a heartbeat period, or an acknack older than what the reader has
    /// already acknowledged, is ignored.
    pub fn on_acknack(&mut self, reader: Guid, an: &AckNack, now_us: u64) -> AckNackResponse {
        let window_us = u64::from(self.qos.heartbeat_period_ms) * 500;
        let first_retained = self.first_retained().0;
        let next_seq = self.next_seq;
        let Some(proxy) = self.readers.get_mut(&reader) else {
            return AckNackResponse::default();
        };
        let base = an.base_seq.0;
        if base < proxy.acked_below {
            return AckNackResponse::default();
        }
        if let Some((last_base, last_bits, at)) = proxy.last_request {
            if last_base == base && last_bits == an.missing && now_us < at + window_us {
                return AckNackResponse::default();
            }
        }
        proxy.acked_below = base.min(next_seq);
        proxy.last_request = Some((base, an.missing, now_us));

        let mut response = AckNackResponse::default();
        let mut gap = false;
        for seq in an.missing_seqs() {
            if self.samples.contains_key(&seq.0) {
                response.retransmit.push(seq);
            } else if seq.0 < first_retained {
                gap = true;
            }
        }
        if gap {
            log::info!(
                "writer {}: reader {reader} requested evicted samples, advancing to {first_retained}",
                self.guid
            );
            response.heartbeat = Some(self.heartbeat());
        }
        response
    }
}
