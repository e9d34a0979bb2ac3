use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use super::reader::{Delivery, ReaderState};
use super::writer::WriterHistory;
use super::{endpoints_match, ParticipantConfig, PubSubError, Qos, TopicSpec};
use crate::transport::Locator;
use crate::wire::{
    decode_message, fragment_payload, Announce, Data, EndpointInfo, EndpointRole, EntityId, Guid, GuidPrefix,
    Heartbeat, Message, Reliability, SequenceNumber, Submessage,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Destination {
    Unicast(Locator),
    Discovery,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outgoing {
    pub to: Destination,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    Delivered { reader: EntityId, writer: Guid, seq: SequenceNumber, payload: Vec<u8> },
    Matched { local: EntityId, remote: Guid },
    Unmatched { local: EntityId, remote: Guid },
    GapSkipped { reader: EntityId, writer: Guid, first: SequenceNumber, last: SequenceNumber },
    ParticipantDiscovered(GuidPrefix),
    ParticipantLost(GuidPrefix),
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct EngineStats {
    pub samples_written: u64,
    pub data_datagrams: u64,
    pub retransmitted_samples: u64,
    pub heartbeats_sent: u64,
    pub acknacks_sent: u64,
    pub announces_sent: u64,
    pub decode_errors: u64,
    pub fragment_errors: u64,
    pub gaps_skipped: u64,
}

#[derive(Debug, Clone)]
struct RemoteParticipant {
    locator: Locator,
    lease_deadline_us: u64,
    endpoints: Vec<EndpointInfo>,
}

/// Protocol state machine for one participant.
///
/// Feed it datagrams with [`Engine::handle_datagram`] and clock ticks with
/// [`Engine::on_timer`]; collect what it wants to send with
/// [`Engine::drain_outgoing`] and what happened with
/// [`Engine::drain_events`]. All times are microseconds on one monotonic
/// clock chosen by the driver.
#[derive(Debug)]
pub struct Engine {
    prefix: GuidPrefix,
    config: ParticipantConfig,
    next_entity: u32,
    writers: BTreeMap<EntityId, WriterHistory>,
    readers: BTreeMap<EntityId, ReaderState>,
    remotes: BTreeMap<GuidPrefix, RemoteParticipant>,
    next_announce_us: u64,
    outbox: Vec<Outgoing>,
    events: Vec<Event>,
    stats: EngineStats,
}

impl Engine {
    pub fn new(prefix: GuidPrefix, config: ParticipantConfig, now_us: u64) -> Result<Self, PubSubError> {
        config.validate()?;
        Ok(Engine {
            prefix,
            config,
            next_entity: 1,
            writers: BTreeMap::new(),
            readers: BTreeMap::new(),
            remotes: BTreeMap::new(),
            next_announce_us: now_us,
            outbox: Vec::new(),
            events: Vec::new(),
            stats: EngineStats::default(),
        })
    }

    pub fn guid_prefix(&self) -> GuidPrefix {
        self.prefix
    }

    pub fn config(&self) -> &ParticipantConfig {
        &self.config
    }

    pub fn stats(&self) -> EngineStats {
        self.stats
    }

    pub fn drain_outgoing(&mut self) -> Vec<Outgoing> {
        std::mem::take(&mut self.outbox)
    }

    pub fn drain_events(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.events)
    }

    pub fn writer(&self, id: EntityId) -> Option<&WriterHistory> {
        self.writers.get(&id)
    }

    pub fn reader(&self, id: EntityId) -> Option<&ReaderState> {
        self.readers.get(&id)
    }

    pub fn writer_ids(&self) -> Vec<EntityId> {
        self.writers.keys().copied().collect()
    }

    pub fn reader_ids(&self) -> Vec<EntityId> {
        self.readers.keys().copied().collect()
    }

    pub fn remote_participants(&self) -> impl Iterator<Item = &GuidPrefix> {
        self.remotes.keys()
    }

    /// Remote endpoints currently matched with local endpoint `id`.
    pub fn matched_count(&self, id: EntityId) -> usize {
        if let Some(w) = self.writers.get(&id) {
            w.matched_readers().count()
        } else if let Some(r) = self.readers.get(&id) {
            r.matched_writers().count()
        } else {
            0
        }
    }

    fn allocate_entity(&mut self) -> Result<EntityId, PubSubError> {
        let id = EntityId(self.next_entity);
        if !id.is_user() || self.writers.contains_key(&id) || self.readers.contains_key(&id) {
            return Err(PubSubError::DuplicateEntity(id));
        }
        self.next_entity += 1;
        Ok(id)
    }

    pub fn create_writer(&mut self, topic: TopicSpec, qos: Qos, now_us: u64) -> Result<EntityId, PubSubError> {
        topic.validate()?;
        qos.validate()?;
        let id = self.allocate_entity()?;
        self.writers.insert(id, WriterHistory::new(Guid::new(self.prefix, id), topic, qos));
        for prefix in self.remotes.keys().copied().collect::<Vec<_>>() {
            self.rematch(prefix);
        }
        self.next_announce_us = now_us;
        Ok(id)
    }

    pub fn create_reader(&mut self, topic: TopicSpec, qos: Qos, now_us: u64) -> Result<EntityId, PubSubError> {
        topic.validate()?;
        qos.validate()?;
        let id = self.allocate_entity()?;
        let guid = Guid::new(self.prefix, id);
        self.readers.insert(id, ReaderState::new(guid, topic, qos, self.config.max_fragment_buffers));
        for prefix in self.remotes.keys().copied().collect::<Vec<_>>() {
            self.rematch(prefix);
        }
        self.next_announce_us = now_us;
        Ok(id)
    }

    pub fn can_write(&self, writer: EntityId) -> bool {
        self.writers.get(&writer).is_some_and(WriterHistory::can_write)
    }

    /// Publishes one sample to every matched reader.
    pub fn write(&mut self, writer: EntityId, payload: Vec<u8>, now_us: u64) -> Result<SequenceNumber, PubSubError> {
        let frag_size = self.config.frag_size;
        let w = self.writers.get_mut(&writer).ok_or(PubSubError::UnknownEntity(writer))?;
        let payload: Arc<[u8]> = payload.into();
        let seq = w.write(Arc::clone(&payload))?;
        self.stats.samples_written += 1;
        let destinations: BTreeSet<Locator> = w.matched_readers().map(|(_, l, _)| l).collect();
        let reliable = w.qos().reliability == Reliability::Reliable;
        let unacked = w.has_unacknowledged();
        for to in destinations {
            let hb = (reliable && unacked).then(|| {
                let start = w.start_seq_for(to);
                w.heartbeat_from(start)
            });
            let datagrams = encode_sample(self.prefix, writer, seq, &payload, frag_size, hb.clone());
            self.stats.data_datagrams += datagrams.len() as u64;
            if hb.is_some() {
                self.stats.heartbeats_sent += 1;
                w.last_heartbeat_us = Some(now_us);
            }
            self.outbox.extend(datagrams.into_iter().map(|bytes| Outgoing { to: Destination::Unicast(to), bytes }));
        }
        Ok(seq)
    }

    pub fn handle_datagram(&mut self, from: Locator, bytes: &[u8], now_us: u64) {
        let msg = match decode_message(bytes) {
            Ok(m) => m,
            Err(e) => {
                self.stats.decode_errors += 1;
                log::debug!("dropping undecodable datagram from {from}: {e}");
                return;
            }
        };
        if msg.guid_prefix == self.prefix {
            return;
        }
        let src = msg.guid_prefix;
        for sub in msg.submessages {
            match sub {
                Submessage::Announce(a) => self.on_announce(src, from, a, now_us),
                Submessage::Data(d) => {
                    let writer = Guid::new(src, d.writer_id);
                    let ids: Vec<EntityId> = self.readers_matched_to(&writer);
                    let n = ids.len();
                    let mut payload = Some(d.payload);
                    for (i, id) in ids.into_iter().enumerate() {
                        let p = if i + 1 == n {
                            payload.take().unwrap_or_default()
                        } else {
                            payload.clone().unwrap_or_default()
                        };
                        let out = self.readers.get_mut(&id).expect("matched").deliver(writer, d.seq, p);
                        self.push_deliveries(id, out);
                    }
                }
                Submessage::DataFrag(f) => {
                    let writer = Guid::new(src, f.writer_id);
                    for id in self.readers_matched_to(&writer) {
                        match self.readers.get_mut(&id).expect("matched").on_fragment(writer, &f) {
                            Ok(out) => self.push_deliveries(id, out),
                            Err(e) => {
                                self.stats.fragment_errors += 1;
                                log::debug!("fragment from {writer} rejected: {e}");
                            }
                        }
                    }
                }
                Submessage::Heartbeat(hb) => self.on_heartbeat(src, hb),
                Submessage::AckNack(an) => {
                    if an.writer_guid.prefix != self.prefix {
                        continue;
                    }
                    let reader = Guid::new(src, an.reader_id);
                    let Some(w) = self.writers.get_mut(&an.writer_guid.entity_id) else {
                        continue;
                    };
                    let Some(to) = w.readers.get(&reader).map(|p| p.locator) else {
                        continue;
                    };
                    let resp = w.on_acknack(reader, &an, now_us);
                    for seq in resp.retransmit {
                        let payload = Arc::clone(w.sample(seq).expect("retained"));
                        let datagrams = encode_sample(
                            self.prefix,
                            an.writer_guid.entity_id,
                            seq,
                            &payload,
                            self.config.frag_size,
                            None,
                        );
                        self.stats.retransmitted_samples += 1;
                        self.stats.data_datagrams += datagrams.len() as u64;
                        self.outbox.extend(
                            datagrams.into_iter().map(|bytes| Outgoing { to: Destination::Unicast(to), bytes }),
                        );
                    }
                    if let Some(hb) = resp.heartbeat {
                        self.stats.heartbeats_sent += 1;
                        self.send(Destination::Unicast(to), Submessage::Heartbeat(hb));
                    }
                }
            }
        }
    }

    fn readers_matched_to(&self, writer: &Guid) -> Vec<EntityId> {
        self.readers.iter().filter(|(_, r)| r.is_matched(writer)).map(|(&id, _)| id).collect()
    }

    fn push_deliveries(&mut self, reader: EntityId, out: Vec<Delivery>) {
        self.events.extend(out.into_iter().map(|d| Event::Delivered {
            reader,
            writer: d.writer,
            seq: d.seq,
            payload: d.payload,
        }));
    }

    fn on_heartbeat(&mut self, src: GuidPrefix, hb: Heartbeat) {
        let writer = Guid::new(src, hb.writer_id);
        let Some(to) = self.remotes.get(&src).map(|r| r.locator) else {
            return;
        };
        for id in self.readers_matched_to(&writer) {
            let outcome = self.readers.get_mut(&id).expect("matched").on_heartbeat(writer, &hb);
            if let Some((first, last)) = outcome.skipped {
                self.stats.gaps_skipped += 1;
                self.events.push(Event::GapSkipped { reader: id, writer, first, last });
            }
            self.push_deliveries(id, outcome.deliveries);
            if let Some(an) = outcome.acknack {
                self.stats.acknacks_sent += 1;
                self.send(Destination::Unicast(to), Submessage::AckNack(an));
            }
        }
    }

    fn on_announce(&mut self, src: GuidPrefix, from: Locator, a: Announce, now_us: u64) {
        let deadline = now_us + u64::from(a.lease_duration_ms) * 1_000;
        let is_new = !self.remotes.contains_key(&src);
        let remote = self.remotes.entry(src).or_insert(RemoteParticipant {
            locator: from,
            lease_deadline_us: deadline,
            endpoints: Vec::new(),
        });
        remote.locator = from;
        remote.lease_deadline_us = deadline;
        // Endpoint sets only grow while a participant is alive, and announces
        // reach us over two sockets, so a shorter list is a stale copy.
        let mut changed = false;
        for ep in a.endpoints {
            match remote.endpoints.iter_mut().find(|e| e.entity_id == ep.entity_id) {
                Some(known) if *known == ep => {}
                Some(known) => {
                    *known = ep;
                    changed = true;
                }
                None => {
                    remote.endpoints.push(ep);
                    changed = true;
                }
            }
        }
        if is_new {
            log::debug!("participant {} discovered participant {src} at {from}", self.prefix);
            self.events.push(Event::ParticipantDiscovered(src));
            // Let the newcomer learn about us without waiting a full period.
            let announce = self.announce();
            self.stats.announces_sent += 1;
            self.send(Destination::Unicast(from), announce);
        }
        if is_new || changed {
            self.rematch(src);
        }
    }

    fn announce(&self) -> Submessage {
        let mut endpoints = Vec::with_capacity(self.writers.len() + self.readers.len());
        for (&id, w) in &self.writers {
            endpoints.push(EndpointInfo {
                entity_id: id,
                role: EndpointRole::Writer,
                reliability: w.qos().reliability,
                topic_name: w.topic().name.clone(),
                type_name: w.topic().type_name.clone(),
            });
        }
        for (&id, r) in &self.readers {
            endpoints.push(EndpointInfo {
                entity_id: id,
                role: EndpointRole::Reader,
                reliability: r.qos().reliability,
                topic_name: r.topic().name.clone(),
                type_name: r.topic().type_name.clone(),
            });
        }
        Submessage::Announce(Announce { lease_duration_ms: self.config.lease_duration_ms, endpoints })
    }

    /// Recomputes every match between local endpoints and one remote participant.
    fn rematch(&mut self, prefix: GuidPrefix) {
        let (locator, endpoints) = match self.remotes.get(&prefix) {
            Some(r) => (r.locator, r.endpoints.clone()),
            None => (Locator::new(std::net::Ipv4Addr::UNSPECIFIED, 0), Vec::new()),
        };
        for (&id, w) in self.writers.iter_mut() {
            let wanted: BTreeMap<Guid, Reliability> = endpoints
                .iter()
                .filter(|ep| ep.role == EndpointRole::Reader)
                .filter(|ep| {
                    let topic = TopicSpec::new(ep.topic_name.clone(), ep.type_name.clone());
                    endpoints_match((w.topic(), w.qos().reliability), (&topic, ep.reliability))
                })
                .map(|ep| (Guid::new(prefix, ep.entity_id), ep.reliability))
                .collect();
            let current: Vec<Guid> = w.matched_readers().map(|(g, _, _)| *g).filter(|g| g.prefix == prefix).collect();
            for g in current {
                if !wanted.contains_key(&g) {
                    w.remove_reader(&g);
                    self.events.push(Event::Unmatched { local: id, remote: g });
                }
            }
            for (g, rel) in wanted {
                if let Some(p) = w.readers.get_mut(&g) {
                    p.locator = locator;
                } else {
                    w.add_reader(g, locator, rel);
                    self.events.push(Event::Matched { local: id, remote: g });
                }
            }
        }
        for (&id, r) in self.readers.iter_mut() {
            let wanted: BTreeSet<Guid> = endpoints
                .iter()
                .filter(|ep| ep.role == EndpointRole::Writer)
                .filter(|ep| {
                    let topic = TopicSpec::new(ep.topic_name.clone(), ep.type_name.clone());
                    endpoints_match((&topic, ep.reliability), (r.topic(), r.qos().reliability))
                })
                .map(|ep| Guid::new(prefix, ep.entity_id))
                .collect();
            let current: Vec<Guid> = r.matched_writers().filter(|g| g.prefix == prefix).copied().collect();
            for g in current {
                if !wanted.contains(&g) {
                    r.unmatch_writer(&g);
                    self.events.push(Event::Unmatched { local: id, remote: g });
                }
            }
            for g in wanted {
                if !r.is_matched(&g) {
                    r.match_writer(g);
                    self.events.push(Event::Matched { local: id, remote: g });
                }
            }
        }
    }

    /// Runs everything that is due: announcements, lease expiry, heartbeats.
    pub fn on_timer(&mut self, now_us: u64) {
        if now_us >= self.next_announce_us {
            let announce = self.announce();
            self.stats.announces_sent += 1;
            self.send(Destination::Discovery, announce);
            self.next_announce_us = now_us + u64::from(self.config.announce_period_ms) * 1_000;
        }

        let expired: Vec<GuidPrefix> =
            self.remotes.iter().filter(|(_, r)| r.lease_deadline_us < now_us).map(|(&p, _)| p).collect();
        for prefix in expired {
            log::info!("participant {}: lease of {prefix} expired", self.prefix);
            self.remotes.remove(&prefix);
            self.rematch(prefix);
            self.events.push(Event::ParticipantLost(prefix));
        }

        let ids: Vec<EntityId> = self.writers.keys().copied().collect();
        for id in ids {
            let w = self.writers.get_mut(&id).expect("present");
            if !w.has_unacknowledged() {
                continue;
            }
            let period = u64::from(w.qos().heartbeat_period_ms) * 1_000;
            if w.last_heartbeat_us.is_some_and(|t| now_us < t + period) {
                continue;
            }
            let next_seq = w.next_seq().0;
            let targets: BTreeSet<Locator> = w
                .readers
                .values()
                .filter(|p| p.reliability == Reliability::Reliable && p.acked_below < next_seq)
                .map(|p| p.locator)
                .collect();
            let mut beats = Vec::new();
            for to in targets {
                let start = w.start_seq_for(to);
                beats.push((to, w.heartbeat_from(start)));
            }
            w.last_heartbeat_us = Some(now_us);
            for (to, hb) in beats {
                self.stats.heartbeats_sent += 1;
                self.send(Destination::Unicast(to), Submessage::Heartbeat(hb));
            }
        }
    }

    /// Earliest time at which [`Engine::on_timer`] has work to do.
    pub fn next_deadline_us(&self) -> u64 {
        let mut next = self.next_announce_us;
        for r in self.remotes.values() {
            next = next.min(r.lease_deadline_us + 1);
        }
        for w in self.writers.values() {
            if w.has_unacknowledged() {
                let period = u64::from(w.qos().heartbeat_period_ms) * 1_000;
                next = next.min(w.last_heartbeat_us.map_or(0, |t| t + period));
            }
        }
        next
    }

    fn send(&mut self, to: Destination, sub: Submessage) {
        match Message::with(self.prefix, sub).encode() {
            Ok(bytes) => self.outbox.push(Outgoing { to, bytes }),
            Err(e) => log::error!("failed to encode outgoing message: {e}"),
        }
    }
}

/// Builds the datagrams for one sample: a single DATA or a DATA_FRAG
/// train, with an optional heartbeat riding on the last datagram.
fn encode_sample(
    prefix: GuidPrefix,
    writer_id: EntityId,
    seq: SequenceNumber,
    payload: &[u8],
    frag_size: usize,
    heartbeat: Option<Heartbeat>,
) -> Vec<Vec<u8>> {
    let mut messages: Vec<Message> = if payload.len() <= frag_size {
        vec![Message::with(prefix, Submessage::Data(Data { writer_id, seq, payload: payload.to_vec() }))]
    } else {
        fragment_payload(writer_id, seq, payload, frag_size)
            .expect("non-empty payload and positive frag_size")
            .into_iter()
            .map(|f| Message::with(prefix, Submessage::DataFrag(f)))
            .collect()
    };
    if let (Some(hb), Some(last)) = (heartbeat, messages.last_mut()) {
        last.submessages.push(Submessage::Heartbeat(hb));
    }
    messages.iter().map(|m| m.encode().expect("frag_size validated against the datagram ceiling")).collect()
}
