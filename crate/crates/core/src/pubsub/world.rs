use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::engine::{Destination, Engine, Event};
use super::{ParticipantConfig, PubSubError, Qos, TopicSpec};
use crate::transport::{FaultProfile, SimBus, SimTransport, Transport};
use crate::wire::{EntityId, GuidPrefix, SequenceNumber};

/// Index of a participant inside a [`SimWorld`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug)]
struct Node {
    engine: Engine,
    transport: SimTransport,
    events: Vec<Event>,
    stopped: bool,
}

/// Several engines driven through virtual time over one manual-clock bus.
///
/// Everything is single-threaded and seeded, so a run is a pure function
/// of the fault profile and the sequence of calls.
#[derive(Debug)]
pub struct SimWorld {
    bus: Arc<SimBus>,
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
}

const MAX_ROUNDS_PER_INSTANT: usize = 10_000;

impl SimWorld {
    pub fn new(profile: FaultProfile) -> Result<Self, PubSubError> {
        let seed = profile.seed;
        let bus = SimBus::manual(profile)?;
        Ok(SimWorld { bus, nodes: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed0f_9a1d) })
    }

    pub fn bus(&self) -> &Arc<SimBus> {
        &self.bus
    }

    pub fn now_us(&self) -> u64 {
        self.bus.now_us()
    }

    pub fn add_participant(&mut self, config: ParticipantConfig) -> Result<NodeId, PubSubError> {
        let transport = self.bus.endpoint();
        transport.join_discovery_group(config.discovery_group)?;
        let prefix = GuidPrefix::from_rng(&mut self.rng);
        let engine = Engine::new(prefix, config, self.now_us())?;
        self.nodes.push(Node { engine, transport, events: Vec::new(), stopped: false });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn engine(&self, id: NodeId) -> &Engine {
        &self.nodes[id.0].engine
    }

    pub fn engine_mut(&mut self, id: NodeId) -> &mut Engine {
        &mut self.nodes[id.0].engine
    }

    pub fn create_writer(&mut self, id: NodeId, topic: TopicSpec, qos: Qos) -> Result<EntityId, PubSubError> {
        let now = self.now_us();
        self.nodes[id.0].engine.create_writer(topic, qos, now)
    }

    pub fn create_reader(&mut self, id: NodeId, topic: TopicSpec, qos: Qos) -> Result<EntityId, PubSubError> {
        let now = self.now_us();
        self.nodes[id.0].engine.create_reader(topic, qos, now)
    }

    pub fn write(&mut self, id: NodeId, writer: EntityId, payload: Vec<u8>) -> Result<SequenceNumber, PubSubError> {
        let now = self.now_us();
        let seq = self.nodes[id.0].engine.write(writer, payload, now)?;
        self.flush(id.0);
        Ok(seq)
    }

    /// Silences a participant: from now on it neither sends nor processes
    /// anything, as if its process had died.
    pub fn stop_participant(&mut self, id: NodeId) {
        self.nodes[id.0].stopped = true;
    }

    /// Events collected for `id` since the last call.
    pub fn take_events(&mut self, id: NodeId) -> Vec<Event> {
        std::mem::take(&mut self.nodes[id.0].events)
    }

    fn flush(&mut self, idx: usize) {
        let node = &mut self.nodes[idx];
        let group = node.engine.config().discovery_group;
        for out in node.engine.drain_outgoing() {
            let to = match out.to {
                Destination::Unicast(l) => l,
                Destination::Discovery => group,
            };
            if let Err(e) = node.transport.send(to, &out.bytes) {
                log::debug!("sim send to {to} failed: {e}");
            }
        }
        node.events.extend(node.engine.drain_events());
    }

    /// Processes everything due at the current instant, then advances the
    /// clock to the next delivery or timer deadline. Returns the new time.
    pub fn step(&mut self) -> u64 {
        let now = self.now_us();
        for _ in 0..MAX_ROUNDS_PER_INSTANT {
            let mut progressed = false;
            for idx in 0..self.nodes.len() {
                if self.nodes[idx].stopped {
                    while self.nodes[idx].transport.try_receive().is_some() {}
                    continue;
                }
                self.flush(idx);
                let node = &mut self.nodes[idx];
                while let Some((from, bytes)) = node.transport.try_receive() {
                    node.engine.handle_datagram(from, &bytes, now);
                    progressed = true;
                }
                node.engine.on_timer(now);
                self.flush(idx);
            }
            if !progressed {
                break;
            }
        }
        let mut next =
            self.nodes.iter().filter(|n| !n.stopped).map(|n| n.engine.next_deadline_us()).min().unwrap_or(u64::MAX);
        if let Some(t) = self.bus.next_delivery_us() {
            next = next.min(t);
        }
        let next = next.max(now + 1);
        if next != u64::MAX {
            self.bus.advance_to(next);
        }
        self.now_us()
    }

    /// Steps until `done` holds or the clock passes `deadline_us`.
    pub fn run_until(&mut self, deadline_us: u64, mut done: impl FnMut(&mut SimWorld) -> bool) -> bool {
        loop {
            if done(self) {
                return true;
            }
            if self.now_us() >= deadline_us {
                return false;
            }
            self.step();
        }
    }

    /// Steps for `duration_us` of virtual time.
    pub fn run_for(&mut self, duration_us: u64) {
        let deadline = self.now_us() + duration_us;
        self.run_until(deadline, |_| false);
    }
}
