use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{select, Receiver, RecvTimeoutError, Sender};

use super::engine::{Destination, Engine, EngineStats, Event};
use super::{ParticipantConfig, PubSubError, Qos, TopicSpec};
use crate::transport::{Locator, Transport, TransportError};
use crate::wire::{EntityId, Guid, GuidPrefix, SequenceNumber};

const MAX_IDLE_WAIT: Duration = Duration::from_millis(100);

/// One delivered application sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub writer: Guid,
    pub seq: SequenceNumber,
    pub payload: Vec<u8>,
}

type Reply<T> = Sender<Result<T, PubSubError>>;

enum Command {
    CreateWriter { topic: TopicSpec, qos: Qos, reply: Reply<EntityId> },
    CreateReader { topic: TopicSpec, qos: Qos, sink: Sender<Sample>, reply: Reply<EntityId> },
    Write { writer: EntityId, payload: Vec<u8>, reply: Reply<SequenceNumber> },
    Shutdown,
}

#[derive(Debug, Default)]
struct Status {
    matched: BTreeMap<EntityId, usize>,
    unacknowledged: BTreeMap<EntityId, bool>,
    stats: EngineStats,
    running: bool,
}

#[derive(Debug, Default)]
struct Shared {
    status: Mutex<Status>,
    changed: Condvar,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Status> {
        self.status.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn wait_until(&self, timeout: Duration, mut done: impl FnMut(&Status) -> bool) -> bool {
        let deadline = Instant::now() + timeout;
        let mut st = self.lock();
        loop {
            if done(&st) {
                return true;
            }
            let now = Instant::now();
            if now >= deadline || !st.running {
                return done(&st);
            }
            st = self.changed.wait_timeout(st, deadline - now).unwrap_or_else(|e| e.into_inner()).0;
        }
    }
}

/// A participant whose protocol engine runs on a dedicated thread.
///
/// Inbound datagrams, timers and application commands are all processed
/// serially on that thread. Writes from any application thread are
/// queued to it; each reader's samples arrive in order on its own channel.
pub struct Participant {
    prefix: GuidPrefix,
    config: ParticipantConfig,
    local: Locator,
    cmd_tx: Sender<Command>,
    shared: Arc<Shared>,
    stop: Arc<AtomicBool>,
    threads: Vec<thread::JoinHandle<()>>,
}

impl Participant {
    pub fn new(transport: Arc<dyn Transport>, config: ParticipantConfig) -> Result<Self, PubSubError> {
        Self::with_prefix(transport, config, GuidPrefix::random())
    }

    pub fn with_prefix(
        transport: Arc<dyn Transport>,
        config: ParticipantConfig,
        prefix: GuidPrefix,
    ) -> Result<Self, PubSubError> {
        config.validate()?;
        transport.join_discovery_group(config.discovery_group)?;
        let started = Instant::now();
        let engine = Engine::new(prefix, config.clone(), 0)?;
        let (cmd_tx, cmd_rx) = crossbeam_channel::unbounded();
        let (net_tx, net_rx) = crossbeam_channel::unbounded();
        let shared = Arc::new(Shared::default());
        shared.lock().running = true;
        let stop = Arc::new(AtomicBool::new(false));

        let pump = {
            let transport = Arc::clone(&transport);
            let stop = Arc::clone(&stop);
            thread::Builder::new()
                .name("meddds-recv".into())
                .spawn(move || receive_pump(transport, net_tx, stop))
                .map_err(|e| TransportError::NetworkUnavailable(e.to_string()))?
        };
        let local = transport.local_locator();
        let protocol = {
            let shared = Arc::clone(&shared);
            let group = config.discovery_group;
            let block = config.block_on_full_history;
            thread::Builder::new()
                .name("meddds-protocol".into())
                .spawn(move || {
                    ProtocolLoop {
                        engine,
                        transport,
                        group,
                        block_on_full: block,
                        started,
                        sinks: BTreeMap::new(),
                        blocked: BTreeMap::new(),
                        shared,
                    }
                    .run(cmd_rx, net_rx)
                })
                .map_err(|e| TransportError::NetworkUnavailable(e.to_string()))?
        };
        Ok(Participant { prefix, config, local, cmd_tx, shared, stop, threads: vec![protocol, pump] })
    }

    pub fn guid_prefix(&self) -> GuidPrefix {
        self.prefix
    }

    pub fn config(&self) -> &ParticipantConfig {
        &self.config
    }

    pub fn local_locator(&self) -> Locator {
        self.local
    }

    fn request<T>(&self, make: impl FnOnce(Reply<T>) -> Command) -> Result<T, PubSubError> {
        let (tx, rx) = crossbeam_channel::bounded(1);
        self.cmd_tx.send(make(tx)).map_err(|_| PubSubError::Closed)?;
        rx.recv().map_err(|_| PubSubError::Closed)?
    }

    pub fn create_writer(&self, topic: TopicSpec, qos: Qos) -> Result<Writer, PubSubError> {
        let id = self.request(|reply| Command::CreateWriter { topic, qos, reply })?;
        Ok(Writer { id, prefix: self.prefix, cmd_tx: self.cmd_tx.clone(), shared: Arc::clone(&self.shared) })
    }

    pub fn create_reader(&self, topic: TopicSpec, qos: Qos) -> Result<Reader, PubSubError> {
        let (sink, rx) = crossbeam_channel::unbounded();
        let id = self.request(|reply| Command::CreateReader { topic, qos, sink, reply })?;
        Ok(Reader { id, prefix: self.prefix, rx, shared: Arc::clone(&self.shared) })
    }

    /// Creates a reader whose samples are handed to `on_sample`, one at a
    /// time and in delivery order, on a dedicated dispatch thread.
    pub fn create_reader_with_callback<F>(
        &self,
        topic: TopicSpec,
        qos: Qos,
        mut on_sample: F,
    ) -> Result<EntityId, PubSubError>
    where
        F: FnMut(Sample) + Send + 'static,
    {
        let reader = self.create_reader(topic, qos)?;
        let id = reader.id;
        thread::Builder::new()
            .name("meddds-dispatch".into())
            .spawn(move || {
                while let Ok(sample) = reader.rx.recv() {
                    on_sample(sample);
                }
            })
            .map_err(|e| TransportError::NetworkUnavailable(e.to_string()))?;
        Ok(id)
    }

    pub fn stats(&self) -> EngineStats {
        self.shared.lock().stats
    }

    pub fn matched_count(&self, entity: EntityId) -> usize {
        self.shared.lock().matched.get(&entity).copied().unwrap_or(0)
    }

    fn stop(&mut self) {
        let _ = self.cmd_tx.send(Command::Shutdown);
        self.stop.store(true, Ordering::Relaxed);
        for handle in self.threads.drain(..) {
            let _ = handle.join();
        }
    }
}

impl Drop for Participant {
    fn drop(&mut self) {
        self.stop();
    }
}

#[derive(Clone)]
pub struct Writer {
    id: EntityId,
    prefix: GuidPrefix,
    cmd_tx: Sender<Command>,
    shared: Arc<Shared>,
}

impl Writer {
    pub fn id(&self) -> EntityId {
        self.id
    }

    pub fn guid(&self) -> Guid {
        Guid::new(self.prefix, self.id)
    }

    /// Publishes one sample. With `block_on_full_history` this waits until
    /// the history has room.
    pub fn write(&self, payload: Vec<u8>) -> Result<SequenceNumber, PubSubError> {
        let (tx, rx) = crossbeam_channel::bounded(1);
        self.cmd_tx.send(Command::Write { writer: self.id, payload, reply: tx }).map_err(|_| PubSubError::Closed)?;
        rx.recv().map_err(|_| PubSubError::Closed)?
    }

    pub fn matched_count(&self) -> usize {
        self.shared.lock().matched.get(&self.id).copied().unwrap_or(0)
    }

    pub fn wait_for_matched(&self, n: usize, timeout: Duration) -> bool {
        let id = self.id;
        self.shared.wait_until(timeout, |st| st.matched.get(&id).copied().unwrap_or(0) >= n)
    }

    /// Waits until every reliable matched reader acknowledged every sample.
    pub fn wait_for_acknowledgments(&self, timeout: Duration) -> bool {
        let id = self.id;
        self.shared.wait_until(timeout, |st| !st.unacknowledged.get(&id).copied().unwrap_or(false))
    }
}

pub struct Reader {
    id: EntityId,
    prefix: GuidPrefix,
    rx: Receiver<Sample>,
    shared: Arc<Shared>,
}

impl Reader {
    pub fn id(&self) -> EntityId {
        self.id
    }

    pub fn guid(&self) -> Guid {
        Guid::new(self.prefix, self.id)
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Result<Sample, PubSubError> {
        match self.rx.recv_timeout(timeout) {
            Ok(s) => Ok(s),
            Err(RecvTimeoutError::Timeout) => Err(PubSubError::Timeout),
            Err(RecvTimeoutError::Disconnected) => Err(PubSubError::Closed),
        }
    }

    pub fn try_recv(&self) -> Option<Sample> {
        self.rx.try_recv().ok()
    }

    pub fn matched_count(&self) -> usize {
        self.shared.lock().matched.get(&self.id).copied().unwrap_or(0)
    }

    pub fn wait_for_matched(&self, n: usize, timeout: Duration) -> bool {
        let id = self.id;
        self.shared.wait_until(timeout, |st| st.matched.get(&id).copied().unwrap_or(0) >= n)
    }
}

fn receive_pump(transport: Arc<dyn Transport>, net_tx: Sender<(Locator, Vec<u8>)>, stop: Arc<AtomicBool>) {
    while !stop.load(Ordering::Relaxed) {
        match transport.receive(MAX_IDLE_WAIT) {
            Ok(datagram) => {
                if net_tx.send(datagram).is_err() {
                    return;
                }
            }
            Err(TransportError::TimedOut) => {}
            Err(TransportError::Closed) => return,
            Err(e) => {
                log::warn!("receive failed: {e}");
                thread::sleep(Duration::from_millis(10));
            }
        }
    }
}

type PendingWrite = (Vec<u8>, Reply<SequenceNumber>);

struct ProtocolLoop {
    engine: Engine,
    transport: Arc<dyn Transport>,
    group: Locator,
    block_on_full: bool,
    started: Instant,
    sinks: BTreeMap<EntityId, Sender<Sample>>,
    blocked: BTreeMap<EntityId, VecDeque<PendingWrite>>,
    shared: Arc<Shared>,
}

impl ProtocolLoop {
    fn now_us(&self) -> u64 {
        self.started.elapsed().as_micros() as u64
    }

    fn run(mut self, cmd_rx: Receiver<Command>, net_rx: Receiver<(Locator, Vec<u8>)>) {
        let now = self.now_us();
        self.engine.on_timer(now);
        loop {
            self.flush();
            let now = self.now_us();
            let wait = Duration::from_micros(self.engine.next_deadline_us().saturating_sub(now)).min(MAX_IDLE_WAIT);
            select! {
                recv(cmd_rx) -> cmd => match cmd {
                    Ok(Command::Shutdown) | Err(_) => break,
                    Ok(cmd) => self.on_command(cmd),
                },
                recv(net_rx) -> datagram => match datagram {
                    Ok((from, bytes)) => {
                        let now = self.now_us();
                        self.engine.handle_datagram(from, &bytes, now);
                        for (from, bytes) in net_rx.try_iter().take(256) {
                            self.engine.handle_datagram(from, &bytes, now);
                        }
                    }
                    Err(_) => break,
                },
                default(wait) => {}
            }
            let now = self.now_us();
            self.engine.on_timer(now);
        }
        self.flush();
        let mut st = self.shared.lock();
        st.running = false;
        drop(st);
        self.shared.changed.notify_all();
    }

    fn on_command(&mut self, cmd: Command) {
        let now = self.now_us();
        match cmd {
            Command::CreateWriter { topic, qos, reply } => {
                let _ = reply.send(self.engine.create_writer(topic, qos, now));
            }
            Command::CreateReader { topic, qos, sink, reply } => {
                let result = self.engine.create_reader(topic, qos, now);
                if let Ok(id) = result {
                    self.sinks.insert(id, sink);
                }
                let _ = reply.send(result);
            }
            Command::Write { writer, payload, reply } => {
                let queue = self.blocked.entry(writer).or_default();
                if !queue.is_empty() {
                    queue.push_back((payload, reply));
                    return;
                }
                if self.block_on_full && self.engine.writer(writer).is_some() && !self.engine.can_write(writer) {
                    queue.push_back((payload, reply));
                    return;
                }
                let _ = reply.send(self.engine.write(writer, payload, now));
            }
            Command::Shutdown => {}
        }
    }

    fn retry_blocked(&mut self) {
        let now = self.now_us();
        for (&writer, queue) in self.blocked.iter_mut() {
            while !queue.is_empty() && self.engine.can_write(writer) {
                let (payload, reply) = queue.pop_front().expect("non-empty");
                let _ = reply.send(self.engine.write(writer, payload, now));
            }
        }
    }

    fn flush(&mut self) {
        self.retry_blocked();
        for out in self.engine.drain_outgoing() {
            let to = match out.to {
                Destination::Unicast(l) => l,
                Destination::Discovery => self.group,
            };
            if let Err(e) = self.transport.send(to, &out.bytes) {
                log::debug!("send to {to} failed: {e}");
            }
        }
        for event in self.engine.drain_events() {
            match event {
                Event::Delivered { reader, writer, seq, payload } => {
                    if let Some(sink) = self.sinks.get(&reader) {
                        let _ = sink.send(Sample { writer, seq, payload });
                    }
                }
                Event::GapSkipped { reader, writer, first, last } => {
                    log::warn!("reader {reader:?} skipped {first}..={last} from {writer}");
                }
                other => log::debug!("{other:?}"),
            }
        }
        let mut st = self.shared.lock();
        st.stats = self.engine.stats();
        st.matched.clear();
        st.unacknowledged.clear();
        for id in self.engine.reader_ids() {
            st.matched.insert(id, self.engine.matched_count(id));
        }
        for id in self.engine.writer_ids() {
            st.matched.insert(id, self.engine.matched_count(id));
            let waiting = self.blocked.get(&id).is_some_and(|q| !q.is_empty());
            let unacked = self.engine.writer(id).is_some_and(|w| w.has_unacknowledged());
            st.unacknowledged.insert(id, waiting || unacked);
        }
        drop(st);
        self.shared.changed.notify_all();
    }
}
