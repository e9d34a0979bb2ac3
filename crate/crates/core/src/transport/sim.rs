//! In-process datagram bus with seeded fault injection.
//!
//! The bus runs on one of two clocks. A real clock lets [`SimTransport`]
//! stand in for UDP inside a live process (blocking `receive`, wall-clock
//! delays). A manual clock turns the bus into a discrete-event network: the
//! owner advances time explicitly and polls ready datagrams, which makes
//! whole protocol runs reproducible and fast.
//!
//! Multicast groups are modeled as a broadcast to every joined endpoint
//! except the sender. Each delivered copy consumes one fault decision, in
//! send order and then recipient order.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::net::Ipv4Addr;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use super::{check_size, FaultInjector, FaultProfile, Locator, Transport, TransportError};

#[derive(Debug)]
enum Clock {
    Real(Instant),
    Manual(u64),
}

#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Queued {
    deliver_at_us: u64,
    order: u64,
    from: Locator,
    bytes: Vec<u8>,
}

#[derive(Debug)]
struct Held {
    to: Locator,
    queued: Queued,
}

/// One record per attempted delivery, kept when tracing is enabled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub index: u64,
    pub from: Locator,
    pub to: Locator,
    pub delivered: bool,
    pub deliver_at_us: u64,
    pub reordered: bool,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct BusStats {
    pub attempted: u64,
    pub dropped: u64,
    pub reordered: u64,
}

#[derive(Debug)]
struct BusState {
    clock: Clock,
    injector: FaultInjector,
    queues: BTreeMap<Locator, BinaryHeap<Reverse<Queued>>>,
    groups: BTreeMap<Locator, BTreeSet<Locator>>,
    held: Option<Held>,
    next_port: u16,
    order: u64,
    stats: BusStats,
    trace: Option<Vec<TraceEntry>>,
}

impl BusState {
    fn now_us(&self) -> u64 {
        match self.clock {
            Clock::Real(epoch) => epoch.elapsed().as_micros() as u64,
            Clock::Manual(t) => t,
        }
    }

    fn enqueue(&mut self, to: Locator, queued: Queued) {
        if let Some(q) = self.queues.get_mut(&to) {
            q.push(Reverse(queued));
        }
    }

    fn deliver_copy(&mut self, from: Locator, to: Locator, bytes: Vec<u8>) {
        let now = self.now_us();
        let decision = self.injector.decide();
        let index = self.stats.attempted;
        self.stats.attempted += 1;
        let deliver_at_us = now + u64::from(decision.delay_ms) * 1_000;
        let reordered = !decision.drop && decision.reorder && self.held.is_none();
        if let Some(trace) = &mut self.trace {
            trace.push(TraceEntry { index, from, to, delivered: !decision.drop, deliver_at_us, reordered });
        }
        let release = self.held.take();
        if decision.drop {
            self.stats.dropped += 1;
        } else {
            self.order += 1;
            let queued = Queued { deliver_at_us, order: self.order, from, bytes };
            if reordered {
                self.stats.reordered += 1;
                self.held = Some(Held { to, queued });
            } else {
                self.enqueue(to, queued);
            }
        }
        if let Some(mut held) = release {
            // The held datagram goes out right behind this one.
            self.order += 1;
            held.queued.order = self.order;
            held.queued.deliver_at_us = held.queued.deliver_at_us.max(deliver_at_us);
            self.enqueue(held.to, held.queued);
        }
    }

    fn flush_held(&mut self) {
        if let Some(mut held) = self.held.take() {
            self.order += 1;
            held.queued.order = self.order;
            self.enqueue(held.to, held.queued);
        }
    }

    fn pop_ready(&mut self, at: Locator) -> Option<(Locator, Vec<u8>)> {
        let now = self.now_us();
        let q = self.queues.get_mut(&at)?;
        match q.peek() {
            Some(Reverse(top)) if top.deliver_at_us <= now => {
                let Reverse(item) = q.pop().expect("peeked");
                Some((item.from, item.bytes))
            }
            _ => None,
        }
    }
}

/// Shared in-process network. Create endpoints with [`SimBus::endpoint`].
#[derive(Debug)]
pub struct SimBus {
    state: Mutex<BusState>,
    cond: Condvar,
}

impl SimBus {
    fn with_clock(profile: FaultProfile, clock: Clock) -> Result<Arc<Self>, TransportError> {
        Ok(Arc::new(SimBus {
            state: Mutex::new(BusState {
                clock,
                injector: FaultInjector::new(profile)?,
                queues: BTreeMap::new(),
                groups: BTreeMap::new(),
                held: None,
                next_port: 10_000,
                order: 0,
                stats: BusStats::default(),
                trace: None,
            }),
            cond: Condvar::new(),
        }))
    }

    /// A bus whose delays elapse in wall-clock time.
    pub fn realtime(profile: FaultProfile) -> Result<Arc<Self>, TransportError> {
        Self::with_clock(profile, Clock::Real(Instant::now()))
    }

    /// A bus whose clock only moves through [`SimBus::advance_to`].
    pub fn manual(profile: FaultProfile) -> Result<Arc<Self>, TransportError> {
        Self::with_clock(profile, Clock::Manual(0))
    }

    fn lock(&self) -> MutexGuard<'_, BusState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Registers a new endpoint on 127.0.0.1 with a fresh port.
    pub fn endpoint(self: &Arc<Self>) -> SimTransport {
        let mut st = self.lock();
        let port = st.next_port;
        st.next_port = st.next_port.wrapping_add(1);
        let locator = Locator::new(Ipv4Addr::LOCALHOST, port);
        st.queues.insert(locator, BinaryHeap::new());
        SimTransport { bus: Arc::clone(self), locator }
    }

    pub fn enable_trace(&self) {
        self.lock().trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> Vec<TraceEntry> {
        self.lock().trace.clone().unwrap_or_default()
    }

    pub fn stats(&self) -> BusStats {
        self.lock().stats
    }

    pub fn now_us(&self) -> u64 {
        self.lock().now_us()
    }

    /// Moves a manual clock forward. Has no effect on a real-time bus.
    pub fn advance_to(&self, t_us: u64) {
        let mut st = self.lock();
        if let Clock::Manual(now) = &mut st.clock {
            *now = (*now).max(t_us);
        }
        drop(st);
        self.cond.notify_all();
    }

    /// Earliest pending delivery time across all endpoints.
    pub fn next_delivery_us(&self) -> Option<u64> {
        let st = self.lock();
        st.queues.values().filter_map(|q| q.peek().map(|Reverse(item)| item.deliver_at_us)).min()
    }

    pub fn has_held(&self) -> bool {
        self.lock().held.is_some()
    }

    /// Releases a datagram held back for reordering with no successor yet.
    pub fn flush_held(&self) {
        self.lock().flush_held();
        self.cond.notify_all();
    }

    fn send_from(&self, from: Locator, to: Locator, datagram: &[u8]) {
        let mut st = self.lock();
        if to.is_multicast() {
            let members: Vec<Locator> =
                st.groups.get(&to).map(|m| m.iter().copied().filter(|&l| l != from).collect()).unwrap_or_default();
            for member in members {
                st.deliver_copy(from, member, datagram.to_vec());
            }
        } else {
            st.deliver_copy(from, to, datagram.to_vec());
        }
        drop(st);
        self.cond.notify_all();
    }
}

/// One endpoint on a [`SimBus`].
#[derive(Debug)]
pub struct SimTransport {
    bus: Arc<SimBus>,
    locator: Locator,
}

impl SimTransport {
    pub fn bus(&self) -> &Arc<SimBus> {
        &self.bus
    }

    /// Non-blocking receive of a datagram whose delivery time has passed.
    pub fn try_receive(&self) -> Option<(Locator, Vec<u8>)> {
        self.bus.lock().pop_ready(self.locator)
    }
}

impl Transport for SimTransport {
    fn local_locator(&self) -> Locator {
        self.locator
    }

    fn send(&self, to: Locator, datagram: &[u8]) -> Result<(), TransportError> {
        check_size(datagram)?;
        self.bus.send_from(self.locator, to, datagram);
        Ok(())
    }

    fn receive(&self, timeout: Duration) -> Result<(Locator, Vec<u8>), TransportError> {
        let mut st = self.bus.lock();
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(item) = st.pop_ready(self.locator) {
                return Ok(item);
            }
            if !st.queues.contains_key(&self.locator) {
                return Err(TransportError::Closed);
            }
            let wall_now = Instant::now();
            if wall_now >= deadline {
                return Err(TransportError::TimedOut);
            }
            let mut wait = deadline - wall_now;
            match st.clock {
                Clock::Real(_) => {
                    let now = st.now_us();
                    if let Some(Reverse(top)) = st.queues.get(&self.locator).and_then(|q| q.peek()) {
                        let until = Duration::from_micros(top.deliver_at_us.saturating_sub(now));
                        wait = wait.min(until.max(Duration::from_micros(50)));
                    }
                }
                // Virtual time never advances by waiting.
                Clock::Manual(_) => return Err(TransportError::TimedOut),
            }
            st = self.bus.cond.wait_timeout(st, wait).unwrap_or_else(|e| e.into_inner()).0;
        }
    }

    fn join_discovery_group(&self, group: Locator) -> Result<(), TransportError> {
        if !group.is_multicast() {
            return Err(TransportError::NotMulticast(group));
        }
        self.bus.lock().groups.entry(group).or_default().insert(self.locator);
        Ok(())
    }
}

impl Drop for SimTransport {
    fn drop(&mut self) {
        let mut st = self.bus.lock();
        st.queues.remove(&self.locator);
        for members in st.groups.values_mut() {
            members.remove(&self.locator);
        }
        drop(st);
        self.bus.cond.notify_all();
    }
}
