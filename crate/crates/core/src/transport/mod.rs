//! Datagram transports.
//!
//! Everything above this layer talks to a [`Transport`]: a UDP
//! implementation for real deployments and an in-process [`sim::SimBus`]
//! with seeded fault injection for tests and single-process benchmarks.
//! Delivery is never guaranteed here; reliability lives in `pubsub`.

use std::fmt;
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::wire::MAX_MESSAGE_LEN;

mod fault;
pub mod sim;
pub mod udp;

pub use fault::{FaultDecision, FaultInjector, FaultProfile};
pub use sim::{SimBus, SimTransport};
pub use udp::{UdpConfig, UdpTransport};

/// Default multicast group and port for discovery announcements.
pub const DEFAULT_DISCOVERY_GROUP: Locator = Locator::new(Ipv4Addr::new(239, 255, 0, 7), 7400);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("datagram of {size} bytes exceeds {MAX_MESSAGE_LEN}")]
    TooLarge { size: usize },
    #[error("network unavailable: {0}")]
    NetworkUnavailable(String),
    #[error("timed out waiting for a datagram")]
    TimedOut,
    #[error("{0} is not a multicast address")]
    NotMulticast(Locator),
    #[error("invalid fault profile: {0}")]
    InvalidProfile(&'static str),
    #[error("transport closed")]
    Closed,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct Locator {
    pub address: Ipv4Addr,
    pub port: u16,
}

impl Locator {
    pub const fn new(address: Ipv4Addr, port: u16) -> Self {
        Locator { address, port }
    }

    pub fn is_multicast(&self) -> bool {
        self.address.is_multicast()
    }

    pub fn socket_addr(&self) -> SocketAddr {
        SocketAddr::V4(SocketAddrV4::new(self.address, self.port))
    }
}

impl From<SocketAddrV4> for Locator {
    fn from(a: SocketAddrV4) -> Self {
        Locator::new(*a.ip(), a.port())
    }
}

impl fmt::Display for Locator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.address, self.port)
    }
}

impl FromStr for Locator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let addr: SocketAddrV4 = s.parse().map_err(|e| format!("invalid locator {s:?}: {e}"))?;
        Ok(addr.into())
    }
}

/// A bound datagram endpoint.
///
/// `send` may be called from several threads at once; `receive` is meant
/// for a single receiving context.
pub trait Transport: Send + Sync {
    fn local_locator(&self) -> Locator;

    fn send(&self, to: Locator, datagram: &[u8]) -> Result<(), TransportError>;

    fn receive(&self, timeout: Duration) -> Result<(Locator, Vec<u8>), TransportError>;

    fn join_discovery_group(&self, group: Locator) -> Result<(), TransportError>;
}

impl<T: Transport + ?Sized> Transport for Arc<T> {
    fn local_locator(&self) -> Locator {
        (**self).local_locator()
    }

    fn send(&self, to: Locator, datagram: &[u8]) -> Result<(), TransportError> {
        (**self).send(to, datagram)
    }

    fn receive(&self, timeout: Duration) -> Result<(Locator, Vec<u8>), TransportError> {
        (**self).receive(timeout)
    }

    fn join_discovery_group(&self, group: Locator) -> Result<(), TransportError> {
        (**self).join_discovery_group(group)
    }
}

pub(crate) fn check_size(datagram: &[u8]) -> Result<(), TransportError> {
    if datagram.len() > MAX_MESSAGE_LEN {
        return Err(TransportError::TooLarge { size: datagram.len() });
    }
    Ok(())
}

/// Datagram counters kept at the transport boundary.
///
/// A datagram counts as "data" when it carries a DATA or DATA_FRAG
/// submessage; everything else (announcements, heartbeats, acknacks) is
/// protocol overhead.
#[derive(Debug, Default)]
pub struct TrafficCounters {
    data_sent: AtomicU64,
    control_sent: AtomicU64,
    bytes_sent: AtomicU64,
    data_received: AtomicU64,
    control_received: AtomicU64,
    bytes_received: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrafficSnapshot {
    pub data_sent: u64,
    pub control_sent: u64,
    pub bytes_sent: u64,
    pub data_received: u64,
    pub control_received: u64,
    pub bytes_received: u64,
}

impl TrafficSnapshot {
    pub fn since(&self, earlier: &TrafficSnapshot) -> TrafficSnapshot {
        TrafficSnapshot {
            data_sent: self.data_sent - earlier.data_sent,
            control_sent: self.control_sent - earlier.control_sent,
            bytes_sent: self.bytes_sent - earlier.bytes_sent,
            data_received: self.data_received - earlier.data_received,
            control_received: self.control_received - earlier.control_received,
            bytes_received: self.bytes_received - earlier.bytes_received,
        }
    }

    pub fn packets_sent(&self) -> u64 {
        self.data_sent + self.control_sent
    }
}

impl TrafficCounters {
    fn count(&self, datagram: &[u8], sent: bool) {
        let is_data = crate::wire::carries_data(datagram);
        let (data, control, bytes) = if sent {
            (&self.data_sent, &self.control_sent, &self.bytes_sent)
        } else {
            (&self.data_received, &self.control_received, &self.bytes_received)
        };
        if is_data { data } else { control }.fetch_add(1, Ordering::Relaxed);
        bytes.fetch_add(datagram.len() as u64, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> TrafficSnapshot {
        TrafficSnapshot {
            data_sent: self.data_sent.load(Ordering::Relaxed),
            control_sent: self.control_sent.load(Ordering::Relaxed),
            bytes_sent: self.bytes_sent.load(Ordering::Relaxed),
            data_received: self.data_received.load(Ordering::Relaxed),
            control_received: self.control_received.load(Ordering::Relaxed),
            bytes_received: self.bytes_received.load(Ordering::Relaxed),
        }
    }
}

/// Called with each counted datagram and whether it was sent.
pub type DatagramObserver = Box<dyn Fn(&[u8], bool) + Send + Sync>;

/// Wraps a transport and counts every datagram that crosses it.
pub struct CountingTransport<T> {
    inner: T,
    counters: Arc<TrafficCounters>,
    observer: Option<DatagramObserver>,
}

impl<T: Transport> CountingTransport<T> {
    pub fn new(inner: T) -> Self {
        CountingTransport { inner, counters: Arc::default(), observer: None }
    }

    pub fn with_observer(mut self, observer: impl Fn(&[u8], bool) + Send + Sync + 'static) -> Self {
        self.observer = Some(Box::new(observer));
        self
    }

    pub fn counters(&self) -> Arc<TrafficCounters> {
        Arc::clone(&self.counters)
    }
}

impl<T: Transport> Transport for CountingTransport<T> {
    fn local_locator(&self) -> Locator {
        self.inner.local_locator()
    }

    fn send(&self, to: Locator, datagram: &[u8]) -> Result<(), TransportError> {
        self.inner.send(to, datagram)?;
        self.counters.count(datagram, true);
        if let Some(f) = &self.observer {
            f(datagram, true);
        }
        Ok(())
    }

    fn receive(&self, timeout: Duration) -> Result<(Locator, Vec<u8>), TransportError> {
        let (from, bytes) = self.inner.receive(timeout)?;
        self.counters.count(&bytes, false);
        if let Some(f) = &self.observer {
            f(&bytes, false);
        }
        Ok((from, bytes))
    }

    fn join_discovery_group(&self, group: Locator) -> Result<(), TransportError> {
        self.inner.join_discovery_group(group)
    }
}
