//! Topic-based publish/subscribe over the wire protocol.
//!
//! The protocol logic is sans-IO: [`Engine`] consumes datagrams and clock
//! ticks and produces datagrams and events, and never touches a socket.
//! Two drivers sit on top of it. [`Participant`] runs an engine on its own
//! thread over any [`Transport`](crate::transport::Transport);
//! [`SimWorld`] steps several engines through virtual time on a manual
//! [`SimBus`](crate::transport::SimBus) for reproducible protocol tests.

use thiserror::Error;

use crate::transport::{Locator, TransportError, DEFAULT_DISCOVERY_GROUP};
use crate::wire::{EntityId, WireError, DEFAULT_FRAG_SIZE, MAX_MESSAGE_LEN, MAX_NAME_LEN};

mod engine;
mod reader;
mod runtime;
mod world;
mod writer;

pub use crate::wire::Reliability;
pub use engine::{Destination, Engine, EngineStats, Event, Outgoing};
pub use reader::{Delivery, HeartbeatOutcome, ReaderState};
pub use runtime::{Participant, Reader, Sample, Writer};
pub use world::{NodeId, SimWorld};
pub use writer::{AckNackResponse, WriterHistory};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PubSubError {
    #[error("payload is empty")]
    EmptyPayload,
    #[error("history full: oldest sample not yet acknowledged")]
    HistoryFull,
    #[error("entity id {0:?} already in use")]
    DuplicateEntity(EntityId),
    #[error("unknown local entity {0:?}")]
    UnknownEntity(EntityId),
    #[error("topic or type name longer than {MAX_NAME_LEN} bytes")]
    NameTooLong,
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("timed out")]
    Timeout,
    #[error("participant stopped")]
    Closed,
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Qos {
    pub reliability: Reliability,
    /// Samples retained per writer for retransmission.
    pub history_depth: usize,
    pub heartbeat_period_ms: u32,
}

impl Default for Qos {
    fn default() -> Self {
        Qos { reliability: Reliability::Reliable, history_depth: 16, heartbeat_period_ms: 50 }
    }
}

impl Qos {
    pub fn reliable() -> Self {
        Qos::default()
    }

    pub fn best_effort() -> Self {
        Qos { reliability: Reliability::BestEffort, ..Qos::default() }
    }

    pub fn with_history_depth(mut self, depth: usize) -> Self {
        self.history_depth = depth;
        self
    }

    pub fn with_heartbeat_period_ms(mut self, ms: u32) -> Self {
        self.heartbeat_period_ms = ms;
        self
    }

    fn validate(&self) -> Result<(), PubSubError> {
        if self.history_depth == 0 {
            return Err(PubSubError::InvalidConfig("history_depth must be positive"));
        }
        if self.heartbeat_period_ms == 0 {
            return Err(PubSubError::InvalidConfig("heartbeat_period_ms must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TopicSpec {
    pub name: String,
    pub type_name: String,
}

impl TopicSpec {
    pub fn new(name: impl Into<String>, type_name: impl Into<String>) -> Self {
        TopicSpec { name: name.into(), type_name: type_name.into() }
    }

    fn validate(&self) -> Result<(), PubSubError> {
        if self.name.len() > MAX_NAME_LEN || self.type_name.len() > MAX_NAME_LEN {
            return Err(PubSubError::NameTooLong);
        }
        Ok(())
    }
}

/// Writer/reader compatibility. Evaluated identically on both sides, so
/// matching is symmetric.
pub fn endpoints_match(writer: (&TopicSpec, Reliability), reader: (&TopicSpec, Reliability)) -> bool {
    writer.0 == reader.0 && reader.1 <= writer.1
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticipantConfig {
    pub lease_duration_ms: u32,
    pub announce_period_ms: u32,
    pub frag_size: usize,
    pub discovery_group: Locator,
    /// Concurrent partial reassemblies kept per matched writer.
    pub max_fragment_buffers: usize,
    /// Whether `Writer::write` waits for history space instead of failing
    /// with `HistoryFull`.
    pub block_on_full_history: bool,
}

impl Default for ParticipantConfig {
    fn default() -> Self {
        ParticipantConfig {
            lease_duration_ms: 10_000,
            announce_period_ms: 1_000,
            frag_size: DEFAULT_FRAG_SIZE,
            discovery_group: DEFAULT_DISCOVERY_GROUP,
            max_fragment_buffers: 8,
            block_on_full_history: true,
        }
    }
}

impl ParticipantConfig {
    pub fn validate(&self) -> Result<(), PubSubError> {
        if self.lease_duration_ms == 0 || self.announce_period_ms == 0 {
            return Err(PubSubError::InvalidConfig("periods must be positive"));
        }
        // Room for header, one DATA_FRAG and a piggybacked HEARTBEAT.
        if self.frag_size == 0 || self.frag_size > MAX_MESSAGE_LEN - 128 {
            return Err(PubSubError::InvalidConfig("frag_size out of range"));
        }
        if self.max_fragment_buffers == 0 {
            return Err(PubSubError::InvalidConfig("max_fragment_buffers must be positive"));
        }
        if !self.discovery_group.is_multicast() {
            return Err(PubSubError::InvalidConfig("discovery group must be multicast"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matching_rule() {
        let images = TopicSpec::new("xray/images", "XrayImageSample");
        let results = TopicSpec::new("xray/results", "ClassificationResult");
        use Reliability::*;
        assert!(endpoints_match((&images, Reliable), (&images, BestEffort)));
        assert!(endpoints_match((&images, Reliable), (&images, Reliable)));
        assert!(endpoints_match((&images, BestEffort), (&images, BestEffort)));
        assert!(!endpoints_match((&images, BestEffort), (&images, Reliable)));
        assert!(!endpoints_match((&images, Reliable), (&results, Reliable)));
        let other_type = TopicSpec::new("xray/images", "Other");
        assert!(!endpoints_match((&images, Reliable), (&other_type, Reliable)));
    }

    #[test]
    fn config_validation() {
        assert!(ParticipantConfig::default().validate().is_ok());
        let bad = ParticipantConfig { frag_size: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(Qos::reliable().with_history_depth(0).validate().is_err());
        assert!(TopicSpec::new("x".repeat(257), "T").validate().is_err());
    }
}
