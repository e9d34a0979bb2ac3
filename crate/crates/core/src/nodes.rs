//! The doctor node, the benchmark driver and the in-process simulator
//! setup behind the `meddds` command line.

use std::collections::HashMap;
use std::net::Ipv4Addr;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::Receiver;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::inference::{self, Classifier, InferenceNode, QuadrantLinearModel};
use crate::pubsub::{Participant, ParticipantConfig, PubSubError, Qos, Reliability, Writer};
use crate::samples::{self, ClassificationResult, SampleId, XrayImageSample};
use crate::telemetry::{self, LatencyRecord, LatencyRecorder, LatencyStats, ThroughputWindow, TrafficLog};
use crate::transport::{
    CountingTransport, FaultProfile, Locator, SimBus, TrafficCounters, TrafficSnapshot, Transport, TransportError,
    UdpConfig, UdpTransport, DEFAULT_DISCOVERY_GROUP,
};
use crate::wire::{self, DEFAULT_FRAG_SIZE};

pub const MIN_FRAG_SIZE: usize = 64;
pub const MAX_FRAG_SIZE: usize = 65_000;

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("timed out")]
    Timeout,
    #[error(transparent)]
    PubSub(#[from] PubSubError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Pgm(#[from] samples::PgmError),
    #[error(transparent)]
    Sample(#[from] samples::SampleError),
    #[error(transparent)]
    Telemetry(#[from] telemetry::TelemetryError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeConfig {
    pub discovery_group: Locator,
    pub unicast_port: Option<u16>,
    /// Interface for multicast discovery traffic.
    pub interface: Ipv4Addr,
    pub reliability: Reliability,
    pub frag_size: usize,
    pub heartbeat_period_ms: u32,
    pub announce_period_ms: u32,
    pub lease_duration_ms: u32,
    pub simulated: Option<FaultProfile>,
}

impl Default for NodeConfig {
    fn default() -> Self {
        let p = ParticipantConfig::default();
        NodeConfig {
            discovery_group: DEFAULT_DISCOVERY_GROUP,
            unicast_port: None,
            interface: Ipv4Addr::UNSPECIFIED,
            reliability: Reliability::Reliable,
            frag_size: DEFAULT_FRAG_SIZE,
            heartbeat_period_ms: Qos::default().heartbeat_period_ms,
            announce_period_ms: p.announce_period_ms,
            lease_duration_ms: p.lease_duration_ms,
            simulated: None,
        }
    }
}

impl NodeConfig {
    pub fn validate(&self) -> Result<(), NodeError> {
        if !(MIN_FRAG_SIZE..=MAX_FRAG_SIZE).contains(&self.frag_size) {
            return Err(NodeError::Config(format!(
                "frag size {} outside [{MIN_FRAG_SIZE}, {MAX_FRAG_SIZE}]",
                self.frag_size
            )));
        }
        if self.heartbeat_period_ms == 0 || self.announce_period_ms == 0 || self.lease_duration_ms == 0 {
            return Err(NodeError::Config("periods must be positive".into()));
        }
        if !self.discovery_group.is_multicast() {
            return Err(NodeError::Config(format!("{} is not a multicast group", self.discovery_group)));
        }
        if let Some(p) = &self.simulated {
            p.validate()?;
        }
        Ok(())
    }

    pub fn participant_config(&self) -> ParticipantConfig {
        ParticipantConfig {
            lease_duration_ms: self.lease_duration_ms,
            announce_period_ms: self.announce_period_ms,
            frag_size: self.frag_size,
            discovery_group: self.discovery_group,
            ..ParticipantConfig::default()
        }
    }

    pub fn qos(&self) -> Qos {
        Qos { reliability: self.reliability, heartbeat_period_ms: self.heartbeat_period_ms, ..Qos::default() }
    }

    pub fn udp_transport(&self) -> Result<UdpTransport, NodeError> {
        let udp =
            UdpConfig { unicast_port: self.unicast_port, multicast_interface: self.interface, ..UdpConfig::default() };
        Ok(UdpTransport::bind(udp)?)
    }
}

/// Monotonic microseconds anchored to the Unix epoch at creation.
#[derive(Debug, Clone, Copy)]
pub struct NodeClock {
    start: Instant,
    base_us: u64,
}

impl Default for NodeClock {
    fn default() -> Self {
        NodeClock { start: Instant::now(), base_us: samples::unix_time_us() }
    }
}

impl NodeClock {
    pub fn now_us(&self) -> u64 {
        self.base_us + self.start.elapsed().as_micros() as u64
    }
}

/// A result as seen by the doctor, with its latency record when the
/// result completed a pending publish.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub result: ClassificationResult,
    pub record: Option<LatencyRecord>,
}

/// Publishes images and collects their classification results.
///
/// All timing uses one [`NodeClock`]. Every datagram crossing the node's
/// transport is counted; data datagrams are also logged with their time
/// for the throughput profile.
pub struct DoctorNode {
    participant: Participant,
    images: Writer,
    results_reader: crate::wire::EntityId,
    completions: Receiver<Completion>,
    recorder: Arc<LatencyRecorder>,
    image_bytes: Arc<Mutex<HashMap<SampleId, u64>>>,
    clock: NodeClock,
    counters: Arc<TrafficCounters>,
    datagram_log: Arc<TrafficLog>,
    exchange_log: Arc<TrafficLog>,
}

impl DoctorNode {
    pub fn start<T: Transport + 'static>(transport: T, config: &NodeConfig) -> Result<Self, NodeError> {
        config.validate()?;
        let clock = NodeClock::default();
        let datagram_log = Arc::new(TrafficLog::new());
        let counting = {
            let log = Arc::clone(&datagram_log);
            CountingTransport::new(transport).with_observer(move |bytes, _sent| {
                if wire::carries_data(bytes) {
                    log.record(clock.now_us(), 0, 1);
                }
            })
        };
        let counters = counting.counters();
        let participant = Participant::new(Arc::new(counting), config.participant_config())?;
        let images = participant.create_writer(inference::images_topic(), config.qos())?;

        let recorder = Arc::new(LatencyRecorder::new());
        let exchange_log = Arc::new(TrafficLog::new());
        let image_bytes: Arc<Mutex<HashMap<SampleId, u64>>> = Arc::default();
        let (tx, completions) = crossbeam_channel::unbounded();
        let results_reader = {
            let recorder = Arc::clone(&recorder);
            let exchange_log = Arc::clone(&exchange_log);
            let image_bytes = Arc::clone(&image_bytes);
            participant.create_reader_with_callback(inference::results_topic(), config.qos(), move |sample| {
                let t = clock.now_us();
                let result = match ClassificationResult::decode(&sample.payload) {
                    Ok(r) => r,
                    Err(e) => {
                        log::warn!("undecodable result from {}: {e}", sample.writer);
                        return;
                    }
                };
                let record = recorder.record_result(result.sample_id, t);
                if record.is_some() {
                    let sent = image_bytes.lock().unwrap_or_else(|e| e.into_inner()).remove(&result.sample_id);
                    exchange_log.record(t, sent.unwrap_or(0) + sample.payload.len() as u64, 0);
                }
                let _ = tx.send(Completion { result, record });
            })?
        };
        Ok(DoctorNode {
            participant,
            images,
            results_reader,
            completions,
            recorder,
            image_bytes,
            clock,
            counters,
            datagram_log,
            exchange_log,
        })
    }

    pub fn participant(&self) -> &Participant {
        &self.participant
    }

    pub fn clock(&self) -> NodeClock {
        self.clock
    }

    pub fn recorder(&self) -> &LatencyRecorder {
        &self.recorder
    }

    pub fn traffic(&self) -> TrafficSnapshot {
        self.counters.snapshot()
    }

    /// Whether both the image writer and the result reader have a peer.
    pub fn is_ready(&self) -> bool {
        self.images.matched_count() > 0 && self.participant.matched_count(self.results_reader) > 0
    }

    pub fn wait_ready(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if self.is_ready() {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_millis(5));
        }
    }

    /// Stamps and publishes `image`, returning its id.
    pub fn publish(&self, mut image: XrayImageSample) -> Result<SampleId, NodeError> {
        let t = self.clock.now_us();
        image.publish_timestamp_us = t;
        let payload = image.encode();
        self.image_bytes.lock().unwrap_or_else(|e| e.into_inner()).insert(image.sample_id, payload.len() as u64);
        self.recorder.record_publish(image.sample_id, t);
        self.images.write(payload)?;
        Ok(image.sample_id)
    }

    pub fn next_completion(&self, timeout: Duration) -> Option<Completion> {
        self.completions.recv_timeout(timeout).ok()
    }

    /// Publishes one image and waits for its result. The timeout covers
    /// discovery as well as the exchange itself.
    pub fn send(
        &self,
        image: XrayImageSample,
        timeout: Duration,
    ) -> Result<(ClassificationResult, LatencyRecord), NodeError> {
        let deadline = Instant::now() + timeout;
        if !self.wait_ready(timeout) {
            return Err(NodeError::Timeout);
        }
        let id = self.publish(image)?;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let c = self.next_completion(left).ok_or(NodeError::Timeout)?;
            if c.result.sample_id == id {
                if let Some(record) = c.record {
                    return Ok((c.result, record));
                }
            }
        }
    }

    /// Data datagrams and completed-exchange payload bytes, merged.
    pub fn traffic_events(&self) -> Vec<telemetry::TrafficEvent> {
        let mut events = self.datagram_log.events();
        events.extend(self.exchange_log.events());
        events
    }
}

/// The inference side of an in-process setup.
pub struct InferenceService {
    node: InferenceNode,
    _participant: Participant,
}

impl InferenceService {
    pub fn start<T: Transport + 'static>(
        transport: T,
        config: &NodeConfig,
        classifier: Box<dyn Classifier>,
    ) -> Result<Self, NodeError> {
        config.validate()?;
        let participant = Participant::new(Arc::new(transport), config.participant_config())?;
        let node = inference::run_inference_node(&participant, classifier, config.reliability)?;
        Ok(InferenceService { node, _participant: participant })
    }

    pub fn node(&self) -> &InferenceNode {
        &self.node
    }
}

/// Doctor and built-in inference node sharing one real-time simulated bus.
pub struct SimPipeline {
    pub bus: Arc<SimBus>,
    pub inference: InferenceService,
    pub doctor: DoctorNode,
}

impl SimPipeline {
    pub fn start(config: &NodeConfig, profile: FaultProfile) -> Result<Self, NodeError> {
        let bus = SimBus::realtime(profile)?;
        let inference = InferenceService::start(bus.endpoint(), config, Box::new(QuadrantLinearModel::new()))?;
        let doctor = DoctorNode::start(bus.endpoint(), config)?;
        Ok(SimPipeline { bus, inference, doctor })
    }
}

/// Deterministic square test images.
pub fn synthetic_images(seed: u64, size: u32, count: usize) -> impl Iterator<Item = XrayImageSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(move |_| {
        let mut pixels = vec![0u8; (size as usize) * (size as usize)];
        rng.fill_bytes(&mut pixels);
        XrayImageSample::new(size, size, pixels).expect("size is positive")
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchParams {
    pub count: usize,
    /// Images per second; 0 publishes back to back.
    pub rate_per_sec: f64,
    pub size: u32,
    pub seed: u64,
    /// How long to wait for discovery, and for results after the last
    /// publish.
    pub timeout: Duration,
    pub window_us: u64,
}

impl Default for BenchParams {
    fn default() -> Self {
        BenchParams {
            count: 10,
            rate_per_sec: 10.0,
            size: 128,
            seed: 0,
            timeout: Duration::from_secs(10),
            window_us: telemetry::DEFAULT_WINDOW_US,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub count: usize,
    pub records: Vec<LatencyRecord>,
    pub stats: Option<LatencyStats>,
    pub windows: Vec<ThroughputWindow>,
    pub orphans: u64,
    pub timeouts: usize,
    pub traffic: TrafficSnapshot,
    /// Image plus result payload bytes of completed exchanges.
    pub payload_bytes: u64,
}

impl BenchReport {
    pub fn is_complete(&self) -> bool {
        self.records.len() == self.count && self.orphans == 0
    }

    pub fn data_packets(&self) -> u64 {
        self.traffic.data_sent + self.traffic.data_received
    }

    pub fn control_packets(&self) -> u64 {
        self.traffic.control_sent + self.traffic.control_received
    }

    pub fn packets(&self) -> u64 {
        self.data_packets() + self.control_packets()
    }

    pub fn mean_throughput_bps(&self) -> f64 {
        if self.windows.is_empty() {
            return 0.0;
        }
        self.windows.iter().map(ThroughputWindow::bytes_per_sec).sum::<f64>() / self.windows.len() as f64
    }

    pub fn summary_line(&self) -> String {
        let ms = |us: f64| us / 1_000.0;
        let (mean, p95) = self.stats.map_or((0.0, 0.0), |s| (ms(s.mean_us), ms(s.p95_us as f64)));
        format!(
            "n={} mean_rtt_ms={:.3} p95_rtt_ms={:.3} mean_throughput_Bps={:.1} packets={}",
            self.count,
            mean,
            p95,
            self.mean_throughput_bps(),
            self.packets()
        )
    }

    pub fn detail_line(&self) -> String {
        let completed = self.records.len();
        let per_exchange = if completed == 0 { 0.0 } else { self.data_packets() as f64 / completed as f64 };
        format!(
            "completed={completed} timeouts={} orphans={} data_packets={} control_packets={} data_packets_per_exchange={per_exchange:.2}",
            self.timeouts,
            self.orphans,
            self.data_packets(),
            self.control_packets()
        )
    }

    /// Writes `latency.csv` and `throughput.csv` into `dir`.
    pub fn write_csvs(&self, dir: &Path) -> Result<(), NodeError> {
        std::fs::create_dir_all(dir).map_err(|e| NodeError::Config(format!("{}: {e}", dir.display())))?;
        telemetry::write_latency_csv(&self.records, dir.join("latency.csv"))?;
        telemetry::write_throughput_csv(&self.windows, dir.join("throughput.csv"))?;
        Ok(())
    }
}

/// Publishes `params.count` synthetic images at the given rate and
/// collects results. Traffic before the call (discovery) is excluded from
/// the report.
pub fn run_bench(doctor: &DoctorNode, params: &BenchParams) -> Result<BenchReport, NodeError> {
    if !doctor.wait_ready(params.timeout) {
        return Err(NodeError::Timeout);
    }
    let before_traffic = doctor.traffic();
    let before_records = doctor.recorder().completed();
    let before_orphans = doctor.recorder().orphans();
    let start_us = doctor.clock().now_us();
    let started = Instant::now();
    let mut ids = std::collections::HashSet::new();
    for (i, image) in synthetic_images(params.seed, params.size, params.count).enumerate() {
        if params.rate_per_sec > 0.0 {
            let due = started + Duration::from_secs_f64(i as f64 / params.rate_per_sec);
            thread::sleep(due.saturating_duration_since(Instant::now()));
        }
        ids.insert(doctor.publish(image)?);
    }
    let deadline = Instant::now() + params.timeout;
    let mut done = 0;
    while done < ids.len() {
        let left = deadline.saturating_duration_since(Instant::now());
        match doctor.next_completion(left) {
            Some(c) if c.record.is_some() && ids.contains(&c.result.sample_id) => done += 1,
            Some(_) => {}
            None => break,
        }
    }
    // Let trailing acknowledgments land before the counters are read.
    thread::sleep(Duration::from_millis(100));

    let records: Vec<LatencyRecord> =
        doctor.recorder().records()[before_records..].iter().filter(|r| ids.contains(&r.sample_id)).copied().collect();
    let events: Vec<_> = doctor.traffic_events().into_iter().filter(|e| e.t_us >= start_us).collect();
    let windows = telemetry::throughput_profile_from(start_us, &events, params.window_us);
    Ok(BenchReport {
        count: params.count,
        stats: telemetry::latency_stats(&records).ok(),
        payload_bytes: events.iter().map(|e| e.bytes).sum(),
        timeouts: params.count - records.len(),
        records,
        windows,
        orphans: doctor.recorder().orphans() - before_orphans,
        traffic: doctor.traffic().since(&before_traffic),
    })
}
