//! Round-trip latency and throughput measurement, with CSV export.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Mutex, MutexGuard};

use thiserror::Error;

use crate::samples::SampleId;

pub const DEFAULT_WINDOW_US: u64 = 1_000_000;
pub const LATENCY_HEADER: [&str; 4] = ["sample_id", "t_publish_us", "t_result_us", "rtt_us"];
pub const THROUGHPUT_HEADER: [&str; 4] = ["window_start_us", "bytes", "packets", "bytes_per_sec"];

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("no records")]
    EmptyInput,
    #[error("I/O failure: {0}")]
    IoFailure(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatencyRecord {
    pub sample_id: SampleId,
    pub t_publish_us: u64,
    pub t_result_us: u64,
}

impl LatencyRecord {
    pub fn rtt_us(&self) -> u64 {
        self.t_result_us - self.t_publish_us
    }
}

#[derive(Debug, Default)]
struct RecorderState {
    pending: HashMap<SampleId, u64>,
    records: Vec<LatencyRecord>,
    orphans: u64,
}

/// Pairs publish and result timestamps taken on one clock. Safe to share
/// between threads.
#[derive(Debug, Default)]
pub struct LatencyRecorder {
    state: Mutex<RecorderState>,
}

impl LatencyRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, RecorderState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn record_publish(&self, id: SampleId, t_us: u64) {
        self.lock().pending.insert(id, t_us);
    }

    /// Completes the pair for `id`. A result with no pending publish, or
    /// one timestamped before its publish, counts as an orphan.
    pub fn record_result(&self, id: SampleId, t_us: u64) -> Option<LatencyRecord> {
        let mut st = self.lock();
        match st.pending.get(&id) {
            Some(&t_publish_us) if t_us >= t_publish_us => {
                st.pending.remove(&id);
                let rec = LatencyRecord { sample_id: id, t_publish_us, t_result_us: t_us };
                st.records.push(rec);
                Some(rec)
            }
            _ => {
                st.orphans += 1;
                None
            }
        }
    }

    pub fn records(&self) -> Vec<LatencyRecord> {
        self.lock().records.clone()
    }

    pub fn completed(&self) -> usize {
        self.lock().records.len()
    }

    pub fn orphans(&self) -> u64 {
        self.lock().orphans
    }

    /// Publishes still waiting for a result.
    pub fn outstanding(&self) -> usize {
        self.lock().pending.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub count: usize,
    pub mean_us: f64,
    pub p50_us: u64,
    pub p95_us: u64,
    pub max_us: u64,
}

/// Nearest-rank percentile of sorted data: the ceil(p/100 * n)-th smallest.
pub fn nearest_rank(sorted: &[u64], percent: u32) -> u64 {
    let n = sorted.len() as u64;
    let rank = (u64::from(percent) * n).div_ceil(100).max(1);
    sorted[(rank - 1) as usize]
}

pub fn latency_stats(records: &[LatencyRecord]) -> Result<LatencyStats, TelemetryError> {
    if records.is_empty() {
        return Err(TelemetryError::EmptyInput);
    }
    let mut rtts: Vec<u64> = records.iter().map(LatencyRecord::rtt_us).collect();
    rtts.sort_unstable();
    let sum: u128 = rtts.iter().map(|&r| u128::from(r)).sum();
    Ok(LatencyStats {
        count: rtts.len(),
        mean_us: sum as f64 / rtts.len() as f64,
        p50_us: nearest_rank(&rtts, 50),
        p95_us: nearest_rank(&rtts, 95),
        max_us: *rtts.last().expect("non-empty"),
    })
}

/// Bytes and datagrams observed at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TrafficEvent {
    pub t_us: u64,
    pub bytes: u64,
    pub packets: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThroughputWindow {
    pub window_start_us: u64,
    pub window_len_us: u64,
    pub bytes: u64,
    pub packets: u64,
}

impl ThroughputWindow {
    pub fn bytes_per_sec(&self) -> f64 {
        self.bytes as f64 * 1e6 / self.window_len_us as f64
    }
}

/// Buckets events into contiguous windows starting at the earliest event.
pub fn throughput_profile(events: &[TrafficEvent], window_len_us: u64) -> Vec<ThroughputWindow> {
    match events.iter().map(|e| e.t_us).min() {
        Some(t0) => throughput_profile_from(t0, events, window_len_us),
        None => Vec::new(),
    }
}

/// Like [`throughput_profile`] with windows anchored at `t0_us`. Events
/// before `t0_us` land in the first window.
pub fn throughput_profile_from(t0_us: u64, events: &[TrafficEvent], window_len_us: u64) -> Vec<ThroughputWindow> {
    assert!(window_len_us > 0, "window length must be positive");
    let mut sorted = events.to_vec();
    sorted.sort_unstable();
    let Some(last) = sorted.last() else {
        return Vec::new();
    };
    let count = (last.t_us.saturating_sub(t0_us) / window_len_us + 1) as usize;
    let mut windows: Vec<ThroughputWindow> = (0..count as u64)
        .map(|i| ThroughputWindow { window_start_us: t0_us + i * window_len_us, window_len_us, bytes: 0, packets: 0 })
        .collect();
    for e in &sorted {
        let w = &mut windows[(e.t_us.saturating_sub(t0_us) / window_len_us) as usize];
        w.bytes += e.bytes;
        w.packets += e.packets;
    }
    windows
}

/// Thread-safe log of traffic events.
#[derive(Debug, Default)]
pub struct TrafficLog {
    events: Mutex<Vec<TrafficEvent>>,
}

impl TrafficLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, t_us: u64, bytes: u64, packets: u64) {
        self.events.lock().unwrap_or_else(|e| e.into_inner()).push(TrafficEvent { t_us, bytes, packets });
    }

    pub fn events(&self) -> Vec<TrafficEvent> {
        self.events.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

/// Writes latency records ordered by publish time.
pub fn write_latency_csv(records: &[LatencyRecord], path: impl AsRef<Path>) -> Result<(), TelemetryError> {
    let mut sorted = records.to_vec();
    sorted.sort_by_key(|r| (r.t_publish_us, r.sample_id));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LATENCY_HEADER)?;
    for r in &sorted {
        w.write_record([
            r.sample_id.to_string(),
            r.t_publish_us.to_string(),
            r.t_result_us.to_string(),
            r.rtt_us().to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Writes windows ordered by start time.
pub fn write_throughput_csv(windows: &[ThroughputWindow], path: impl AsRef<Path>) -> Result<(), TelemetryError> {
    let mut sorted = windows.to_vec();
    sorted.sort_by_key(|w| w.window_start_us);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(THROUGHPUT_HEADER)?;
    for win in &sorted {
        w.write_record([
            win.window_start_us.to_string(),
            win.bytes.to_string(),
            win.packets.to_string(),
            win.bytes_per_sec().to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
