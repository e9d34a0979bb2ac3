use std::time::{Duration, Instant};

use meddds::transport::{CountingTransport, FaultProfile, Locator, SimBus, Transport, TransportError};
use meddds::wire::{GuidPrefix, Message};

const GOLDEN: &str = include_str!("fixtures/sim_seed42_loss0.2_delivered.txt");

fn indices_delivered(profile: FaultProfile, sends: usize) -> Vec<usize> {
    let bus = SimBus::manual(profile).unwrap();
    let a = bus.endpoint();
    let b = bus.endpoint();
    for i in 0..sends {
        a.send(b.local_locator(), &(i as u32).to_le_bytes()).unwrap();
    }
    bus.flush_held();
    bus.advance_to(u64::MAX / 2);
    let mut got = Vec::new();
    while let Some((from, bytes)) = b.try_receive() {
        assert_eq!(from, a.local_locator());
        got.push(u32::from_le_bytes(bytes.try_into().unwrap()) as usize);
    }
    got
}

#[test]
fn seed_42_golden_subset() {
    let golden: Vec<usize> = GOLDEN.split_whitespace().map(|s| s.parse().unwrap()).collect();
    for _ in 0..3 {
        assert_eq!(indices_delivered(FaultProfile::lossy(0.2, 42), 100), golden);
    }
}

#[test]
fn total_loss_and_perfect_order() {
    assert!(indices_delivered(FaultProfile::lossy(1.0, 1), 50).is_empty());
    assert_eq!(indices_delivered(FaultProfile::perfect(1), 50), (0..50).collect::<Vec<_>>());
}

#[test]
fn loss_converges_to_binomial() {
    for (p, seed) in [(0.1, 1), (0.2, 2), (0.5, 3)] {
        let n = 10_000.0;
        let got = indices_delivered(FaultProfile::lossy(p, seed), 10_000).len() as f64;
        let mean = n * (1.0 - p);
        let sigma = (n * p * (1.0 - p)).sqrt();
        assert!((got - mean).abs() <= 3.0 * sigma, "p={p}: {got} vs {mean}±{sigma}");
    }
}

#[test]
fn reorder_swaps_adjacent_only() {
    let profile = FaultProfile { reorder_probability: 0.3, ..FaultProfile::perfect(5) };
    let got = indices_delivered(profile, 200);
    let mut sorted = got.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..200).collect::<Vec<_>>());
    assert_ne!(got, sorted);
    for (pos, &i) in got.iter().enumerate() {
        assert!(pos.abs_diff(i) <= 1, "{i} landed at {pos}");
    }
}

#[test]
fn identical_seeds_identical_traces() {
    let run = || {
        let profile = FaultProfile { loss_probability: 0.3, delay_ms: (0, 20), reorder_probability: 0.2, seed: 77 };
        let bus = SimBus::manual(profile).unwrap();
        bus.enable_trace();
        let a = bus.endpoint();
        let b = bus.endpoint();
        let group: Locator = "239.255.0.7:7400".parse().unwrap();
        b.join_discovery_group(group).unwrap();
        for i in 0..300u32 {
            let to = if i % 3 == 0 { group } else { b.local_locator() };
            a.send(to, &i.to_le_bytes()).unwrap();
        }
        bus.trace()
    };
    assert_eq!(run(), run());
}

#[test]
fn header_only_message_round_trip_and_timeouts() {
    let bus = SimBus::realtime(FaultProfile::perfect(0)).unwrap();
    let a = bus.endpoint();
    let b = bus.endpoint();
    let bytes = Message::new(GuidPrefix([3; 12])).encode().unwrap();
    assert_eq!(bytes.len(), 18);
    a.send(b.local_locator(), &bytes).unwrap();
    assert_eq!(b.receive(Duration::from_millis(100)).unwrap(), (a.local_locator(), bytes));
    let t = Instant::now();
    assert_eq!(b.receive(Duration::from_millis(10)), Err(TransportError::TimedOut));
    assert!(t.elapsed() >= Duration::from_millis(10));
    assert!(matches!(a.send(b.local_locator(), &vec![0; 65_508]), Err(TransportError::TooLarge { .. })));
}

#[test]
fn multicast_reaches_members_only() {
    let bus = SimBus::realtime(FaultProfile::perfect(0)).unwrap();
    let group: Locator = "239.255.0.7:7400".parse().unwrap();
    let a = bus.endpoint();
    let b = bus.endpoint();
    let outsider = bus.endpoint();
    a.join_discovery_group(group).unwrap();
    b.join_discovery_group(group).unwrap();
    a.send(group, b"hello").unwrap();
    assert_eq!(b.receive(Duration::from_millis(100)).unwrap().1, b"hello");
    assert_eq!(a.receive(Duration::from_millis(10)), Err(TransportError::TimedOut));
    assert_eq!(outsider.receive(Duration::from_millis(10)), Err(TransportError::TimedOut));
    assert_eq!(a.join_discovery_group(a.local_locator()), Err(TransportError::NotMulticast(a.local_locator())));
}

#[test]
fn counting_transport_classifies_datagrams() {
    let bus = SimBus::realtime(FaultProfile::perfect(0)).unwrap();
    let a = CountingTransport::new(bus.endpoint());
    let b = bus.endpoint();
    let counters = a.counters();
    let data = Message::with(
        GuidPrefix([1; 12]),
        meddds::wire::Submessage::Data(meddds::wire::Data {
            writer_id: meddds::wire::EntityId(1),
            seq: meddds::wire::SequenceNumber(1),
            payload: vec![1, 2, 3],
        }),
    )
    .encode()
    .unwrap();
    a.send(b.local_locator(), &data).unwrap();
    a.send(b.local_locator(), &Message::new(GuidPrefix([1; 12])).encode().unwrap()).unwrap();
    let s = counters.snapshot();
    assert_eq!((s.data_sent, s.control_sent, s.packets_sent()), (1, 1, 2));
}
