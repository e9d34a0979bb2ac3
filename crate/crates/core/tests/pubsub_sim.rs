use meddds::pubsub::{Event, NodeId, ParticipantConfig, PubSubError, Qos, SimWorld, TopicSpec};
use meddds::transport::FaultProfile;
use meddds::wire::{EntityId, Reliability};
use proptest::prelude::*;

const SECOND: u64 = 1_000_000;

fn topic() -> TopicSpec {
    TopicSpec::new("xray/images", "XrayImageSample")
}

struct Pair {
    world: SimWorld,
    a: NodeId,
    b: NodeId,
    w: EntityId,
    r: EntityId,
}

fn pair(profile: FaultProfile, writer: Qos, reader: Qos) -> Pair {
    let mut world = SimWorld::new(profile).unwrap();
    let a = world.add_participant(ParticipantConfig::default()).unwrap();
    let b = world.add_participant(ParticipantConfig::default()).unwrap();
    let w = world.create_writer(a, topic(), writer).unwrap();
    let r = world.create_reader(b, topic(), reader).unwrap();
    Pair { world, a, b, w, r }
}

impl Pair {
    fn matched(&mut self, deadline: u64) -> bool {
        let (a, b, w, r) = (self.a, self.b, self.w, self.r);
        self.world.run_until(deadline, |x| x.engine(a).matched_count(w) == 1 && x.engine(b).matched_count(r) == 1)
    }

    fn drain(&mut self, out: &mut Vec<(u64, Vec<u8>)>) {
        for e in self.world.take_events(self.b) {
            if let Event::Delivered { seq, payload, .. } = e {
                out.push((seq.0, payload));
            }
        }
    }

    /// Writes every payload, stepping the world whenever the history is
    /// full, then runs until all are acknowledged or the deadline passes.
    fn publish_all(&mut self, payloads: &[Vec<u8>], pace_us: u64) -> Vec<(u64, Vec<u8>)> {
        let mut got = Vec::new();
        for p in payloads {
            loop {
                match self.world.write(self.a, self.w, p.clone()) {
                    Ok(_) => break,
                    Err(PubSubError::HistoryFull) => {
                        self.world.step();
                        self.drain(&mut got);
                    }
                    Err(e) => panic!("{e}"),
                }
            }
            if pace_us > 0 {
                self.world.run_for(pace_us);
            }
            self.drain(&mut got);
        }
        let deadline = self.world.now_us() + 120 * SECOND;
        let (a, w) = (self.a, self.w);
        self.world.run_until(deadline, |x| !x.engine(a).writer(w).unwrap().has_unacknowledged());
        self.world.bus().flush_held();
        self.world.run_for(SECOND);
        self.drain(&mut got);
        got
    }
}

#[test]
fn discovery_within_two_announce_periods() {
    let mut p = pair(FaultProfile::perfect(0), Qos::reliable(), Qos::reliable());
    assert!(p.matched(2 * SECOND));
}

#[test]
fn lone_participant_matches_nothing() {
    let mut world = SimWorld::new(FaultProfile::perfect(0)).unwrap();
    let a = world.add_participant(ParticipantConfig::default()).unwrap();
    let w = world.create_writer(a, topic(), Qos::reliable()).unwrap();
    let r = world.create_reader(a, topic(), Qos::reliable()).unwrap();
    world.run_for(5 * SECOND);
    assert_eq!(world.engine(a).matched_count(w), 0);
    assert_eq!(world.engine(a).matched_count(r), 0);
    assert_eq!(world.engine(a).remote_participants().count(), 0);
}

#[test]
fn lease_expiry_unmatches() {
    let mut p = pair(FaultProfile::perfect(0), Qos::reliable(), Qos::reliable());
    assert!(p.matched(2 * SECOND));
    p.world.stop_participant(p.b);
    let stopped_at = p.world.now_us();
    let (a, w) = (p.a, p.w);
    assert!(p.world.run_until(stopped_at + 12 * SECOND, |x| x.engine(a).matched_count(w) == 0));
    let elapsed = p.world.now_us() - stopped_at;
    assert!(elapsed >= 9 * SECOND, "unmatched after {elapsed} us");
    assert!(p.world.take_events(a).iter().any(|e| matches!(e, Event::ParticipantLost(_))));
}

#[test]
fn incompatible_endpoints_do_not_match() {
    let mut world = SimWorld::new(FaultProfile::perfect(0)).unwrap();
    let a = world.add_participant(ParticipantConfig::default()).unwrap();
    let b = world.add_participant(ParticipantConfig::default()).unwrap();
    let w_be = world.create_writer(a, topic(), Qos::best_effort()).unwrap();
    let r_rel = world.create_reader(b, topic(), Qos::reliable()).unwrap();
    let w_other =
        world.create_writer(a, TopicSpec::new("xray/results", "ClassificationResult"), Qos::reliable()).unwrap();
    world.run_for(3 * SECOND);
    assert_eq!(world.engine(a).matched_count(w_be), 0);
    assert_eq!(world.engine(b).matched_count(r_rel), 0);
    assert_eq!(world.engine(a).matched_count(w_other), 0);
}

#[test]
fn write_sizes_map_to_datagram_counts() {
    let mut p = pair(FaultProfile::perfect(0), Qos::reliable(), Qos::reliable());
    assert!(p.matched(2 * SECOND));
    let before = p.world.engine(p.a).stats().data_datagrams;
    assert_eq!(p.world.write(p.a, p.w, vec![1; 500]).unwrap().0, 1);
    assert_eq!(p.world.engine(p.a).stats().data_datagrams - before, 1);
    let before = p.world.engine(p.a).stats().data_datagrams;
    assert_eq!(p.world.write(p.a, p.w, vec![2; 262_144]).unwrap().0, 2);
    assert_eq!(p.world.engine(p.a).stats().data_datagrams - before, 219);
    assert_eq!(p.world.write(p.a, p.w, vec![3; 10]).unwrap().0, 3);
    assert_eq!(p.world.write(p.a, p.w, Vec::new()), Err(PubSubError::EmptyPayload));
    let got = p.publish_all(&[], 0);
    assert_eq!(got.iter().map(|(s, _)| *s).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert_eq!(got[1].1, vec![2; 262_144]);
}

#[test]
fn quiescence_after_acknowledgment() {
    let profile = FaultProfile { loss_probability: 0.2, reorder_probability: 0.1, ..FaultProfile::perfect(4) };
    let mut p = pair(profile, Qos::reliable(), Qos::reliable());
    assert!(p.matched(10 * SECOND));
    let payloads: Vec<Vec<u8>> = (0..30u8).map(|i| vec![i; 3_000]).collect();
    assert_eq!(p.publish_all(&payloads, 2_000).len(), 30);
    let s0 = p.world.engine(p.a).stats();
    p.world.run_for(10 * SECOND);
    let s1 = p.world.engine(p.a).stats();
    assert_eq!(s1.data_datagrams, s0.data_datagrams);
    assert_eq!(s1.retransmitted_samples, s0.retransmitted_samples);
    assert_eq!(s1.heartbeats_sent, s0.heartbeats_sent);
    assert!(s1.announces_sent > s0.announces_sent);
}

#[test]
fn late_reader_gets_only_new_samples() {
    let mut world = SimWorld::new(FaultProfile::perfect(0)).unwrap();
    let a = world.add_participant(ParticipantConfig::default()).unwrap();
    let b = world.add_participant(ParticipantConfig::default()).unwrap();
    let w = world.create_writer(a, topic(), Qos::reliable()).unwrap();
    world.run_for(2 * SECOND);
    for i in 0..3u8 {
        world.write(a, w, vec![i]).unwrap();
    }
    let r = world.create_reader(b, topic(), Qos::reliable()).unwrap();
    assert!(world.run_until(5 * SECOND, |x| x.engine(a).matched_count(w) == 1 && x.engine(b).matched_count(r) == 1));
    world.write(a, w, vec![9]).unwrap();
    world.run_for(SECOND);
    let seqs: Vec<u64> = world
        .take_events(b)
        .into_iter()
        .filter_map(|e| match e {
            Event::Delivered { seq, .. } => Some(seq.0),
            _ => None,
        })
        .collect();
    assert_eq!(seqs, vec![4]);
    assert!(!world.engine(a).writer(w).unwrap().has_unacknowledged());
}

#[test]
fn match_symmetry_across_participants() {
    let topics = [TopicSpec::new("t1", "A"), TopicSpec::new("t1", "B"), TopicSpec::new("t2", "A")];
    let rel = [Reliability::BestEffort, Reliability::Reliable];
    let mut world = SimWorld::new(FaultProfile::perfect(0)).unwrap();
    let a = world.add_participant(ParticipantConfig::default()).unwrap();
    let b = world.add_participant(ParticipantConfig::default()).unwrap();
    let mut writers = Vec::new();
    let mut readers = Vec::new();
    for (i, t) in topics.iter().enumerate() {
        for (j, &r) in rel.iter().enumerate() {
            let qos = Qos { reliability: r, ..Qos::default() };
            let wn = if (i + j) % 2 == 0 { a } else { b };
            writers.push((wn, world.create_writer(wn, t.clone(), qos).unwrap()));
            readers.push((a, world.create_reader(a, t.clone(), qos).unwrap()));
            readers.push((b, world.create_reader(b, t.clone(), qos).unwrap()));
        }
    }
    world.run_for(3 * SECOND);
    for &(wn, w) in &writers {
        let writer = world.engine(wn).writer(w).unwrap();
        for (guid, _, _) in writer.matched_readers() {
            let rn = if guid.prefix == world.engine(a).guid_prefix() { a } else { b };
            let reader = world.engine(rn).reader(guid.entity_id).unwrap();
            assert!(reader.matched_writers().any(|g| *g == writer.guid()));
        }
    }
    for &(rn, r) in &readers {
        let reader = world.engine(rn).reader(r).unwrap();
        for guid in reader.matched_writers() {
            let wn = if guid.prefix == world.engine(a).guid_prefix() { a } else { b };
            let writer = world.engine(wn).writer(guid.entity_id).unwrap();
            assert!(writer.matched_readers().any(|(g, _, _)| *g == reader.guid()));
        }
    }
    let total: usize = writers.iter().map(|&(n, w)| world.engine(n).matched_count(w)).sum();
    // Per topic: reliable writer to both readers, best-effort writer to one.
    assert_eq!(total, 3 * 3);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn reliable_is_exactly_once_in_order(
        seed in any::<u64>(),
        loss in 0.0f64..=0.5,
        reorder in 0.0f64..=0.3,
        sizes in proptest::collection::vec(1usize..6_000, 1..80),
        depth in 1usize..20,
    ) {
        let profile = FaultProfile { loss_probability: loss, delay_ms: (0, 3), reorder_probability: reorder, seed };
        let qos = Qos::reliable().with_history_depth(depth);
        let mut p = pair(profile, qos, Qos::reliable());
        prop_assert!(p.matched(60 * SECOND));
        let payloads: Vec<Vec<u8>> = sizes.iter().enumerate().map(|(i, &n)| vec![i as u8; n]).collect();
        let got = p.publish_all(&payloads, 0);
        let seqs: Vec<u64> = got.iter().map(|(s, _)| *s).collect();
        prop_assert_eq!(seqs, (1..=payloads.len() as u64).collect::<Vec<_>>());
        for ((_, body), sent) in got.iter().zip(&payloads) {
            prop_assert_eq!(body, sent);
        }
    }

    #[test]
    fn best_effort_is_monotone_subsequence(
        seed in any::<u64>(),
        loss in 0.0f64..=0.5,
        reorder in 0.0f64..=0.5,
        sizes in proptest::collection::vec(1usize..5_000, 1..80),
        writer_reliable in any::<bool>(),
    ) {
        let profile = FaultProfile { loss_probability: loss, delay_ms: (0, 5), reorder_probability: reorder, seed };
        let wq = if writer_reliable { Qos::reliable() } else { Qos::best_effort() };
        let mut p = pair(profile, wq, Qos::best_effort());
        prop_assert!(p.matched(60 * SECOND));
        let payloads: Vec<Vec<u8>> = sizes.iter().enumerate().map(|(i, &n)| vec![i as u8; n]).collect();
        let got = p.publish_all(&payloads, 500);
        for pair in got.windows(2) {
            prop_assert!(pair[0].0 < pair[1].0);
        }
        for (seq, body) in &got {
            prop_assert_eq!(body, &payloads[*seq as usize - 1]);
        }
        if loss == 0.0 && reorder == 0.0 {
            prop_assert_eq!(got.len(), payloads.len());
        }
    }
}
