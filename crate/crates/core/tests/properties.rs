use std::collections::VecDeque;

use proptest::prelude::*;

use wban_core::channel::ChannelStream;
use wban_core::frame::*;
use wban_core::mac::*;
use wban_core::sim::{run_experiment, ChannelPreset, ExperimentConfig};

const HUB: Address = Address(0);
const NODE: Address = Address(1);

fn arb_params() -> impl Strategy<Value = ConnectionParams> {
    (0u8..3, any::<u8>(), any::<u8>()).prop_map(|(s, max_payload, max_retries)| ConnectionParams {
        status: ConnectionStatus::from_code(s).unwrap(),
        max_payload,
        max_retries,
    })
}

fn arb_frame() -> impl Strategy<Value = Frame> {
    let header = (any::<u8>(), any::<u8>(), any::<u8>(), 0u8..=MAX_FRAGMENT_INDEX, any::<bool>());
    let body = prop_oneof![
        proptest::collection::vec(any::<u8>(), 0..=MAX_PAYLOAD).prop_map(FrameBody::Data),
        any::<u8>().prop_map(|s| FrameBody::Ack { acked_sequence: s }),
        arb_params().prop_map(FrameBody::Management),
    ];
    (header, body, 0u8..3).prop_map(|((r, s, seq, idx, last), body, m)| {
        let frame_type = match &body {
            FrameBody::Data(_) => FrameType::Data,
            FrameBody::Ack { .. } => FrameType::Ack,
            FrameBody::Management(_) => [
                FrameType::ManagementRequest,
                FrameType::ManagementAssignment,
                FrameType::ManagementDisconnect,
            ][m as usize],
        };
        Frame {
            header: FrameHeader {
                frame_type,
                recipient: Address(r),
                sender: Address(s),
                sequence: seq,
                fragment_index: idx,
                last_fragment: last,
            },
            body,
        }
    })
}

fn tx(out: &[Primitive]) -> Vec<Vec<u8>> {
    out.iter()
        .filter_map(Primitive::as_transmission)
        .map(<[u8]>::to_vec)
        .collect()
}

fn connected_pair(config: MacConfig) -> (DeviceState, DeviceState) {
    let mut hub = DeviceState::new_hub(HUB, config.clone());
    let mut node = DeviceState::new_node(NODE, config);
    let mut inbox = VecDeque::from([Primitive::connect_request(HUB).into()]);
    let req = tx(&node.poll_step(0, &mut inbox));
    let reply = tx(&hub.receive(0, req[0].clone()));
    node.receive(0, reply[0].clone());
    assert_eq!(node.connection(), ConnectionState::Connected);
    (hub, node)
}

proptest! {
    #[test]
    fn codec_round_trip(frame in arb_frame()) {
        let bytes = encode_frame(&frame).unwrap();
        prop_assert_eq!(bytes.len(), frame.encoded_len());
        prop_assert_eq!(decode_frame(&bytes).unwrap(), frame);
    }

    #[test]
    fn single_bit_flip_detected(frame in arb_frame(), bit in any::<prop::sample::Index>()) {
        let mut bytes = encode_frame(&frame).unwrap();
        let b = bit.index(bytes.len() * 8);
        bytes[b / 8] ^= 0x80 >> (b % 8);
        prop_assert!(decode_frame(&bytes).is_err());
    }

    #[test]
    fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..300)) {
        let _ = decode_frame(&bytes);
        let _ = dump(&bytes);
    }

    #[test]
    fn fragmentation_inverse(
        sdu in proptest::collection::vec(any::<u8>(), 1..=1024),
        max_payload in 1usize..=255,
        seq0 in any::<u8>(),
        order_seed in any::<u64>(),
    ) {
        let needed = sdu.len().div_ceil(max_payload);
        let frags = match fragment_sdu(&sdu, max_payload) {
            Ok(f) => f,
            Err(e) => {
                // the 7-bit fragment index caps an SDU at 128 fragments
                prop_assert!(needed > 128);
                prop_assert_eq!(e, MacError::TooManyFragments { sdu_len: sdu.len(), max_payload });
                return Ok(());
            }
        };
        prop_assert_eq!(frags.len(), needed);
        prop_assert!(frags.iter().all(|f| f.data.len() <= max_payload));
        prop_assert_eq!(frags.iter().flat_map(|f| f.data.clone()).collect::<Vec<_>>(), sdu.clone());

        // deliver in a shuffled order
        let mut order: Vec<usize> = (0..frags.len()).collect();
        let mut s = order_seed;
        for i in (1..order.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let mut r = Reassembler::new(1_000);
        let mut done = None;
        for (k, &i) in order.iter().enumerate() {
            let f = &frags[i];
            let header = FrameHeader {
                frame_type: FrameType::Data,
                recipient: HUB,
                sender: NODE,
                sequence: seq0.wrapping_add(f.index),
                fragment_index: f.index,
                last_fragment: f.last,
            };
            match r.accept(&header, f.data.clone(), 0).unwrap() {
                Reassembly::Complete(d) => {
                    prop_assert_eq!(k, order.len() - 1);
                    done = Some(d);
                }
                Reassembly::Pending => prop_assert!(k < order.len() - 1),
            }
        }
        prop_assert_eq!(done, Some(sdu));
    }

    #[test]
    fn sequence_discipline(count in 1usize..40, ber in 0.0f64..0.02, seed in any::<u64>()) {
        let (mut hub, mut node) = connected_pair(MacConfig::default());
        let mut up = ChannelStream::new(ber, seed, 0);
        let mut down = ChannelStream::new(ber, seed, 1);
        let mut seqs = Vec::new();
        for k in 0..count {
            let frame = Frame::data(FrameHeader::new(FrameType::Data, HUB, NODE, 0), vec![k as u8; 10]);
            let mut link = PeerLink { peer: &mut hub, uplink: &mut up, downlink: &mut down, now_ns: 0 };
            seqs.push(node.next_sequence());
            let _ = node.send_with_arq(&frame, &mut link);
        }
        for w in seqs.windows(2) {
            prop_assert_eq!(w[1], w[0].wrapping_add(1));
        }
    }

    #[test]
    fn sequence_wraps_through_poll_loop(count in 250usize..300) {
        let (mut hub, mut node) = connected_pair(MacConfig::default());
        let mut seqs = Vec::new();
        let mut inbox = VecDeque::new();
        for k in 0..count {
            inbox.push_back(Primitive::data_request(HUB, vec![k as u8]).into());
            let frames = tx(&node.poll_step(0, &mut inbox));
            let f = decode_frame(&frames[0]).unwrap();
            seqs.push(f.header.sequence);
            let ack = tx(&hub.receive(0, frames[0].clone()));
            node.receive(0, ack[0].clone());
        }
        for w in seqs.windows(2) {
            prop_assert_eq!(w[1], w[0].wrapping_add(1));
        }
    }

    #[test]
    fn arq_bound(retries in 0u8..8, ber in 0.0f64..0.05, seed in any::<u64>()) {
        let (mut hub, mut node) = connected_pair(MacConfig::new(retries, 30, DEFAULT_DATA_RATE_BPS));
        let mut up = ChannelStream::new(ber, seed, 0);
        let mut down = ChannelStream::new(ber, seed, 1);
        let frame = Frame::data(FrameHeader::new(FrameType::Data, HUB, NODE, 0), vec![3; 30]);
        let before = node.counters().data_frames_sent;
        let mut link = PeerLink { peer: &mut hub, uplink: &mut up, downlink: &mut down, now_ns: 0 };
        let used = match node.send_with_arq(&frame, &mut link) {
            Ok(o) => { prop_assert!(o.success); o.attempts_used }
            Err(MacError::Exhausted { attempts_used }) => attempts_used,
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        prop_assert!((1..=retries as u32 + 1).contains(&used));
        prop_assert_eq!(node.counters().data_frames_sent - before, used as u64);
        prop_assert!(node.pending_ack().is_none());
    }

    #[test]
    fn address_filter(recipient in any::<u8>(), payload in proptest::collection::vec(any::<u8>(), 1..30)) {
        let (mut hub, _) = connected_pair(MacConfig::default());
        let frame = Frame::data(FrameHeader::new(FrameType::Data, Address(recipient), NODE, 0), payload);
        let out = hub.receive(0, encode_frame(&frame).unwrap());
        if recipient != HUB.0 {
            prop_assert!(tx(&out).is_empty());
            prop_assert!(out.is_empty());
        } else {
            prop_assert_eq!(tx(&out).len(), 1);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn simulation_reproducible_and_conserving(seed in any::<u64>(), retries in 0u8..5, payload in 5u8..=30) {
        let cfg = ExperimentConfig {
            duration_s: 1.0,
            seed,
            max_retries: retries,
            payload_len: payload,
            channel: ChannelPreset::Flat(3e-3),
            ..Default::default()
        };
        let a = run_experiment(&cfg).unwrap();
        prop_assert_eq!(&a, &run_experiment(&cfg).unwrap());
        for l in &a.links {
            let c = l.counters;
            prop_assert_eq!(c.s_pkt, c.r_pkt + c.lost_pkt);
            prop_assert!(c.r_frm <= c.s_frm && c.r_pkt <= c.s_pkt && c.s_frm >= c.s_pkt);
        }
        prop_assert!(a.airtime_ns <= cfg.duration_ns());
    }
}

/// Every event a node can see, for exhaustive trace enumeration.
#[derive(Debug, Clone, Copy)]
enum Step {
    Connect,
    Disconnect,
    Data,
    Grant,
    Timer,
    Assign(ConnectionStatus),
    HubDisconnect,
    Ack,
}

const STEPS: [Step; 10] = [
    Step::Connect,
    Step::Disconnect,
    Step::Data,
    Step::Grant,
    Step::Timer,
    Step::Assign(ConnectionStatus::Accepted),
    Step::Assign(ConnectionStatus::CapacityExceeded),
    Step::HubDisconnect,
    Step::Ack,
    Step::Grant,
];

fn params(status: ConnectionStatus) -> ConnectionParams {
    ConnectionParams { status, max_payload: 30, max_retries: 1 }
}

fn apply(node: &mut DeviceState, step: Step, now: u64) -> Vec<Primitive> {
    let ev: Event = match step {
        Step::Connect => Primitive::connect_request(HUB).into(),
        Step::Disconnect => Primitive::disconnect_request(HUB).into(),
        Step::Data => Primitive::data_request(HUB, vec![1, 2, 3]).into(),
        Step::Grant => Event::Grant,
        Step::Timer => return node.poll_step(node.next_deadline().unwrap_or(now), &mut VecDeque::new()),
        Step::Assign(s) => {
            let f = Frame::management(FrameType::ManagementAssignment, NODE, HUB, 0, params(s));
            Primitive::frame_indication(encode_frame(&f).unwrap()).into()
        }
        Step::HubDisconnect => {
            let f = Frame::management(FrameType::ManagementDisconnect, NODE, HUB, 0, params(ConnectionStatus::Accepted));
            Primitive::frame_indication(encode_frame(&f).unwrap()).into()
        }
        Step::Ack => {
            let seq = node.pending_ack().map_or(0, |p| p.sequence);
            Primitive::frame_indication(encode_frame(&Frame::ack(NODE, HUB, 0, seq)).unwrap()).into()
        }
    };
    node.poll_step(now, &mut VecDeque::from([ev]))
}

fn explore(node: &DeviceState, depth: usize, now: u64, visited: &mut u64) {
    *visited += 1;
    if depth == 0 {
        return;
    }
    for &step in &STEPS {
        let mut next = node.clone();
        let out = apply(&mut next, step, now);
        for bytes in out.iter().filter_map(Primitive::as_transmission) {
            let f = decode_frame(bytes).unwrap();
            if f.frame_type() == FrameType::Data {
                assert_eq!(
                    next.connection(),
                    ConnectionState::Connected,
                    "data frame emitted while {:?} after {step:?}",
                    next.connection()
                );
            }
        }
        if let Some(p) = next.pending_ack() {
            assert!(p.attempts_used <= next.config().attempt_limit());
        }
        explore(&next, depth - 1, now + 1, visited);
    }
}

#[test]
fn handshake_safety_exhaustive() {
    let mut cfg = MacConfig::new(1, 30, DEFAULT_DATA_RATE_BPS);
    for access in [AccessMode::Immediate, AccessMode::Polled] {
        cfg.access = access;
        let node = DeviceState::new_node(NODE, cfg.clone());
        let mut visited = 0;
        explore(&node, 5, 0, &mut visited);
        assert_eq!(visited, (0..=5).map(|d| 10u64.pow(d)).sum::<u64>());
    }
}
