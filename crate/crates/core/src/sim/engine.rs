use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use crate::channel::{link_stream_id, ChannelStream, Direction};
use crate::frame::{decode_frame, Address};
use crate::mac::{
    airtime_ns, AccessMode, DataServiceBody, DeviceState, Event, MacConfig, ManagementBody,
    ManagementOutcome, Primitive,
};

use super::{
    ExperimentConfig, ExperimentResult, LinkCounters, LinkReport, SimError, HUB_ADDRESS,
};

#[derive(Debug)]
enum Action {
    Grant(usize),
    ToHub(Vec<u8>),
    ToNode(usize, Vec<u8>),
    Deadline(usize),
}

#[derive(Debug)]
struct Scheduled {
    time: u64,
    seq: u64,
    action: Action,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

// Reversed: BinaryHeap is a max-heap.
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

struct Engine {
    hub: DeviceState,
    nodes: Vec<DeviceState>,
    uplink: Vec<ChannelStream>,
    downlink: Vec<ChannelStream>,
    queue: BinaryHeap<Scheduled>,
    seq: u64,
    now: u64,
    end: u64,
    turnaround: u64,
    rate: u64,
    payload_len: usize,
    /// Longest a packet can take from request to final confirm.
    packet_budget: u64,
    holder: Option<usize>,
    grant_scheduled: bool,
    medium_free: u64,
    cursor: usize,
    sdu_counter: Vec<u64>,
    airtime: u64,
}

fn node_address(i: usize) -> Address {
    Address(i as u8 + 1)
}

impl Engine {
    fn schedule(&mut self, time: u64, action: Action) {
        self.seq += 1;
        self.queue.push(Scheduled {
            time,
            seq: self.seq,
            action,
        });
    }

    fn fits(&self, t: u64) -> bool {
        t.saturating_add(self.packet_budget) <= self.end
    }

    fn submit(&mut self, i: usize, p: Primitive) {
        let mut inbox = VecDeque::from([Event::Primitive(p)]);
        let out = self.nodes[i].poll_step(self.now, &mut inbox);
        self.node_outputs(i, out);
    }

    fn next_sdu(&mut self, i: usize) {
        if !self.fits(self.now) {
            return;
        }
        let k = self.sdu_counter[i];
        self.sdu_counter[i] += 1;
        let data = (0..self.payload_len)
            .map(|j| (k as usize).wrapping_add(j) as u8)
            .collect();
        self.submit(i, Primitive::data_request(HUB_ADDRESS, data));
    }

    fn node_outputs(&mut self, i: usize, out: Vec<Primitive>) {
        for p in out {
            match p {
                Primitive::DataTransfer { .. } => {
                    if let Some(bytes) = p.as_transmission() {
                        let air = airtime_ns(bytes.len(), self.rate);
                        self.airtime += air;
                        let rx = self.uplink[i].transmit(bytes);
                        self.schedule(self.now + air, Action::ToHub(rx));
                        if let Some(d) = self.nodes[i].next_deadline() {
                            self.schedule(d, Action::Deadline(i));
                        }
                    }
                }
                Primitive::Management {
                    body: ManagementBody::Status { outcome, .. },
                    ..
                } => match outcome {
                    ManagementOutcome::Connected => self.next_sdu(i),
                    ManagementOutcome::TimedOut | ManagementOutcome::Rejected(_) => {
                        if self.fits(self.now) {
                            self.submit(i, Primitive::connect_request(HUB_ADDRESS));
                        }
                    }
                    ManagementOutcome::Disconnected => {}
                },
                Primitive::DataService {
                    body: DataServiceBody::Delivery { .. },
                    ..
                } => self.next_sdu(i),
                _ => {}
            }
        }
    }

    fn release_if_done(&mut self, i: usize) {
        if self.holder == Some(i) && !self.nodes[i].awaiting_response() {
            self.holder = None;
            self.medium_free = self.now + self.turnaround;
        }
    }

    fn maybe_grant(&mut self) {
        if self.holder.is_some() || self.grant_scheduled {
            return;
        }
        let n = self.nodes.len();
        let ready = (0..n)
            .map(|k| (self.cursor + k) % n)
            .find(|&i| self.nodes[i].has_pending_tx());
        if let Some(i) = ready {
            self.cursor = (i + 1) % n;
            self.grant_scheduled = true;
            self.schedule(self.medium_free.max(self.now), Action::Grant(i));
        }
    }

    fn step(&mut self, action: Action) {
        match action {
            Action::Grant(i) => {
                self.grant_scheduled = false;
                if !self.nodes[i].has_pending_tx() {
                    return;
                }
                self.holder = Some(i);
                let mut inbox = VecDeque::from([Event::Grant]);
                let out = self.nodes[i].poll_step(self.now, &mut inbox);
                self.node_outputs(i, out);
                self.release_if_done(i);
            }
            Action::ToHub(bytes) => {
                let out = self.hub.receive(self.now, bytes);
                for bytes in out.iter().filter_map(Primitive::as_transmission) {
                    let to = decode_frame(bytes)
                        .expect("hub emits well-formed frames")
                        .header
                        .recipient;
                    let j = to.0 as usize - 1;
                    let air = airtime_ns(bytes.len(), self.rate);
                    self.airtime += air;
                    let rx = self.downlink[j].transmit(bytes);
                    self.schedule(self.now + self.turnaround + air, Action::ToNode(j, rx));
                }
            }
            Action::ToNode(j, bytes) => {
                let out = self.nodes[j].receive(self.now, bytes);
                self.node_outputs(j, out);
                self.release_if_done(j);
            }
            Action::Deadline(i) => {
                if self.nodes[i].next_deadline().is_some_and(|d| d <= self.now) {
                    let out = self.nodes[i].poll_step(self.now, &mut VecDeque::new());
                    self.node_outputs(i, out);
                    self.release_if_done(i);
                }
            }
        }
    }
}

/// Run one experiment to completion. Deterministic in the config.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult, SimError> {
    config.validate()?;
    let map = config.channel.distance_map()?;
    let mut mac = MacConfig::new(config.max_retries, config.payload_len, config.data_rate_bps);
    mac.access = AccessMode::Polled;
    let turnaround = config.turnaround_ns();
    let n = config.node_count;

    let mut bers = Vec::with_capacity(n);
    let mut nodes = Vec::with_capacity(n);
    let mut uplink = Vec::with_capacity(n);
    let mut downlink = Vec::with_capacity(n);
    for i in 0..n {
        let ber = map.ber_at(config.distance_of(i))?;
        bers.push(ber);
        let addr = node_address(i);
        let mut node = DeviceState::new_node(addr, mac.clone());
        node.set_tracing(config.trace);
        nodes.push(node);
        uplink.push(ChannelStream::new(ber, config.seed, link_stream_id(addr.0, Direction::Uplink)));
        downlink.push(ChannelStream::new(
            ber,
            config.seed,
            link_stream_id(addr.0, Direction::Downlink),
        ));
    }
    let mut hub = DeviceState::new_hub(HUB_ADDRESS, mac.clone());
    hub.set_tracing(config.trace);

    let slot = mac.ack_timeout_ns + turnaround;
    let mut engine = Engine {
        hub,
        nodes,
        uplink,
        downlink,
        queue: BinaryHeap::new(),
        seq: 0,
        now: 0,
        end: config.duration_ns(),
        turnaround,
        rate: config.data_rate_bps,
        payload_len: config.payload_len as usize,
        packet_budget: mac.attempt_limit() as u64 * n as u64 * slot,
        holder: None,
        grant_scheduled: false,
        medium_free: 0,
        cursor: 0,
        sdu_counter: vec![0; n],
        airtime: 0,
    };

    for i in 0..n {
        if engine.fits(0) {
            engine.submit(i, Primitive::connect_request(HUB_ADDRESS));
        }
    }
    loop {
        engine.maybe_grant();
        let Some(ev) = engine.queue.pop() else { break };
        engine.now = ev.time;
        engine.step(ev.action);
    }

    let hub_rx = &engine.hub.counters().data_frames_received;
    let links = engine
        .nodes
        .iter()
        .enumerate()
        .map(|(i, node)| {
            let c = node.counters();
            LinkReport {
                node: node.address(),
                distance_m: config.distance_of(i),
                ber: bers[i],
                counters: LinkCounters {
                    s_frm: c.data_frames_sent,
                    r_frm: c.data_frames_acked,
                    s_pkt: c.packets_started,
                    r_pkt: c.packets_delivered,
                    lost_pkt: c.packets_lost,
                    r_frm_hub: hub_rx.get(&node.address()).copied().unwrap_or(0),
                },
            }
        })
        .collect();

    let mut trace = Vec::new();
    if config.trace {
        trace.extend(engine.hub.take_trace());
        for node in &mut engine.nodes {
            trace.extend(node.take_trace());
        }
        trace.sort_by_key(|r| (r.time_ns, r.device));
    }

    Ok(ExperimentResult {
        links,
        end_time_ns: engine.now,
        airtime_ns: engine.airtime,
        trace,
    })
}
