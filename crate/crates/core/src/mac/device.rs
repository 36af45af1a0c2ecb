use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use crate::channel::ChannelStream;
use crate::frame::{
    decode_frame, encode_frame, Address, ConnectionParams, ConnectionStatus, Frame, FrameBody,
    FrameError, FrameHeader, FrameType,
};

use super::fragment::{fragment_sdu, Fragment, Reassembler, Reassembly};
use super::primitive::{
    DataServiceBody, Event, ManagementBody, ManagementOutcome, Primitive, PrimitiveKind,
};
use super::{default_cipher, Cipher, MacConfig, MacError, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Hub,
    Node,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectionState {
    Idle,
    Connecting,
    Connected,
    Disconnecting,
}

/// When a device may start a transmission of its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessMode {
    /// Whenever nothing is outstanding.
    Immediate,
    /// Only on [`Event::Grant`].
    Polled,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MacCounters {
    /// Data frame transmissions, retries included.
    pub data_frames_sent: u64,
    /// Transmissions answered by a matching Ack.
    pub data_frames_acked: u64,
    pub packets_started: u64,
    pub packets_delivered: u64,
    pub packets_lost: u64,
    /// Intact data frames accepted from each sender, duplicates included.
    pub data_frames_received: BTreeMap<Address, u64>,
    pub duplicates: u64,
    pub acks_sent: u64,
    pub management_frames_sent: u64,
    pub crc_errors: u64,
    pub malformed: u64,
    pub address_drops: u64,
    pub access_drops: u64,
    pub protocol_errors: u64,
    pub stale_acks: u64,
    pub reassembly_gaps: u64,
    pub rejected_requests: u64,
}

/// Data frame awaiting its Ack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingAck {
    pub peer: Address,
    pub sequence: u8,
    pub attempts_used: u32,
    bytes: Vec<u8>,
    /// `Some` while an attempt is on the air; `None` while waiting to retry.
    deadline: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransmissionOutcome {
    pub success: bool,
    pub attempts_used: u32,
}

#[derive(Debug, Clone)]
struct Handshake {
    bytes: Vec<u8>,
    attempts: u32,
    deadline: Option<u64>,
}

#[derive(Debug, Clone)]
enum RoleState {
    Hub {
        members: BTreeSet<Address>,
    },
    Node {
        hub: Option<Address>,
        connection: ConnectionState,
        handshake: Option<Handshake>,
    },
}

#[derive(Debug, Clone)]
struct OutgoingSdu {
    peer: Address,
    fragments: VecDeque<Fragment>,
    attempts: u32,
    started: bool,
}

/// Per-device MAC state; one poll loop owns it.
#[derive(Debug, Clone)]
pub struct DeviceState {
    address: Address,
    config: MacConfig,
    role: RoleState,
    now_ns: u64,
    next_sequence: u8,
    control_sequence: u8,
    pending_ack: Option<PendingAck>,
    tx_queue: VecDeque<OutgoingSdu>,
    last_accepted: BTreeMap<Address, u8>,
    reassembler: Reassembler,
    cipher: Arc<dyn Cipher>,
    counters: MacCounters,
    trace: Option<Vec<TraceRecord>>,
}

/// Anything that carries an encoded frame to the peer and returns the frames
/// the sender hears back.
pub trait FrameLink {
    fn exchange(&mut self, frame: &[u8]) -> Vec<Vec<u8>>;
}

/// Link to a peer device through a pair of channel streams.
pub struct PeerLink<'a> {
    pub peer: &'a mut DeviceState,
    pub uplink: &'a mut ChannelStream,
    pub downlink: &'a mut ChannelStream,
    pub now_ns: u64,
}

impl FrameLink for PeerLink<'_> {
    fn exchange(&mut self, frame: &[u8]) -> Vec<Vec<u8>> {
        let received = self.uplink.transmit(frame);
        self.peer
            .receive(self.now_ns, received)
            .iter()
            .filter_map(Primitive::as_transmission)
            .map(|bytes| self.downlink.transmit(bytes))
            .collect()
    }
}

impl DeviceState {
    pub fn new_hub(address: Address, config: MacConfig) -> Self {
        Self::new(
            address,
            config,
            RoleState::Hub {
                members: BTreeSet::new(),
            },
        )
    }

    pub fn new_node(address: Address, config: MacConfig) -> Self {
        Self::new(
            address,
            config,
            RoleState::Node {
                hub: None,
                connection: ConnectionState::Idle,
                handshake: None,
            },
        )
    }

    fn new(address: Address, config: MacConfig, role: RoleState) -> Self {
        let reassembler = Reassembler::new(config.reassembly_timeout_ns);
        Self {
            address,
            config,
            role,
            now_ns: 0,
            next_sequence: 0,
            control_sequence: 0,
            pending_ack: None,
            tx_queue: VecDeque::new(),
            last_accepted: BTreeMap::new(),
            reassembler,
            cipher: default_cipher(),
            counters: MacCounters::default(),
            trace: None,
        }
    }

    pub fn with_cipher(mut self, cipher: Arc<dyn Cipher>) -> Self {
        self.cipher = cipher;
        self
    }

    pub fn address(&self) -> Address {
        self.address
    }

    pub fn role(&self) -> Role {
        match self.role {
            RoleState::Hub { .. } => Role::Hub,
            RoleState::Node { .. } => Role::Node,
        }
    }

    pub fn config(&self) -> &MacConfig {
        &self.config
    }

    pub fn set_access(&mut self, access: super::AccessMode) {
        self.config.access = access;
    }

    /// Hubs report `Connected` while they are up.
    pub fn connection(&self) -> ConnectionState {
        match &self.role {
            RoleState::Hub { .. } => ConnectionState::Connected,
            RoleState::Node { connection, .. } => *connection,
        }
    }

    pub fn hub(&self) -> Option<Address> {
        match &self.role {
            RoleState::Hub { .. } => None,
            RoleState::Node { hub, .. } => *hub,
        }
    }

    pub fn members(&self) -> Option<&BTreeSet<Address>> {
        match &self.role {
            RoleState::Hub { members } => Some(members),
            RoleState::Node { .. } => None,
        }
    }

    pub fn next_sequence(&self) -> u8 {
        self.next_sequence
    }

    pub fn pending_ack(&self) -> Option<&PendingAck> {
        self.pending_ack.as_ref()
    }

    pub fn counters(&self) -> &MacCounters {
        &self.counters
    }

    pub fn now_ns(&self) -> u64 {
        self.now_ns
    }

    pub fn set_tracing(&mut self, on: bool) {
        self.trace = if on { Some(Vec::new()) } else { None };
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// A transmission of ours is on the air and its response is not in.
    pub fn awaiting_response(&self) -> bool {
        let handshake = match &self.role {
            RoleState::Node {
                handshake: Some(h), ..
            } => h.deadline.is_some(),
            _ => false,
        };
        handshake
            || self
                .pending_ack
                .as_ref()
                .is_some_and(|p| p.deadline.is_some())
    }

    /// Something would go on the air if medium access were granted now.
    pub fn has_pending_tx(&self) -> bool {
        if self.awaiting_response() {
            return false;
        }
        if let RoleState::Node {
            handshake: Some(_), ..
        } = &self.role
        {
            return true;
        }
        self.pending_ack.is_some() || self.tx_queue.iter().any(|s| self.link_up(s.peer))
    }

    /// Earliest timer that a later empty poll would act on.
    pub fn next_deadline(&self) -> Option<u64> {
        let handshake = match &self.role {
            RoleState::Node {
                handshake: Some(h), ..
            } => h.deadline,
            _ => None,
        };
        [
            handshake,
            self.pending_ack.as_ref().and_then(|p| p.deadline),
            self.reassembler.next_deadline(),
        ]
        .into_iter()
        .flatten()
        .min()
    }

    /// Process at most one event from `inbox`, or advance timers if it is
    /// empty.
    pub fn poll_step(&mut self, now_ns: u64, inbox: &mut VecDeque<Event>) -> Vec<Primitive> {
        self.now_ns = self.now_ns.max(now_ns);
        let mut out = Vec::new();
        match inbox.pop_front() {
            None => self.advance_timers(&mut out),
            Some(Event::Grant) => self.transmit_next(&mut out),
            Some(Event::Primitive(p)) => {
                self.record(&p);
                self.dispatch(p, &mut out);
            }
        }
        self.pump(&mut out);
        for p in &out {
            self.record(p);
        }
        out
    }

    /// Feed received bytes straight through the data transmission module.
    pub fn receive(&mut self, now_ns: u64, bytes: Vec<u8>) -> Vec<Primitive> {
        let mut inbox = VecDeque::from([Event::Primitive(Primitive::frame_indication(bytes))]);
        self.poll_step(now_ns, &mut inbox)
    }

    fn record(&mut self, p: &Primitive) {
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceRecord {
                time_ns: self.now_ns,
                device: self.address,
                family: p.family(),
                kind: p.kind(),
            });
        }
    }

    fn dispatch(&mut self, p: Primitive, out: &mut Vec<Primitive>) {
        match p {
            Primitive::Management {
                kind: PrimitiveKind::Request,
                body,
            } => {
                if self.management_request(body, out).is_err() {
                    self.counters.protocol_errors += 1;
                }
            }
            Primitive::DataService {
                kind: PrimitiveKind::Request,
                body: DataServiceBody::Sdu { peer, data },
            } => self.data_service_request(peer, data, out),
            Primitive::DataTransfer {
                kind: PrimitiveKind::Indication,
                frame,
            } => self.receive_frame(frame, out),
            _ => self.counters.rejected_requests += 1,
        }
    }

    // ---- management service module ----

    /// Management primitive from above or management frame from the PHY.
    pub fn handle_management(
        &mut self,
        event: ManagementEvent,
    ) -> Result<Vec<Primitive>, MacError> {
        let mut out = Vec::new();
        let result = match event {
            ManagementEvent::Primitive(Primitive::Management {
                kind: PrimitiveKind::Request,
                body,
            }) => self.management_request(body, &mut out),
            ManagementEvent::Primitive(_) => Err(MacError::Protocol("not a management request")),
            ManagementEvent::Frame(frame) => self.management_frame(frame, &mut out),
        };
        if result.is_err() {
            self.counters.protocol_errors += 1;
        }
        result?;
        self.pump(&mut out);
        Ok(out)
    }

    fn management_request(
        &mut self,
        body: ManagementBody,
        out: &mut Vec<Primitive>,
    ) -> Result<(), MacError> {
        let params = self.own_params(ConnectionStatus::Accepted);
        let seq = self.take_control_sequence();
        let me = self.address;
        match (&mut self.role, body) {
            (
                RoleState::Node {
                    hub,
                    connection: connection @ ConnectionState::Idle,
                    handshake,
                },
                ManagementBody::Connect { hub: target },
            ) => {
                let frame =
                    Frame::management(FrameType::ManagementRequest, target, me, seq, params);
                *hub = Some(target);
                *connection = ConnectionState::Connecting;
                *handshake = Some(Handshake {
                    bytes: encode_frame(&frame)?,
                    attempts: 0,
                    deadline: None,
                });
                Ok(())
            }
            (
                RoleState::Node {
                    hub: Some(h),
                    connection: connection @ ConnectionState::Connected,
                    handshake,
                },
                ManagementBody::Disconnect { peer },
            ) if peer == *h => {
                let frame =
                    Frame::management(FrameType::ManagementDisconnect, *h, me, seq, params);
                *connection = ConnectionState::Disconnecting;
                *handshake = Some(Handshake {
                    bytes: encode_frame(&frame)?,
                    attempts: 0,
                    deadline: None,
                });
                Ok(())
            }
            (RoleState::Hub { members }, ManagementBody::Disconnect { peer }) => {
                if !members.remove(&peer) {
                    return Err(MacError::NotConnected(peer));
                }
                let frame =
                    Frame::management(FrameType::ManagementDisconnect, peer, me, seq, params);
                self.send_control(&frame, out)?;
                self.drop_queue_for(peer, out);
                out.push(management_status(
                    PrimitiveKind::Confirm,
                    peer,
                    ManagementOutcome::Disconnected,
                ));
                Ok(())
            }
            _ => Err(MacError::Protocol("management request not valid in this state")),
        }
    }

    fn management_frame(&mut self, frame: Frame, out: &mut Vec<Primitive>) -> Result<(), MacError> {
        let FrameBody::Management(params) = frame.body else {
            return Err(MacError::Protocol("not a management frame"));
        };
        let sender = frame.header.sender;
        let me = self.address;
        let capacity = self.config.hub_capacity;
        let own = self.own_params(ConnectionStatus::Accepted);
        match (&mut self.role, frame.header.frame_type) {
            (RoleState::Hub { members }, FrameType::ManagementRequest) => {
                let status = if members.contains(&sender) {
                    ConnectionStatus::Accepted
                } else if members.len() >= capacity {
                    ConnectionStatus::CapacityExceeded
                } else {
                    members.insert(sender);
                    out.push(management_status(
                        PrimitiveKind::Indication,
                        sender,
                        ManagementOutcome::Connected,
                    ));
                    ConnectionStatus::Accepted
                };
                let seq = self.take_control_sequence();
                let reply = Frame::management(
                    FrameType::ManagementAssignment,
                    sender,
                    me,
                    seq,
                    ConnectionParams { status, ..own },
                );
                self.send_control(&reply, out)
            }
            (RoleState::Hub { members }, FrameType::ManagementDisconnect) => {
                let status = if members.remove(&sender) {
                    out.push(management_status(
                        PrimitiveKind::Indication,
                        sender,
                        ManagementOutcome::Disconnected,
                    ));
                    ConnectionStatus::Accepted
                } else {
                    ConnectionStatus::NotConnected
                };
                let seq = self.take_control_sequence();
                let reply = Frame::management(
                    FrameType::ManagementDisconnect,
                    sender,
                    me,
                    seq,
                    ConnectionParams { status, ..own },
                );
                self.send_control(&reply, out)?;
                self.drop_queue_for(sender, out);
                Ok(())
            }
            (
                RoleState::Node {
                    hub,
                    connection,
                    handshake,
                },
                frame_type,
            ) => {
                if *hub != Some(sender) {
                    return Err(MacError::Protocol("management frame from a foreign hub"));
                }
                match (frame_type, *connection) {
                    (FrameType::ManagementAssignment, ConnectionState::Connecting) => {
                        *handshake = None;
                        let outcome = if params.status == ConnectionStatus::Accepted {
                            *connection = ConnectionState::Connected;
                            ManagementOutcome::Connected
                        } else {
                            *connection = ConnectionState::Idle;
                            *hub = None;
                            ManagementOutcome::Rejected(params.status)
                        };
                        out.push(management_status(PrimitiveKind::Confirm, sender, outcome));
                        Ok(())
                    }
                    // Repeated assignment after a lost first reply.
                    (FrameType::ManagementAssignment, ConnectionState::Connected) => Ok(()),
                    (FrameType::ManagementDisconnect, ConnectionState::Disconnecting) => {
                        *handshake = None;
                        *connection = ConnectionState::Idle;
                        *hub = None;
                        out.push(management_status(
                            PrimitiveKind::Confirm,
                            sender,
                            ManagementOutcome::Disconnected,
                        ));
                        self.drop_queue_for(sender, out);
                        Ok(())
                    }
                    (FrameType::ManagementDisconnect, ConnectionState::Connected) => {
                        *connection = ConnectionState::Idle;
                        *hub = None;
                        out.push(management_status(
                            PrimitiveKind::Indication,
                            sender,
                            ManagementOutcome::Disconnected,
                        ));
                        self.drop_queue_for(sender, out);
                        Ok(())
                    }
                    _ => Err(MacError::Protocol("management frame not valid in this state")),
                }
            }
            (RoleState::Hub { .. }, _) => Err(MacError::Protocol("hub received an assignment")),
        }
    }

    fn own_params(&self, status: ConnectionStatus) -> ConnectionParams {
        ConnectionParams {
            status,
            max_payload: self.config.max_payload,
            max_retries: self.config.max_retries,
        }
    }

    fn send_control(&mut self, frame: &Frame, out: &mut Vec<Primitive>) -> Result<(), MacError> {
        let bytes = encode_frame(frame)?;
        if frame.frame_type().is_management() {
            self.counters.management_frames_sent += 1;
        } else {
            self.counters.acks_sent += 1;
        }
        out.push(Primitive::frame_request(bytes));
        Ok(())
    }

    fn take_control_sequence(&mut self) -> u8 {
        let s = self.control_sequence;
        self.control_sequence = s.wrapping_add(1);
        s
    }

    fn link_up(&self, peer: Address) -> bool {
        match &self.role {
            RoleState::Hub { members } => members.contains(&peer),
            RoleState::Node {
                hub, connection, ..
            } => *connection == ConnectionState::Connected && *hub == Some(peer),
        }
    }

    /// Abandon queued and in-flight SDUs for a peer that went away.
    fn drop_queue_for(&mut self, peer: Address, out: &mut Vec<Primitive>) {
        if self.pending_ack.as_ref().is_some_and(|p| p.peer == peer) {
            self.pending_ack = None;
        }
        let mut kept = VecDeque::new();
        for sdu in self.tx_queue.drain(..) {
            if sdu.peer == peer {
                if sdu.started {
                    self.counters.packets_lost += 1;
                }
                out.push(delivery(peer, false, sdu.attempts));
            } else {
                kept.push_back(sdu);
            }
        }
        self.tx_queue = kept;
    }

    // ---- data service module ----

    fn data_service_request(&mut self, peer: Address, data: Vec<u8>, out: &mut Vec<Primitive>) {
        if !self.link_up(peer) {
            self.counters.rejected_requests += 1;
            out.push(delivery(peer, false, 0));
            return;
        }
        match fragment_sdu(&data, self.config.max_payload as usize) {
            Ok(fragments) => self.tx_queue.push_back(OutgoingSdu {
                peer,
                fragments: fragments.into(),
                attempts: 0,
                started: false,
            }),
            Err(_) => {
                self.counters.rejected_requests += 1;
                out.push(delivery(peer, false, 0));
            }
        }
    }

    /// Feed one received data frame to reassembly.
    pub fn reassemble(&mut self, frame: &Frame) -> Result<Reassembly, super::ReassemblyError> {
        let mut payload = frame.payload().unwrap_or_default().to_vec();
        self.cipher.decrypt(&mut payload);
        self.reassembler.accept(&frame.header, payload, self.now_ns)
    }

    // ---- data transmission module ----

    fn receive_frame(&mut self, bytes: Vec<u8>, out: &mut Vec<Primitive>) {
        let frame = match decode_frame(&bytes) {
            Ok(f) => f,
            Err(FrameError::Crc { .. }) => {
                self.counters.crc_errors += 1;
                return;
            }
            Err(_) => {
                self.counters.malformed += 1;
                return;
            }
        };
        if frame.header.recipient != self.address {
            self.counters.address_drops += 1;
            return;
        }
        match frame.frame_type() {
            FrameType::Data => self.receive_data(frame, out),
            FrameType::Ack => self.receive_ack(&frame, out),
            _ => {
                let _ = self.management_frame(frame, out).map_err(|_| {
                    self.counters.protocol_errors += 1;
                });
            }
        }
    }

    fn receive_data(&mut self, frame: Frame, out: &mut Vec<Primitive>) {
        let sender = frame.header.sender;
        if !self.link_up(sender) {
            self.counters.access_drops += 1;
            return;
        }
        let seq = frame.header.sequence;
        let ack_seq = self.take_control_sequence();
        let ack = Frame::ack(sender, self.address, ack_seq, seq);
        // An Ack never fails to encode.
        let _ = self.send_control(&ack, out);
        *self
            .counters
            .data_frames_received
            .entry(sender)
            .or_default() += 1;
        if self.last_accepted.get(&sender) == Some(&seq) {
            self.counters.duplicates += 1;
            return;
        }
        self.last_accepted.insert(sender, seq);
        match self.reassemble(&frame) {
            Ok(Reassembly::Complete(data)) => out.push(Primitive::DataService {
                kind: PrimitiveKind::Indication,
                body: DataServiceBody::Sdu { peer: sender, data },
            }),
            Ok(Reassembly::Pending) => {}
            Err(_) => self.counters.malformed += 1,
        }
    }

    fn matches_pending(&self, frame: &Frame) -> bool {
        match (&self.pending_ack, &frame.body) {
            (Some(p), FrameBody::Ack { acked_sequence }) => {
                frame.header.recipient == self.address
                    && frame.header.sender == p.peer
                    && *acked_sequence == p.sequence
            }
            _ => false,
        }
    }

    fn receive_ack(&mut self, frame: &Frame, out: &mut Vec<Primitive>) {
        if !self
            .pending_ack
            .as_ref()
            .is_some_and(|p| p.deadline.is_some())
            || !self.matches_pending(frame)
        {
            self.counters.stale_acks += 1;
            return;
        }
        self.pending_ack = None;
        self.counters.data_frames_acked += 1;
        let sdu = self.tx_queue.front_mut().expect("pending ack implies sdu in flight");
        sdu.fragments.pop_front();
        if sdu.fragments.is_empty() {
            let done = self.tx_queue.pop_front().expect("checked above");
            self.counters.packets_delivered += 1;
            out.push(delivery(done.peer, true, done.attempts));
        }
    }

    fn take_sequence(&mut self) -> u8 {
        let s = self.next_sequence;
        self.next_sequence = s.wrapping_add(1);
        s
    }

    fn pump(&mut self, out: &mut Vec<Primitive>) {
        if self.config.access == AccessMode::Immediate {
            self.transmit_next(out);
        }
    }

    /// Put the next frame on the air if nothing is outstanding.
    fn transmit_next(&mut self, out: &mut Vec<Primitive>) {
        if self.awaiting_response() {
            return;
        }
        let now = self.now_ns;
        let timeout = self.config.ack_timeout_ns;
        if let RoleState::Node {
            handshake: Some(h), ..
        } = &mut self.role
        {
            h.attempts += 1;
            h.deadline = Some(now + timeout);
            self.counters.management_frames_sent += 1;
            out.push(Primitive::frame_request(h.bytes.clone()));
            return;
        }
        if self.pending_ack.is_none() {
            let Some(pos) = self.tx_queue.iter().position(|s| self.link_up(s.peer)) else {
                return;
            };
            if pos != 0 {
                let sdu = self.tx_queue.remove(pos).expect("index from position");
                self.tx_queue.push_front(sdu);
            }
            let seq = self.take_sequence();
            let me = self.address;
            let sdu = self.tx_queue.front_mut().expect("non-empty");
            if !sdu.started {
                sdu.started = true;
                self.counters.packets_started += 1;
            }
            let frag = sdu.fragments.front().expect("queued sdu has fragments");
            let mut payload = frag.data.clone();
            self.cipher.encrypt(&mut payload);
            let header = FrameHeader {
                frame_type: FrameType::Data,
                recipient: sdu.peer,
                sender: me,
                sequence: seq,
                fragment_index: frag.index,
                last_fragment: frag.last,
            };
            let bytes = encode_frame(&Frame::data(header, payload))
                .expect("fragments respect the payload limit");
            self.pending_ack = Some(PendingAck {
                peer: sdu.peer,
                sequence: seq,
                attempts_used: 0,
                bytes,
                deadline: None,
            });
        }
        let pending = self.pending_ack.as_mut().expect("set above");
        pending.attempts_used += 1;
        pending.deadline = Some(now + timeout);
        self.counters.data_frames_sent += 1;
        if let Some(sdu) = self.tx_queue.front_mut() {
            sdu.attempts += 1;
        }
        out.push(Primitive::frame_request(pending.bytes.clone()));
    }

    fn advance_timers(&mut self, out: &mut Vec<Primitive>) {
        let now = self.now_ns;
        let limit = self.config.attempt_limit();

        let expired = self
            .pending_ack
            .as_ref()
            .and_then(|p| p.deadline)
            .is_some_and(|d| d <= now);
        if expired {
            let pending = self.pending_ack.as_mut().expect("checked");
            pending.deadline = None;
            if pending.attempts_used >= limit {
                self.pending_ack = None;
                self.counters.packets_lost += 1;
                let sdu = self.tx_queue.pop_front().expect("pending ack implies sdu");
                out.push(delivery(sdu.peer, false, sdu.attempts));
            }
        }

        if let RoleState::Node {
            hub,
            connection,
            handshake,
        } = &mut self.role
        {
            if let Some(h) = handshake {
                if h.deadline.is_some_and(|d| d <= now) {
                    h.deadline = None;
                    if h.attempts >= limit {
                        let peer = hub.unwrap_or_default();
                        let outcome = match *connection {
                            ConnectionState::Disconnecting => ManagementOutcome::Disconnected,
                            _ => ManagementOutcome::TimedOut,
                        };
                        *handshake = None;
                        *connection = ConnectionState::Idle;
                        *hub = None;
                        out.push(management_status(PrimitiveKind::Confirm, peer, outcome));
                        self.drop_queue_for(peer, out);
                    }
                }
            }
        }

        let gaps = self.reassembler.expire(now);
        self.counters.reassembly_gaps += gaps.len() as u64;
    }

    /// Stop-and-wait delivery of one data frame over `link`, retrying up to
    /// `max_retries` times. The frame's sender and sequence are overwritten.
    pub fn send_with_arq(
        &mut self,
        frame: &Frame,
        link: &mut dyn FrameLink,
    ) -> Result<TransmissionOutcome, MacError> {
        let FrameBody::Data(payload) = &frame.body else {
            return Err(MacError::NotData);
        };
        let peer = frame.header.recipient;
        if !self.link_up(peer) {
            return Err(MacError::NotConnected(peer));
        }
        if self.pending_ack.is_some() {
            return Err(MacError::Busy);
        }
        let mut payload = payload.clone();
        self.cipher.encrypt(&mut payload);
        let header = FrameHeader {
            sender: self.address,
            sequence: self.next_sequence,
            ..frame.header
        };
        let bytes = encode_frame(&Frame::data(header, payload))?;
        let sequence = self.take_sequence();
        self.counters.packets_started += 1;
        self.pending_ack = Some(PendingAck {
            peer,
            sequence,
            attempts_used: 0,
            bytes: bytes.clone(),
            deadline: None,
        });

        let limit = self.config.attempt_limit();
        for attempt in 1..=limit {
            if let Some(p) = self.pending_ack.as_mut() {
                p.attempts_used = attempt;
            }
            self.counters.data_frames_sent += 1;
            let acked = link.exchange(&bytes).iter().any(|reply| {
                decode_frame(reply).is_ok_and(|f| self.matches_pending(&f))
            });
            if acked {
                self.pending_ack = None;
                self.counters.data_frames_acked += 1;
                self.counters.packets_delivered += 1;
                return Ok(TransmissionOutcome {
                    success: true,
                    attempts_used: attempt,
                });
            }
        }
        self.pending_ack = None;
        self.counters.packets_lost += 1;
        Err(MacError::Exhausted {
            attempts_used: limit,
        })
    }
}

/// Input accepted by [`DeviceState::handle_management`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ManagementEvent {
    Primitive(Primitive),
    Frame(Frame),
}

fn management_status(kind: PrimitiveKind, peer: Address, outcome: ManagementOutcome) -> Primitive {
    Primitive::Management {
        kind,
        body: ManagementBody::Status { peer, outcome },
    }
}

fn delivery(peer: Address, delivered: bool, attempts: u32) -> Primitive {
    Primitive::DataService {
        kind: PrimitiveKind::Confirm,
        body: DataServiceBody::Delivery {
            peer,
            delivered,
            attempts,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HUB: Address = Address(0x00);
    const NODE: Address = Address(0x01);

    fn tx(out: &[Primitive]) -> Vec<Vec<u8>> {
        out.iter()
            .filter_map(Primitive::as_transmission)
            .map(<[u8]>::to_vec)
            .collect()
    }

    fn connect(hub: &mut DeviceState, node: &mut DeviceState) {
        let mut inbox = VecDeque::from([Primitive::connect_request(hub.address()).into()]);
        let req = tx(&node.poll_step(0, &mut inbox));
        let reply = tx(&hub.receive(0, req[0].clone()));
        node.receive(0, reply[0].clone());
        assert_eq!(node.connection(), ConnectionState::Connected);
    }

    fn pair() -> (DeviceState, DeviceState) {
        let mut hub = DeviceState::new_hub(HUB, MacConfig::default());
        let mut node = DeviceState::new_node(NODE, MacConfig::default());
        connect(&mut hub, &mut node);
        (hub, node)
    }

    #[test]
    fn connect_request_emits_management_frame() {
        let mut node = DeviceState::new_node(NODE, MacConfig::default());
        let out = node
            .handle_management(ManagementEvent::Primitive(Primitive::connect_request(HUB)))
            .unwrap();
        assert_eq!(node.connection(), ConnectionState::Connecting);
        let frames = tx(&out);
        assert_eq!(frames.len(), 1);
        let f = decode_frame(&frames[0]).unwrap();
        assert_eq!(f.frame_type(), FrameType::ManagementRequest);
        assert_eq!(f.header.recipient, HUB);
    }

    #[test]
    fn hub_assigns_and_registers() {
        let mut hub = DeviceState::new_hub(HUB, MacConfig::default());
        let req = Frame::management(
            FrameType::ManagementRequest,
            HUB,
            NODE,
            0,
            ConnectionParams {
                status: ConnectionStatus::Accepted,
                max_payload: 30,
                max_retries: 3,
            },
        );
        let out = hub.handle_management(ManagementEvent::Frame(req)).unwrap();
        let reply = decode_frame(&tx(&out)[0]).unwrap();
        assert_eq!(reply.frame_type(), FrameType::ManagementAssignment);
        assert_eq!(reply.header.recipient, NODE);
        assert!(hub.members().unwrap().contains(&NODE));
        assert!(out.iter().any(|p| matches!(
            p,
            Primitive::Management {
                kind: PrimitiveKind::Indication,
                body: ManagementBody::Status { outcome: ManagementOutcome::Connected, .. }
            }
        )));
    }

    #[test]
    fn hub_rejects_beyond_capacity() {
        let mut hub = DeviceState::new_hub(HUB, MacConfig::default());
        for id in 1..=65u8 {
            let mut node = DeviceState::new_node(Address(id), MacConfig::default());
            let mut inbox = VecDeque::from([Primitive::connect_request(HUB).into()]);
            let req = tx(&node.poll_step(0, &mut inbox));
            let reply = tx(&hub.receive(0, req[0].clone()));
            let out = node.receive(0, reply[0].clone());
            if id <= 64 {
                assert_eq!(node.connection(), ConnectionState::Connected);
            } else {
                assert_eq!(node.connection(), ConnectionState::Idle);
                assert!(out.iter().any(|p| matches!(
                    p,
                    Primitive::Management {
                        body: ManagementBody::Status {
                            outcome: ManagementOutcome::Rejected(ConnectionStatus::CapacityExceeded),
                            ..
                        },
                        ..
                    }
                )));
            }
        }
        assert_eq!(hub.members().unwrap().len(), 64);
    }

    #[test]
    fn assignment_while_idle_is_protocol_error() {
        let mut node = DeviceState::new_node(NODE, MacConfig::default());
        let f = Frame::management(
            FrameType::ManagementAssignment,
            NODE,
            HUB,
            0,
            ConnectionParams {
                status: ConnectionStatus::Accepted,
                max_payload: 30,
                max_retries: 3,
            },
        );
        assert!(node.handle_management(ManagementEvent::Frame(f)).is_err());
        assert_eq!(node.counters().protocol_errors, 1);
        assert_eq!(node.connection(), ConnectionState::Idle);
    }

    #[test]
    fn handshake_retries_then_times_out() {
        let mut node = DeviceState::new_node(NODE, MacConfig::default());
        let mut inbox = VecDeque::from([Primitive::connect_request(HUB).into()]);
        let mut sent = tx(&node.poll_step(0, &mut inbox)).len();
        let mut confirm = None;
        while let Some(t) = node.next_deadline() {
            let out = node.poll_step(t, &mut VecDeque::new());
            sent += tx(&out).len();
            confirm = out.into_iter().find(|p| p.family() == crate::mac::PrimitiveFamily::Management);
        }
        assert_eq!(sent, 4);
        assert_eq!(node.connection(), ConnectionState::Idle);
        assert!(matches!(
            confirm,
            Some(Primitive::Management {
                body: ManagementBody::Status { outcome: ManagementOutcome::TimedOut, .. },
                ..
            })
        ));
    }

    #[test]
    fn disconnect_from_node() {
        let (mut hub, mut node) = pair();
        let mut inbox = VecDeque::from([Primitive::disconnect_request(HUB).into()]);
        let req = tx(&node.poll_step(0, &mut inbox));
        assert_eq!(node.connection(), ConnectionState::Disconnecting);
        let reply = tx(&hub.receive(0, req[0].clone()));
        assert!(hub.members().unwrap().is_empty());
        node.receive(0, reply[0].clone());
        assert_eq!(node.connection(), ConnectionState::Idle);
        assert_eq!(node.hub(), None);
    }

    #[test]
    fn disconnect_from_hub() {
        let (mut hub, mut node) = pair();
        let mut inbox = VecDeque::from([Primitive::disconnect_request(NODE).into()]);
        let frames = tx(&hub.poll_step(0, &mut inbox));
        assert!(hub.members().unwrap().is_empty());
        node.receive(0, frames[0].clone());
        assert_eq!(node.connection(), ConnectionState::Idle);
    }

    #[test]
    fn idle_poll_changes_nothing() {
        let (_, mut node) = pair();
        let before = node.counters().clone();
        let out = node.poll_step(10, &mut VecDeque::new());
        assert!(out.is_empty());
        assert_eq!(node.counters(), &before);
        assert_eq!(node.connection(), ConnectionState::Connected);
        assert_eq!(node.now_ns(), 10);
    }

    #[test]
    fn foreign_recipient_dropped_silently() {
        let (mut hub, mut node) = pair();
        let mut inbox = VecDeque::from([Primitive::data_request(HUB, vec![1, 2, 3]).into()]);
        let frames = tx(&node.poll_step(0, &mut inbox));
        let mut f = decode_frame(&frames[0]).unwrap();
        f.header.recipient = Address(0x42);
        let out = hub.receive(0, encode_frame(&f).unwrap());
        assert!(out.is_empty());
        assert_eq!(hub.counters().address_drops, 1);
        assert_eq!(hub.counters().acks_sent, 0);
    }

    #[test]
    fn data_frame_yields_ack_and_indication() {
        let (mut hub, mut node) = pair();
        let mut inbox = VecDeque::from([Primitive::data_request(HUB, vec![9; 25]).into()]);
        let frames = tx(&node.poll_step(0, &mut inbox));
        assert_eq!(frames[0].len(), 25 + 8);
        assert!(node.pending_ack().is_some());
        let out = hub.receive(0, frames[0].clone());
        let ack = decode_frame(&tx(&out)[0]).unwrap();
        assert_eq!(ack.body, FrameBody::Ack { acked_sequence: 0 });
        assert!(out.contains(&Primitive::DataService {
            kind: PrimitiveKind::Indication,
            body: DataServiceBody::Sdu { peer: NODE, data: vec![9; 25] },
        }));
        let done = node.receive(0, encode_frame(&ack).unwrap());
        assert!(node.pending_ack().is_none());
        assert_eq!(done, vec![delivery(HUB, true, 1)]);
    }

    #[test]
    fn fragmented_sdu_reassembles() {
        let (mut hub, mut node) = pair();
        let sdu: Vec<u8> = (0..70).collect();
        let mut inbox = VecDeque::from([Primitive::data_request(HUB, sdu.clone()).into()]);
        let mut frames = tx(&node.poll_step(0, &mut inbox));
        let mut got = None;
        let mut seqs = Vec::new();
        while let Some(frame) = frames.pop() {
            seqs.push(decode_frame(&frame).unwrap().header.sequence);
            let out = hub.receive(0, frame);
            for p in &out {
                if let Primitive::DataService { body: DataServiceBody::Sdu { data, .. }, .. } = p {
                    got = Some(data.clone());
                }
            }
            frames = tx(&node.receive(0, tx(&out)[0].clone()));
        }
        assert_eq!(seqs, vec![0, 1, 2]);
        assert_eq!(got, Some(sdu));
        assert_eq!(node.counters().packets_delivered, 1);
    }

    #[test]
    fn lost_ack_causes_retry_and_duplicate_is_suppressed() {
        let (mut hub, mut node) = pair();
        let mut inbox = VecDeque::from([Primitive::data_request(HUB, vec![5; 4]).into()]);
        let first = tx(&node.poll_step(0, &mut inbox));
        let _lost = hub.receive(0, first[0].clone());
        let t = node.next_deadline().unwrap();
        let retry = tx(&node.poll_step(t, &mut VecDeque::new()));
        assert_eq!(retry, first);
        let out = hub.receive(t, retry[0].clone());
        assert_eq!(hub.counters().duplicates, 1);
        assert_eq!(tx(&out).len(), 1);
        assert!(!out.iter().any(|p| p.family() == crate::mac::PrimitiveFamily::DataService));
        let done = node.receive(t, tx(&out)[0].clone());
        assert_eq!(done, vec![delivery(HUB, true, 2)]);
    }

    #[test]
    fn data_request_before_connect_is_refused() {
        let mut node = DeviceState::new_node(NODE, MacConfig::default());
        let mut inbox = VecDeque::from([Primitive::data_request(HUB, vec![1]).into()]);
        let out = node.poll_step(0, &mut inbox);
        assert_eq!(out, vec![delivery(HUB, false, 0)]);
        assert!(tx(&out).is_empty());
    }

    #[test]
    fn polled_access_waits_for_grant() {
        let (_, mut node) = pair();
        node.set_access(AccessMode::Polled);
        let mut inbox = VecDeque::from([Primitive::data_request(HUB, vec![1]).into()]);
        assert!(tx(&node.poll_step(0, &mut inbox)).is_empty());
        assert!(node.has_pending_tx());
        inbox.push_back(Event::Grant);
        assert_eq!(tx(&node.poll_step(0, &mut inbox)).len(), 1);
        assert!(node.awaiting_response());
    }

    #[test]
    fn arq_perfect_and_dead_channels() {
        let (mut hub, mut node) = pair();
        let frame = Frame::data(FrameHeader::new(FrameType::Data, HUB, NODE, 0), vec![7; 10]);
        let mut up = ChannelStream::new(0.0, 1, 0);
        let mut down = ChannelStream::new(0.0, 1, 1);
        let mut link = PeerLink { peer: &mut hub, uplink: &mut up, downlink: &mut down, now_ns: 0 };
        let ok = node.send_with_arq(&frame, &mut link).unwrap();
        assert_eq!(ok, TransmissionOutcome { success: true, attempts_used: 1 });

        let mut up = ChannelStream::new(1.0, 1, 0);
        let mut down = ChannelStream::new(1.0, 1, 1);
        let mut link = PeerLink { peer: &mut hub, uplink: &mut up, downlink: &mut down, now_ns: 0 };
        assert_eq!(
            node.send_with_arq(&frame, &mut link),
            Err(MacError::Exhausted { attempts_used: 4 })
        );
        assert_eq!(node.counters().data_frames_sent, 5);
        assert_eq!(node.counters().packets_started, 2);
        assert_eq!(node.counters().packets_lost, 1);
        assert!(node.pending_ack().is_none());
    }
}
