//! MAC engine: the management service, data service and data transmission
//! modules driven by a single poll loop per device.
//!
//! A device consumes [`Event`]s one at a time in [`DeviceState::poll_step`]
//! and emits [`Primitive`]s: data-transfer requests carry encoded frames to the
//! PHY, confirms and indications go to the layer above. With an empty inbox a
//! poll step advances the Ack, handshake and reassembly timers.

mod device;
mod fragment;
mod primitive;

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub use device::{
    AccessMode, ConnectionState, DeviceState, FrameLink, MacCounters, ManagementEvent, PeerLink,
    PendingAck, Role, TransmissionOutcome,
};
pub use fragment::{fragment_sdu, Fragment, Reassembler, Reassembly, ReassemblyError};
pub use primitive::{
    DataServiceBody, Event, ManagementBody, ManagementOutcome, Primitive, PrimitiveFamily,
    PrimitiveKind,
};

use crate::frame::{Address, FrameError, MAX_FRAME_LEN};

/// A hub serves at most this many nodes.
pub const HUB_CAPACITY: usize = 64;
pub const DEFAULT_DATA_RATE_BPS: u64 = 121_400;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MacError {
    #[error("protocol error: {0}")]
    Protocol(&'static str),
    #[error("empty sdu")]
    EmptySdu,
    #[error("max payload {0} outside 1..=255")]
    MaxPayload(usize),
    #[error("sdu of {sdu_len} bytes needs more than 128 fragments at {max_payload} bytes each")]
    TooManyFragments { sdu_len: usize, max_payload: usize },
    #[error("no connection to {0}")]
    NotConnected(Address),
    #[error("a transmission is already awaiting its ack")]
    Busy,
    #[error("not a data frame")]
    NotData,
    #[error("retry budget exhausted after {attempts_used} attempts")]
    Exhausted { attempts_used: u32 },
    #[error(transparent)]
    Frame(#[from] FrameError),
}

/// Time on air for `bytes` at `rate_bps`, rounded up to whole nanoseconds.
pub fn airtime_ns(bytes: usize, rate_bps: u64) -> u64 {
    let bits = bytes as u128 * 8 * 1_000_000_000;
    bits.div_ceil(rate_bps as u128) as u64
}

/// Ack timeout: twice the airtime of a maximum-size frame.
pub fn ack_timeout_ns(rate_bps: u64) -> u64 {
    2 * airtime_ns(MAX_FRAME_LEN, rate_bps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacConfig {
    pub max_retries: u8,
    pub max_payload: u8,
    pub data_rate_bps: u64,
    pub ack_timeout_ns: u64,
    pub reassembly_timeout_ns: u64,
    pub hub_capacity: usize,
    pub access: AccessMode,
}

impl MacConfig {
    pub fn new(max_retries: u8, max_payload: u8, data_rate_bps: u64) -> Self {
        let ack_timeout = ack_timeout_ns(data_rate_bps);
        Self {
            max_retries,
            max_payload,
            data_rate_bps,
            ack_timeout_ns: ack_timeout,
            reassembly_timeout_ns: ack_timeout * 16 * (max_retries as u64 + 1),
            hub_capacity: HUB_CAPACITY,
            access: AccessMode::Immediate,
        }
    }

    pub fn attempt_limit(&self) -> u32 {
        self.max_retries as u32 + 1
    }
}

impl Default for MacConfig {
    fn default() -> Self {
        Self::new(3, 30, DEFAULT_DATA_RATE_BPS)
    }
}

/// Payload protection applied before the CRC is written.
pub trait Cipher: fmt::Debug + Send + Sync {
    fn encrypt(&self, payload: &mut [u8]);
    fn decrypt(&self, payload: &mut [u8]);
}

/// Leaves payloads untouched.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCipher;

impl Cipher for IdentityCipher {
    fn encrypt(&self, _payload: &mut [u8]) {}
    fn decrypt(&self, _payload: &mut [u8]) {}
}

pub(crate) fn default_cipher() -> Arc<dyn Cipher> {
    Arc::new(IdentityCipher)
}

/// One line of a primitive trace: `<time_ns> <device> <family> <kind>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub time_ns: u64,
    pub device: Address,
    pub family: PrimitiveFamily,
    pub kind: PrimitiveKind,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {}",
            self.time_ns, self.device, self.family, self.kind
        )
    }
}
