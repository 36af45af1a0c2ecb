//! Star-topology discrete-event simulator.
//!
//! One hub and up to 64 nodes share a single medium in virtual time. The hub
//! grants the medium round-robin to nodes with something to send; a grant
//! covers one transmission and its response or timeout. Nodes are saturated:
//! each keeps one packet outstanding and issues the next on confirm, as long
//! as the worst-case packet time still fits in the run.
//!
//! Frame counters are kept per exchange: `s_frm` counts data frame attempts
//! and `r_frm` those whose data frame and Ack both arrived intact, the event
//! the FER model describes. `r_frm_hub` counts data frames the hub received
//! intact regardless of the Ack's fate.

mod config;
mod engine;
mod sweep;

use thiserror::Error;

use crate::channel::{ChannelError, DistanceMap};
use crate::frame::Address;
use crate::mac::{TraceRecord, DEFAULT_DATA_RATE_BPS};

pub use config::{parse_values, ConfigError};
pub use engine::run_experiment;
pub use sweep::{derive_seed, sweep, SweepAxis, SweepRow};

pub const MAX_NODES: usize = 64;
pub const HUB_ADDRESS: Address = Address(0x00);

#[derive(Debug, Clone, PartialEq)]
pub enum ChannelPreset {
    Wired,
    Wireless,
    /// Explicit distance-to-BER calibration.
    Table(DistanceMap),
    /// The same BER at every distance.
    Flat(f64),
}

impl ChannelPreset {
    pub fn name(&self) -> &'static str {
        match self {
            ChannelPreset::Wired => "wired",
            ChannelPreset::Wireless => "wireless",
            ChannelPreset::Table(_) => "table",
            ChannelPreset::Flat(_) => "flat",
        }
    }

    pub fn distance_map(&self) -> Result<DistanceMap, ChannelError> {
        match self {
            ChannelPreset::Wired => Ok(DistanceMap::wired()),
            ChannelPreset::Wireless => Ok(DistanceMap::wireless()),
            ChannelPreset::Table(m) => Ok(m.clone()),
            ChannelPreset::Flat(b) => DistanceMap::flat(*b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub node_count: usize,
    /// One distance for every node, or one per node.
    pub distances_m: Vec<f64>,
    pub payload_len: u8,
    pub max_retries: u8,
    pub data_rate_bps: u64,
    pub duration_s: f64,
    pub seed: u64,
    /// Gap between a reception and the reply, and between grants.
    pub turnaround_us: f64,
    pub channel: ChannelPreset,
    /// Record primitive traces.
    pub trace: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            node_count: 6,
            distances_m: vec![1.0, 2.0, 5.0, 10.0, 1.0, 2.0],
            payload_len: 10,
            max_retries: 3,
            data_rate_bps: DEFAULT_DATA_RATE_BPS,
            duration_s: 2400.0,
            seed: 1,
            turnaround_us: 50.0,
            channel: ChannelPreset::Wireless,
            trace: false,
        }
    }
}

impl ExperimentConfig {
    pub fn distance_of(&self, node: usize) -> f64 {
        if self.distances_m.len() == 1 {
            self.distances_m[0]
        } else {
            self.distances_m[node]
        }
    }

    pub fn duration_ns(&self) -> u64 {
        (self.duration_s * 1e9).round() as u64
    }

    pub fn turnaround_ns(&self) -> u64 {
        (self.turnaround_us * 1e3).round() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// Frame and packet tallies for one link or a set of links.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkCounters {
    pub s_frm: u64,
    pub r_frm: u64,
    pub s_pkt: u64,
    pub r_pkt: u64,
    pub lost_pkt: u64,
    pub r_frm_hub: u64,
}

fn error_rate(sent: u64, received: u64) -> f64 {
    if sent == 0 {
        f64::NAN
    } else {
        (sent - received) as f64 / sent as f64
    }
}

impl LinkCounters {
    /// `(s_frm - r_frm) / s_frm`; NaN when nothing was sent.
    pub fn fer(&self) -> f64 {
        error_rate(self.s_frm, self.r_frm)
    }

    /// `(s_pkt - r_pkt) / s_pkt`; NaN when nothing was sent.
    pub fn per(&self) -> f64 {
        error_rate(self.s_pkt, self.r_pkt)
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self {
            s_frm: self.s_frm + other.s_frm,
            r_frm: self.r_frm + other.r_frm,
            s_pkt: self.s_pkt + other.s_pkt,
            r_pkt: self.r_pkt + other.r_pkt,
            lost_pkt: self.lost_pkt + other.lost_pkt,
            r_frm_hub: self.r_frm_hub + other.r_frm_hub,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkReport {
    pub node: Address,
    pub distance_m: f64,
    pub ber: f64,
    pub counters: LinkCounters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub links: Vec<LinkReport>,
    /// Virtual time of the last event.
    pub end_time_ns: u64,
    /// Sum of on-air time over every transmission.
    pub airtime_ns: u64,
    pub trace: Vec<TraceRecord>,
}

impl ExperimentResult {
    pub fn totals(&self) -> LinkCounters {
        self.links
            .iter()
            .fold(LinkCounters::default(), |acc, l| acc.merge(&l.counters))
    }
}
