use std::fmt;

use crate::frame::{Address, ConnectionStatus};

/// The three primitive families, one per polling module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrimitiveFamily {
    Management,
    DataService,
    DataTransfer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    Request,
    Confirm,
    Indication,
}

impl fmt::Display for PrimitiveFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrimitiveFamily::Management => "management",
            PrimitiveFamily::DataService => "data-service",
            PrimitiveFamily::DataTransfer => "data-transfer",
        })
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrimitiveKind::Request => "request",
            PrimitiveKind::Confirm => "confirm",
            PrimitiveKind::Indication => "indication",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManagementOutcome {
    Connected,
    Rejected(ConnectionStatus),
    Disconnected,
    /// Handshake gave up after the retry budget.
    TimedOut,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ManagementBody {
    Connect { hub: Address },
    Disconnect { peer: Address },
    Status {
        peer: Address,
        outcome: ManagementOutcome,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataServiceBody {
    /// Request: SDU for `peer`. Indication: SDU received from `peer`.
    Sdu { peer: Address, data: Vec<u8> },
    /// Confirm for a previously requested SDU.
    Delivery {
        peer: Address,
        delivered: bool,
        /// Transmission attempts spent over all fragments.
        attempts: u32,
    },
}

/// Message exchanged between the MAC modules, the layer above, and the PHY.
///
/// Data-transfer primitives carry encoded frames: a request hands a frame to
/// the PHY, an indication delivers received bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Primitive {
    Management {
        kind: PrimitiveKind,
        body: ManagementBody,
    },
    DataService {
        kind: PrimitiveKind,
        body: DataServiceBody,
    },
    DataTransfer {
        kind: PrimitiveKind,
        frame: Vec<u8>,
    },
}

impl Primitive {
    pub fn family(&self) -> PrimitiveFamily {
        match self {
            Primitive::Management { .. } => PrimitiveFamily::Management,
            Primitive::DataService { .. } => PrimitiveFamily::DataService,
            Primitive::DataTransfer { .. } => PrimitiveFamily::DataTransfer,
        }
    }

    pub fn kind(&self) -> PrimitiveKind {
        match self {
            Primitive::Management { kind, .. }
            | Primitive::DataService { kind, .. }
            | Primitive::DataTransfer { kind, .. } => *kind,
        }
    }

    pub fn connect_request(hub: Address) -> Self {
        Primitive::Management {
            kind: PrimitiveKind::Request,
            body: ManagementBody::Connect { hub },
        }
    }

    pub fn disconnect_request(peer: Address) -> Self {
        Primitive::Management {
            kind: PrimitiveKind::Request,
            body: ManagementBody::Disconnect { peer },
        }
    }

    pub fn data_request(peer: Address, data: Vec<u8>) -> Self {
        Primitive::DataService {
            kind: PrimitiveKind::Request,
            body: DataServiceBody::Sdu { peer, data },
        }
    }

    /// Bytes arriving from the PHY.
    pub fn frame_indication(frame: Vec<u8>) -> Self {
        Primitive::DataTransfer {
            kind: PrimitiveKind::Indication,
            frame,
        }
    }

    pub(crate) fn frame_request(frame: Vec<u8>) -> Self {
        Primitive::DataTransfer {
            kind: PrimitiveKind::Request,
            frame,
        }
    }

    /// Frame handed to the PHY, if this is a data-transfer request.
    pub fn as_transmission(&self) -> Option<&[u8]> {
        match self {
            Primitive::DataTransfer {
                kind: PrimitiveKind::Request,
                frame,
            } => Some(frame),
            _ => None,
        }
    }
}

/// Input to a device's poll loop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    Primitive(Primitive),
    /// Medium access granted by the hub's polling schedule.
    Grant,
}

impl From<Primitive> for Event {
    fn from(p: Primitive) -> Self {
        Event::Primitive(p)
    }
}
