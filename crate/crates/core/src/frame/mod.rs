//! Byte-exact frame codec.
//!
//! Every frame starts with a six byte header and ends with a big-endian
//! CRC-16 over all preceding bytes:
//!
//! ```text
//! frame_control(1) | recipient(1) | sender(1) | sequence(1) | fragment_control(1) | payload_len(1) | body | crc(2)
//! ```
//!
//! Data frames carry `payload_len` payload bytes, so their overhead is 8 bytes.
//! Ack frames declare `payload_len = 0` and carry one acked-sequence byte, for
//! a fixed length of 9. Management frames carry 3 bytes of connection
//! parameters.

mod crc;

use std::fmt;

use thiserror::Error;

pub use crc::compute_crc16;

/// Header bytes before the body.
pub const HEADER_LEN: usize = 6;
/// Trailing frame check sequence.
pub const CRC_LEN: usize = 2;
/// Non-payload bytes of a data frame.
pub const DATA_OVERHEAD: usize = HEADER_LEN + CRC_LEN;
/// Encoded length of every Ack frame.
pub const ACK_FRAME_LEN: usize = DATA_OVERHEAD + 1;
/// Body length of management frames.
pub const MANAGEMENT_BODY_LEN: usize = 3;
pub const MAX_PAYLOAD: usize = u8::MAX as usize;
pub const MAX_FRAGMENT_INDEX: u8 = 0x7F;
/// Longest frame the codec can produce.
pub const MAX_FRAME_LEN: usize = MAX_PAYLOAD + DATA_OVERHEAD;

const LAST_FRAGMENT_FLAG: u8 = 0x80;
const FRAME_TYPE_MASK: u8 = 0x07;

/// One-byte device address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Address(pub u8);

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#04x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameType {
    Data,
    Ack,
    ManagementRequest,
    ManagementAssignment,
    ManagementDisconnect,
}

impl FrameType {
    pub const fn code(self) -> u8 {
        match self {
            FrameType::Data => 0,
            FrameType::Ack => 1,
            FrameType::ManagementRequest => 2,
            FrameType::ManagementAssignment => 3,
            FrameType::ManagementDisconnect => 4,
        }
    }

    pub const fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FrameType::Data),
            1 => Some(FrameType::Ack),
            2 => Some(FrameType::ManagementRequest),
            3 => Some(FrameType::ManagementAssignment),
            4 => Some(FrameType::ManagementDisconnect),
            _ => None,
        }
    }

    pub const fn is_management(self) -> bool {
        matches!(
            self,
            FrameType::ManagementRequest
                | FrameType::ManagementAssignment
                | FrameType::ManagementDisconnect
        )
    }
}

impl fmt::Display for FrameType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            FrameType::Data => "data",
            FrameType::Ack => "ack",
            FrameType::ManagementRequest => "management-request",
            FrameType::ManagementAssignment => "management-assignment",
            FrameType::ManagementDisconnect => "management-disconnect",
        };
        f.write_str(name)
    }
}

/// Outcome code carried in management frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConnectionStatus {
    Accepted,
    CapacityExceeded,
    NotConnected,
}

impl ConnectionStatus {
    pub const fn code(self) -> u8 {
        match self {
            ConnectionStatus::Accepted => 0,
            ConnectionStatus::CapacityExceeded => 1,
            ConnectionStatus::NotConnected => 2,
        }
    }

    pub const fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ConnectionStatus::Accepted),
            1 => Some(ConnectionStatus::CapacityExceeded),
            2 => Some(ConnectionStatus::NotConnected),
            _ => None,
        }
    }
}

/// Body of management frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConnectionParams {
    pub status: ConnectionStatus,
    pub max_payload: u8,
    pub max_retries: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FrameHeader {
    pub frame_type: FrameType,
    pub recipient: Address,
    pub sender: Address,
    pub sequence: u8,
    /// 0..=127; the top bit of the wire byte is the last-fragment flag.
    pub fragment_index: u8,
    pub last_fragment: bool,
}

impl FrameHeader {
    pub fn new(frame_type: FrameType, recipient: Address, sender: Address, sequence: u8) -> Self {
        Self {
            frame_type,
            recipient,
            sender,
            sequence,
            fragment_index: 0,
            last_fragment: true,
        }
    }

    fn fragment_control(&self) -> u8 {
        self.fragment_index | if self.last_fragment { LAST_FRAGMENT_FLAG } else { 0 }
    }

    /// Best-effort parse of the first six bytes. `None` if the frame control
    /// byte is not a known frame type.
    fn parse(bytes: &[u8]) -> Option<(Self, u8)> {
        if bytes.len() < HEADER_LEN || bytes[0] & !FRAME_TYPE_MASK != 0 {
            return None;
        }
        let frame_type = FrameType::from_code(bytes[0])?;
        let header = Self {
            frame_type,
            recipient: Address(bytes[1]),
            sender: Address(bytes[2]),
            sequence: bytes[3],
            fragment_index: bytes[4] & !LAST_FRAGMENT_FLAG,
            last_fragment: bytes[4] & LAST_FRAGMENT_FLAG != 0,
        };
        Some((header, bytes[5]))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FrameBody {
    Data(Vec<u8>),
    Ack { acked_sequence: u8 },
    Management(ConnectionParams),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    pub header: FrameHeader,
    pub body: FrameBody,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("{field} value {value} exceeds encoded width (max {max})")]
    Range {
        field: &'static str,
        value: usize,
        max: usize,
    },
    #[error("frame type {frame_type} does not match its body")]
    BodyMismatch { frame_type: FrameType },
    #[error("frame truncated: {len} bytes, need at least {DATA_OVERHEAD}")]
    Truncated { len: usize },
    #[error("crc mismatch: frame carries {found:#06x}, computed {computed:#06x}")]
    Crc {
        /// Parsed on a best-effort basis so the error can be charged to a link.
        header: Option<FrameHeader>,
        found: u16,
        computed: u16,
    },
    #[error("malformed frame: {0}")]
    Malformed(&'static str),
}

impl Frame {
    pub fn data(header: FrameHeader, payload: Vec<u8>) -> Self {
        Self {
            header: FrameHeader {
                frame_type: FrameType::Data,
                ..header
            },
            body: FrameBody::Data(payload),
        }
    }

    pub fn ack(recipient: Address, sender: Address, sequence: u8, acked_sequence: u8) -> Self {
        Self {
            header: FrameHeader::new(FrameType::Ack, recipient, sender, sequence),
            body: FrameBody::Ack { acked_sequence },
        }
    }

    /// `frame_type` must be one of the management types.
    pub fn management(
        frame_type: FrameType,
        recipient: Address,
        sender: Address,
        sequence: u8,
        params: ConnectionParams,
    ) -> Self {
        debug_assert!(frame_type.is_management());
        Self {
            header: FrameHeader::new(frame_type, recipient, sender, sequence),
            body: FrameBody::Management(params),
        }
    }

    pub fn frame_type(&self) -> FrameType {
        self.header.frame_type
    }

    /// Value written into the `payload_len` byte.
    pub fn payload_len(&self) -> usize {
        match &self.body {
            FrameBody::Data(p) => p.len(),
            FrameBody::Ack { .. } => 0,
            FrameBody::Management(_) => MANAGEMENT_BODY_LEN,
        }
    }

    pub fn payload(&self) -> Option<&[u8]> {
        match &self.body {
            FrameBody::Data(p) => Some(p),
            _ => None,
        }
    }

    pub fn encoded_len(&self) -> usize {
        match self.body {
            FrameBody::Ack { .. } => ACK_FRAME_LEN,
            _ => self.payload_len() + DATA_OVERHEAD,
        }
    }

    /// Checksum this frame carries on the wire.
    pub fn fcs(&self) -> Result<u16, FrameError> {
        let bytes = encode_frame(self)?;
        let n = bytes.len();
        Ok(u16::from_be_bytes([bytes[n - 2], bytes[n - 1]]))
    }
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, FrameError> {
    let h = &frame.header;
    if h.fragment_index > MAX_FRAGMENT_INDEX {
        return Err(FrameError::Range {
            field: "fragment_index",
            value: h.fragment_index as usize,
            max: MAX_FRAGMENT_INDEX as usize,
        });
    }
    let consistent = match &frame.body {
        FrameBody::Data(_) => h.frame_type == FrameType::Data,
        FrameBody::Ack { .. } => h.frame_type == FrameType::Ack,
        FrameBody::Management(_) => h.frame_type.is_management(),
    };
    if !consistent {
        return Err(FrameError::BodyMismatch {
            frame_type: h.frame_type,
        });
    }
    let payload_len = frame.payload_len();
    if payload_len > MAX_PAYLOAD {
        return Err(FrameError::Range {
            field: "payload_len",
            value: payload_len,
            max: MAX_PAYLOAD,
        });
    }

    let mut out = Vec::with_capacity(frame.encoded_len());
    out.extend_from_slice(&[
        h.frame_type.code(),
        h.recipient.0,
        h.sender.0,
        h.sequence,
        h.fragment_control(),
        payload_len as u8,
    ]);
    match &frame.body {
        FrameBody::Data(p) => out.extend_from_slice(p),
        FrameBody::Ack { acked_sequence } => out.push(*acked_sequence),
        FrameBody::Management(params) => {
            out.extend_from_slice(&[params.status.code(), params.max_payload, params.max_retries])
        }
    }
    let crc = compute_crc16(&out);
    out.extend_from_slice(&crc.to_be_bytes());
    Ok(out)
}

pub fn decode_frame(bytes: &[u8]) -> Result<Frame, FrameError> {
    if bytes.len() < DATA_OVERHEAD {
        return Err(FrameError::Truncated { len: bytes.len() });
    }
    let (covered, fcs) = bytes.split_at(bytes.len() - CRC_LEN);
    let found = u16::from_be_bytes([fcs[0], fcs[1]]);
    let computed = compute_crc16(covered);
    if found != computed {
        return Err(FrameError::Crc {
            header: FrameHeader::parse(covered).map(|(h, _)| h),
            found,
            computed,
        });
    }

    if covered[0] & !FRAME_TYPE_MASK != 0 {
        return Err(FrameError::Malformed("reserved frame control bits set"));
    }
    let (header, payload_len) =
        FrameHeader::parse(covered).ok_or(FrameError::Malformed("unknown frame type"))?;
    let body = &covered[HEADER_LEN..];
    let body = match header.frame_type {
        FrameType::Data => {
            if body.len() != payload_len as usize {
                return Err(FrameError::Malformed("payload_len disagrees with frame length"));
            }
            FrameBody::Data(body.to_vec())
        }
        FrameType::Ack => {
            if payload_len != 0 || body.len() != 1 {
                return Err(FrameError::Malformed("ack frame must be 9 bytes"));
            }
            FrameBody::Ack {
                acked_sequence: body[0],
            }
        }
        _ => {
            if payload_len as usize != MANAGEMENT_BODY_LEN || body.len() != MANAGEMENT_BODY_LEN {
                return Err(FrameError::Malformed("management body must be 3 bytes"));
            }
            let status = ConnectionStatus::from_code(body[0])
                .ok_or(FrameError::Malformed("unknown connection status"))?;
            FrameBody::Management(ConnectionParams {
                status,
                max_payload: body[1],
                max_retries: body[2],
            })
        }
    };
    Ok(Frame { header, body })
}

/// Multi-line hex and field listing of an encoded frame.
pub fn dump(bytes: &[u8]) -> String {
    let hex: Vec<String> = bytes.iter().map(|b| format!("{b:02x}")).collect();
    let mut out = format!("bytes ({}): {}\n", bytes.len(), hex.join(" "));
    match decode_frame(bytes) {
        Ok(frame) => {
            let h = &frame.header;
            out.push_str(&format!("type: {}\n", h.frame_type));
            out.push_str(&format!("recipient: {}\n", h.recipient));
            out.push_str(&format!("sender: {}\n", h.sender));
            out.push_str(&format!("sequence: {}\n", h.sequence));
            out.push_str(&format!(
                "fragment: {} (last: {})\n",
                h.fragment_index, h.last_fragment
            ));
            out.push_str(&format!("payload_len: {}\n", frame.payload_len()));
            match &frame.body {
                FrameBody::Data(p) => {
                    let hex: Vec<String> = p.iter().map(|b| format!("{b:02x}")).collect();
                    out.push_str(&format!("payload: {}\n", hex.join(" ")));
                }
                FrameBody::Ack { acked_sequence } => {
                    out.push_str(&format!("acked_sequence: {acked_sequence}\n"));
                }
                FrameBody::Management(p) => {
                    out.push_str(&format!(
                        "status: {:?}\nmax_payload: {}\nmax_retries: {}\n",
                        p.status, p.max_payload, p.max_retries
                    ));
                }
            }
            let n = bytes.len();
            out.push_str(&format!(
                "fcs: {:#06x} (ok)\n",
                u16::from_be_bytes([bytes[n - 2], bytes[n - 1]])
            ));
        }
        Err(e) => out.push_str(&format!("error: {e}\n")),
    }
    out
}
