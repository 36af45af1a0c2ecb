//! SDU fragmentation and reassembly.
//!
//! Fragments of one SDU go out with consecutive sequence numbers, so the
//! receiver keys partial SDUs by `(sender, sequence - fragment_index)`.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::frame::{Address, FrameHeader, MAX_FRAGMENT_INDEX, MAX_PAYLOAD};

use super::MacError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fragment {
    pub index: u8,
    pub last: bool,
    pub data: Vec<u8>,
}

/// Split `sdu` into fragments of at most `max_payload` bytes.
pub fn fragment_sdu(sdu: &[u8], max_payload: usize) -> Result<Vec<Fragment>, MacError> {
    if max_payload == 0 || max_payload > MAX_PAYLOAD {
        return Err(MacError::MaxPayload(max_payload));
    }
    if sdu.is_empty() {
        return Err(MacError::EmptySdu);
    }
    let count = sdu.len().div_ceil(max_payload);
    if count > MAX_FRAGMENT_INDEX as usize + 1 {
        return Err(MacError::TooManyFragments {
            sdu_len: sdu.len(),
            max_payload,
        });
    }
    Ok(sdu
        .chunks(max_payload)
        .enumerate()
        .map(|(i, chunk)| Fragment {
            index: i as u8,
            last: i + 1 == count,
            data: chunk.to_vec(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReassemblyError {
    #[error("sdu from {sender} (group {group}) timed out missing fragments {missing:?}")]
    Gap {
        sender: Address,
        group: u8,
        missing: Vec<u8>,
        /// Whether the last fragment had arrived.
        last_seen: bool,
    },
    #[error("fragment {index} from {sender} lies beyond last fragment {last}")]
    BeyondLast { sender: Address, index: u8, last: u8 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reassembly {
    Complete(Vec<u8>),
    Pending,
}

#[derive(Debug, Clone)]
struct Partial {
    fragments: BTreeMap<u8, Vec<u8>>,
    last: Option<u8>,
    started_ns: u64,
}

#[derive(Debug, Clone)]
pub struct Reassembler {
    timeout_ns: u64,
    partial: BTreeMap<(Address, u8), Partial>,
}

impl Reassembler {
    pub fn new(timeout_ns: u64) -> Self {
        Self {
            timeout_ns,
            partial: BTreeMap::new(),
        }
    }

    pub fn pending(&self) -> usize {
        self.partial.len()
    }

    /// Earliest time a partial SDU will expire.
    pub fn next_deadline(&self) -> Option<u64> {
        self.partial
            .values()
            .map(|p| p.started_ns.saturating_add(self.timeout_ns))
            .min()
    }

    pub fn accept(
        &mut self,
        header: &FrameHeader,
        payload: Vec<u8>,
        now_ns: u64,
    ) -> Result<Reassembly, ReassemblyError> {
        let sender = header.sender;
        let index = header.fragment_index;
        if index == 0 && header.last_fragment {
            return Ok(Reassembly::Complete(payload));
        }
        let group = header.sequence.wrapping_sub(index);
        let entry = self.partial.entry((sender, group)).or_insert_with(|| Partial {
            fragments: BTreeMap::new(),
            last: None,
            started_ns: now_ns,
        });
        if let Some(last) = entry.last {
            if index > last {
                return Err(ReassemblyError::BeyondLast {
                    sender,
                    index,
                    last,
                });
            }
        }
        if header.last_fragment {
            if let Some((&max_seen, _)) = entry.fragments.last_key_value() {
                if max_seen > index {
                    return Err(ReassemblyError::BeyondLast {
                        sender,
                        index: max_seen,
                        last: index,
                    });
                }
            }
            entry.last = Some(index);
        }
        entry.fragments.insert(index, payload);
        match entry.last {
            Some(last) if entry.fragments.len() == last as usize + 1 => {
                let done = self.partial.remove(&(sender, group)).expect("entry exists");
                Ok(Reassembly::Complete(
                    done.fragments.into_values().flatten().collect(),
                ))
            }
            _ => Ok(Reassembly::Pending),
        }
    }

    /// Drop partial SDUs older than the timeout.
    pub fn expire(&mut self, now_ns: u64) -> Vec<ReassemblyError> {
        let timeout = self.timeout_ns;
        let expired: Vec<(Address, u8)> = self
            .partial
            .iter()
            .filter(|(_, p)| now_ns.saturating_sub(p.started_ns) >= timeout)
            .map(|(k, _)| *k)
            .collect();
        expired
            .into_iter()
            .map(|key| {
                let p = self.partial.remove(&key).expect("key collected above");
                let upper = p
                    .last
                    .or_else(|| p.fragments.keys().next_back().copied())
                    .unwrap_or(0);
                let missing = (0..=upper)
                    .filter(|i| !p.fragments.contains_key(i))
                    .collect();
                ReassemblyError::Gap {
                    sender: key.0,
                    group: key.1,
                    missing,
                    last_seen: p.last.is_some(),
                }
            })
            .collect()
    }
}
