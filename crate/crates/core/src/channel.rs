//! Binary symmetric channel over whole frames.
//!
//! Every bit of a frame is flipped independently with probability `ber`. The
//! randomness for a link comes from a ChaCha8 stream keyed by the experiment
//! seed and addressed by a 64-bit stream id, so each link draws from its own
//! reproducible substream regardless of how many other links exist.
//!
//! Distance enters only through a calibration table mapping metres to BER.
//! The presets are built from frame error rate targets at the reference
//! payload by inverting the payload/FER model; they are calibration data, not
//! a propagation model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::analytics::{ber_for_fer, DEFAULT_J_MAX};

/// Payload length at which the preset FER targets hold.
pub const REFERENCE_PAYLOAD: u32 = 10;

/// (distance in metres, target FER) for the over-the-air preset.
pub const WIRELESS_FER_TARGETS: [(f64, f64); 5] = [
    (1.0, 0.004),
    (2.0, 0.005),
    (4.0, 0.006),
    (5.0, 0.009),
    (10.0, 0.015),
];

/// (distance in metres, target FER) for the cabled reference preset.
pub const WIRED_FER_TARGETS: [(f64, f64); 5] = [
    (1.0, 0.003),
    (2.0, 0.003),
    (4.0, 0.003),
    (5.0, 0.003),
    (10.0, 0.003),
];

// Above this BER, per-bit draws are cheaper than geometric gap sampling.
const GAP_SAMPLING_LIMIT: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error("bit error rate {0} outside [0, 1]")]
    Ber(f64),
    #[error("distance must be positive, got {0} m")]
    Distance(f64),
    #[error("invalid distance map: {0}")]
    Map(&'static str),
}

/// Ordered `(distance_m, ber)` calibration points.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap {
    points: Vec<(f64, f64)>,
}

impl DistanceMap {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, ChannelError> {
        if points.is_empty() {
            return Err(ChannelError::Map("no calibration points"));
        }
        for &(d, ber) in &points {
            if !(d > 0.0) || !d.is_finite() {
                return Err(ChannelError::Distance(d));
            }
            if !(0.0..=1.0).contains(&ber) {
                return Err(ChannelError::Ber(ber));
            }
        }
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(ChannelError::Map("distances must be strictly increasing"));
            }
            if w[1].1 < w[0].1 {
                return Err(ChannelError::Map("ber must be non-decreasing with distance"));
            }
        }
        Ok(Self { points })
    }

    /// Calibrate from `(distance_m, fer)` targets by inverting the payload/FER
    /// model at `reference_payload`.
    pub fn from_fer_targets(
        targets: &[(f64, f64)],
        reference_payload: u32,
    ) -> Result<Self, ChannelError> {
        let points = targets
            .iter()
            .map(|&(d, fer)| {
                ber_for_fer(fer, reference_payload as f64, DEFAULT_J_MAX)
                    .map(|ber| (d, ber))
                    .map_err(|_| ChannelError::Ber(fer))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(points)
    }

    pub fn wireless() -> Self {
        Self::from_fer_targets(&WIRELESS_FER_TARGETS, REFERENCE_PAYLOAD)
            .expect("wireless preset is well-formed")
    }

    pub fn wired() -> Self {
        Self::from_fer_targets(&WIRED_FER_TARGETS, REFERENCE_PAYLOAD)
            .expect("wired preset is well-formed")
    }

    /// Single-point map: the same BER at every distance.
    pub fn flat(ber: f64) -> Result<Self, ChannelError> {
        Self::new(vec![(1.0, ber)])
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Piecewise-linear interpolation, clamped at both ends.
    pub fn ber_at(&self, distance_m: f64) -> Result<f64, ChannelError> {
        if !(distance_m > 0.0) || !distance_m.is_finite() {
            return Err(ChannelError::Distance(distance_m));
        }
        let first = self.points[0];
        let last = self.points[self.points.len() - 1];
        if distance_m <= first.0 {
            return Ok(first.1);
        }
        if distance_m >= last.0 {
            return Ok(last.1);
        }
        let i = self.points.partition_point(|&(d, _)| d <= distance_m);
        let (d0, b0) = self.points[i - 1];
        let (d1, b1) = self.points[i];
        if distance_m == d0 {
            return Ok(b0);
        }
        let t = (distance_m - d0) / (d1 - d0);
        Ok(b0 + t * (b1 - b0))
    }
}

/// Link model: a BER, the experiment seed, and the distance calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelModel {
    ber: f64,
    seed: u64,
    distance_map: DistanceMap,
}

impl ChannelModel {
    pub fn new(ber: f64, seed: u64) -> Result<Self, ChannelError> {
        if !(0.0..=1.0).contains(&ber) {
            return Err(ChannelError::Ber(ber));
        }
        Ok(Self {
            ber,
            seed,
            distance_map: DistanceMap::flat(ber)?,
        })
    }

    /// Model whose BER is taken from `map` at `distance_m`.
    pub fn at_distance(map: DistanceMap, distance_m: f64, seed: u64) -> Result<Self, ChannelError> {
        let ber = map.ber_at(distance_m)?;
        Ok(Self {
            ber,
            seed,
            distance_map: map,
        })
    }

    pub fn ber(&self) -> f64 {
        self.ber
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn distance_map(&self) -> &DistanceMap {
        &self.distance_map
    }

    pub fn ber_for_distance(&self, distance_m: f64) -> Result<f64, ChannelError> {
        self.distance_map.ber_at(distance_m)
    }

    pub fn stream(&self, stream_id: u64) -> ChannelStream {
        ChannelStream::new(self.ber, self.seed, stream_id)
    }

    /// One-shot transmission from the start of stream `stream_id`.
    pub fn transmit(&self, bytes: &[u8], stream_id: u64) -> Vec<u8> {
        self.stream(stream_id).transmit(bytes)
    }
}

pub fn ber_for_distance(distance_m: f64, model: &ChannelModel) -> Result<f64, ChannelError> {
    model.ber_for_distance(distance_m)
}

/// Direction of a star link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Uplink,
    Downlink,
}

/// Stream id for one direction of the link to `node`. Depends only on the
/// node and direction, so adding nodes never shifts another link's stream.
pub fn link_stream_id(node: u8, direction: Direction) -> u64 {
    let dir = match direction {
        Direction::Uplink => 0u64,
        Direction::Downlink => 1,
    };
    splitmix64(((node as u64) << 1 | dir) ^ 0x5742_414e_4c49_4e4b)
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stateful position within one substream.
#[derive(Debug, Clone)]
pub struct ChannelStream {
    ber: f64,
    log_keep: f64,
    rng: ChaCha8Rng,
}

impl ChannelStream {
    pub fn new(ber: f64, seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            ber,
            log_keep: (-ber).ln_1p(),
            rng,
        }
    }

    pub fn ber(&self) -> f64 {
        self.ber
    }

    pub fn transmit(&mut self, bytes: &[u8]) -> Vec<u8> {
        let mut out = bytes.to_vec();
        self.corrupt(&mut out);
        out
    }

    /// Flip bits in place; returns the number flipped.
    pub fn corrupt(&mut self, bytes: &mut [u8]) -> usize {
        let nbits = bytes.len() * 8;
        if self.ber <= 0.0 || nbits == 0 {
            return 0;
        }
        if self.ber >= 1.0 {
            bytes.iter_mut().for_each(|b| *b = !*b);
            return nbits;
        }
        let mut flips = 0;
        if self.ber > GAP_SAMPLING_LIMIT {
            for bit in 0..nbits {
                if self.rng.random::<f64>() < self.ber {
                    bytes[bit / 8] ^= 0x80 >> (bit % 8);
                    flips += 1;
                }
            }
            return flips;
        }
        // Gap to the next flip is geometric: P(gap >= k) = (1 - ber)^k.
        let mut pos = 0usize;
        loop {
            let u = 1.0 - self.rng.random::<f64>();
            let gap = (u.ln() / self.log_keep).floor();
            if gap >= (nbits - pos) as f64 {
                break;
            }
            pos += gap as usize;
            bytes[pos / 8] ^= 0x80 >> (pos % 8);
            flips += 1;
            pos += 1;
            if pos >= nbits {
                break;
            }
        }
        flips
    }
}
