use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::channel::splitmix64;

use super::{run_experiment, ConfigError, ExperimentConfig, LinkCounters, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SweepAxis {
    Distance,
    MaxRetries,
    PayloadLen,
}

impl FromStr for SweepAxis {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "distance" | "distance_m" => Ok(SweepAxis::Distance),
            "max_retries" | "retries" => Ok(SweepAxis::MaxRetries),
            "payload_len" | "payload" => Ok(SweepAxis::PayloadLen),
            other => Err(ConfigError::value(
                "axis",
                format!("`{other}` is not distance, max_retries or payload_len"),
            )),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Distance => "distance",
            SweepAxis::MaxRetries => "max_retries",
            SweepAxis::PayloadLen => "payload_len",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub seed: u64,
    /// Summed over all links.
    pub counters: LinkCounters,
}

/// Seed for one sweep point; depends on the value, not its position.
pub fn derive_seed(seed: u64, value: f64) -> u64 {
    splitmix64(seed ^ splitmix64(value.to_bits()))
}

fn integer(key: &str, v: f64, max: u8) -> Result<u8, ConfigError> {
    if v.fract() != 0.0 || !(0.0..=max as f64).contains(&v) {
        return Err(ConfigError::value(key, format!("{v} is not an integer in 0..={max}")));
    }
    Ok(v as u8)
}

fn point(base: &ExperimentConfig, axis: SweepAxis, value: f64) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = base.clone();
    cfg.seed = derive_seed(base.seed, value);
    match axis {
        SweepAxis::Distance => cfg.distances_m = vec![value],
        SweepAxis::MaxRetries => cfg.max_retries = integer("max_retries", value, 127)?,
        SweepAxis::PayloadLen => cfg.payload_len = integer("payload_len", value, u8::MAX)?,
    }
    cfg.validate()?;
    Ok(cfg)
}

/// One experiment per value, run in parallel, rows in value order.
pub fn sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<SweepRow>, SimError> {
    if values.is_empty() {
        return Err(ConfigError::value("values", "empty list").into());
    }
    let configs = values
        .iter()
        .map(|&v| point(base, axis, v))
        .collect::<Result<Vec<_>, _>>()?;
    configs
        .par_iter()
        .zip(values.par_iter())
        .map(|(cfg, &value)| {
            Ok(SweepRow {
                axis,
                value,
                seed: cfg.seed,
                counters: run_experiment(cfg)?.totals(),
            })
        })
        .collect()
}
