//! `key = value` experiment configuration.
//!
//! ```text
//! # six nodes at table distances
//! node_count = 6
//! distance_m = 1, 2, 5, 10, 1, 2
//! payload_len = 10
//! max_retries = 3
//! duration_s = 2400
//! channel = wireless
//! seed = 7
//! ```
//!
//! Keys: `node_count`, `distance_m` (one value for every node or one per
//! node), `payload_len` (alias `payload`), `max_retries`, `data_rate_bps`,
//! `duration_s`, `seed`, `turnaround_us`, `channel` (`wired`, `wireless`,
//! `table` or `flat`), `channel_table` (`d:ber` pairs), `ber` (implies
//! `channel = flat`), `trace` (`true`/`false`).

use std::str::FromStr;

use thiserror::Error;

use crate::channel::DistanceMap;

use super::{ChannelPreset, ExperimentConfig, MAX_NODES};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {message}")]
    Value { key: String, message: String },
}

impl ConfigError {
    pub fn value(key: &str, message: impl Into<String>) -> Self {
        ConfigError::Value {
            key: key.to_string(),
            message: message.into(),
        }
    }

    /// Key the error is about, if any.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Syntax { .. } => None,
            ConfigError::UnknownKey(k) | ConfigError::Value { key: k, .. } => Some(k),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e: T::Err| ConfigError::value(key, format!("`{value}`: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>, ConfigError> {
    value.split(',').map(|v| parse_num(key, v)).collect()
}

fn parse_table(value: &str) -> Result<DistanceMap, ConfigError> {
    let key = "channel_table";
    let points = value
        .split(',')
        .map(|pair| {
            let (d, b) = pair
                .split_once(':')
                .ok_or_else(|| ConfigError::value(key, format!("`{pair}` is not `distance:ber`")))?;
            Ok((parse_num(key, d)?, parse_num(key, b)?))
        })
        .collect::<Result<Vec<_>, ConfigError>>()?;
    DistanceMap::new(points).map_err(|e| ConfigError::value(key, e.to_string()))
}

impl ExperimentConfig {
    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let (key, value) = (key.trim(), value.trim());
        match key {
            "node_count" => self.node_count = parse_num(key, value)?,
            "distance_m" => self.distances_m = parse_list(key, value)?,
            "payload_len" | "payload" => self.payload_len = parse_num(key, value)?,
            "max_retries" => self.max_retries = parse_num(key, value)?,
            "data_rate_bps" => self.data_rate_bps = parse_num(key, value)?,
            "duration_s" => self.duration_s = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "turnaround_us" => self.turnaround_us = parse_num(key, value)?,
            "trace" => self.trace = parse_num(key, value)?,
            "ber" => self.channel = ChannelPreset::Flat(parse_num(key, value)?),
            "channel_table" => self.channel = ChannelPreset::Table(parse_table(value)?),
            "channel" => {
                self.channel = match value {
                    "wired" => ChannelPreset::Wired,
                    "wireless" => ChannelPreset::Wireless,
                    "table" | "flat" if self.channel.name() == value => self.channel.clone(),
                    "table" => {
                        return Err(ConfigError::value(key, "set `channel_table` instead"))
                    }
                    "flat" => return Err(ConfigError::value(key, "set `ber` instead")),
                    other => {
                        return Err(ConfigError::value(
                            key,
                            format!("`{other}` is not wired, wireless, table or flat"),
                        ))
                    }
                }
            }
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Parse a whole config file on top of the defaults, then validate.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| ConfigError::value(kv, "override must be `key=value`"))?;
        self.set(k, v)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(1..=MAX_NODES).contains(&self.node_count) {
            return Err(ConfigError::value(
                "node_count",
                format!("{} outside 1..={MAX_NODES}", self.node_count),
            ));
        }
        if self.distances_m.len() != 1 && self.distances_m.len() != self.node_count {
            return Err(ConfigError::value(
                "distance_m",
                format!(
                    "{} values for {} nodes; give one or one per node",
                    self.distances_m.len(),
                    self.node_count
                ),
            ));
        }
        if let Some(d) = self.distances_m.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
            return Err(ConfigError::value("distance_m", format!("{d} is not positive")));
        }
        if self.payload_len == 0 {
            return Err(ConfigError::value("payload_len", "must be at least 1"));
        }
        if self.max_retries > 127 {
            return Err(ConfigError::value("max_retries", "at most 127"));
        }
        if self.data_rate_bps == 0 {
            return Err(ConfigError::value("data_rate_bps", "must be positive"));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(ConfigError::value("duration_s", "must be positive"));
        }
        if !self.turnaround_us.is_finite() || self.turnaround_us < 0.0 {
            return Err(ConfigError::value("turnaround_us", "must be non-negative"));
        }
        if let ChannelPreset::Flat(b) = self.channel {
            if !(0.0..=1.0).contains(&b) {
                return Err(ConfigError::value("ber", format!("{b} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Settings as `key = value` lines that [`ExperimentConfig::parse`]
    /// reads back to an equal config.
    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| {
            v.iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(", ")
        };
        let mut s = format!(
            "node_count = {}\ndistance_m = {}\npayload_len = {}\nmax_retries = {}\n\
             data_rate_bps = {}\nduration_s = {}\nseed = {}\nturnaround_us = {}\ntrace = {}\n",
            self.node_count,
            list(&self.distances_m),
            self.payload_len,
            self.max_retries,
            self.data_rate_bps,
            self.duration_s,
            self.seed,
            self.turnaround_us,
            self.trace,
        );
        match &self.channel {
            ChannelPreset::Wired | ChannelPreset::Wireless => {
                s += &format!("channel = {}\n", self.channel.name())
            }
            ChannelPreset::Flat(b) => s += &format!("ber = {b}\n"),
            ChannelPreset::Table(map) => {
                let pts: Vec<String> = map.points().iter().map(|(d, b)| format!("{d}:{b}")).collect();
                s += &format!("channel_table = {}\n", pts.join(", "));
            }
        }
        s
    }
}

/// Parse sweep values: `1,2,5`, `a..b` (integer steps) or `a..b step s`.
pub fn parse_values(text: &str) -> Result<Vec<f64>, ConfigError> {
    let key = "values";
    let text = text.trim();
    if text.is_empty() {
        return Err(ConfigError::value(key, "empty list"));
    }
    let Some((lo, rest)) = text.split_once("..") else {
        return parse_list(key, text);
    };
    let (hi, step) = match rest.split_once("step") {
        Some((hi, step)) => (hi, parse_num::<f64>(key, step)?),
        None => (rest, 1.0),
    };
    let lo: f64 = parse_num(key, lo)?;
    let hi: f64 = parse_num(key, hi)?;
    if !(step > 0.0) || !step.is_finite() {
        return Err(ConfigError::value(key, "step must be positive"));
    }
    if hi < lo {
        return Err(ConfigError::value(key, format!("empty range {lo}..{hi}")));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    if n > 1_000_000 {
        return Err(ConfigError::value(key, "range too long"));
    }
    Ok((0..=n).map(|i| lo + i as f64 * step).collect())
}
