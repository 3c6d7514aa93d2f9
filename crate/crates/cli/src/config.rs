//! Line-oriented configuration file.
//!
//! ```text
//! # comment
//! [link]
//! pair_rate = 96428.6
//! dark_rate_bob = 800, 800, 800, 800
//! outages = 30-40, 100-112
//!
//! [clock.bob]
//! start_offset = 5.217e-3
//! ```
//!
//! Sections: `link`, `clock.alice`, `clock.bob`, `settings`, `polarization`,
//! `correlator`, `transport`. Every key is optional and defaults to the
//! nominal-profile value. Unknown sections or keys are errors.

use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use qlink_core::sim::{ClockModel, SimConfig};
use qlink_core::sync::CorrelatorConfig;
use qlink_core::transport::{DEFAULT_PORT, MAX_BLOCK_TAGS};

pub const PORT_ENV: &str = "QLINK_PORT";
pub const BLOCK_TAGS_ENV: &str = "QLINK_BLOCK_TAGS";

#[derive(Debug, Clone, PartialEq)]
pub struct TransportConfig {
    pub host: String,
    pub port: u16,
    pub block_tags: usize,
    /// Tags per second; 0 sends as fast as possible.
    pub rate_limit: f64,
    pub timeout: f64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            host: "127.0.0.1".into(),
            port: DEFAULT_PORT,
            block_tags: MAX_BLOCK_TAGS,
            rate_limit: 0.0,
            timeout: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub sim: SimConfig,
    pub correlator: CorrelatorConfig,
    pub transport: TransportConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value", n + 1))?;
            cfg.set(&section, key.trim(), value.trim())
                .with_context(|| format!("line {}", n + 1))?;
        }
        cfg.sim.validate().map_err(|e| anyhow!("{e}"))?;
        cfg.correlator.validate().map_err(|e| anyhow!("{e}"))?;
        Ok(cfg)
    }

    /// Applies `QLINK_PORT` and `QLINK_BLOCK_TAGS` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(PORT_ENV) {
            self.transport.port = parse(&v).with_context(|| format!("{PORT_ENV}={v}"))?;
        }
        if let Ok(v) = std::env::var(BLOCK_TAGS_ENV) {
            self.transport.block_tags =
                parse(&v).with_context(|| format!("{BLOCK_TAGS_ENV}={v}"))?;
        }
        if self.transport.block_tags == 0 || self.transport.block_tags > MAX_BLOCK_TAGS {
            bail!("block_tags must be between 1 and {MAX_BLOCK_TAGS}");
        }
        Ok(())
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let link = &mut self.sim.link;
        let c = &mut self.correlator;
        let t = &mut self.transport;
        match (section, key) {
            ("link", "pair_rate") => link.pair_rate = parse(v)?,
            ("link", "eta_alice") => link.eta_alice = parse(v)?,
            ("link", "eta_bob") => link.eta_bob = parse(v)?,
            ("link", "dark_rate_alice") => link.dark_rate_alice = parse_four(v)?,
            ("link", "dark_rate_bob") => link.dark_rate_bob = parse_four(v)?,
            ("link", "background_rate_bob") => link.background_rate_bob = parse(v)?,
            ("link", "fluctuation_sigma") => link.fluctuation_sigma = parse(v)?,
            ("link", "jitter_sigma") => link.jitter_sigma = parse(v)?,
            ("link", "outages") => link.outages = parse_intervals(v)?,
            ("clock.alice", k) => set_clock(&mut self.sim.alice_clock, k, v)?,
            ("clock.bob", k) => set_clock(&mut self.sim.bob_clock, k, v)?,
            ("settings", "alice_angles") => self.sim.settings.alice_angles = parse_four(v)?,
            ("settings", "bob_angles") => self.sim.settings.bob_angles = parse_four(v)?,
            ("settings", "basis_split") => self.sim.settings.basis_split = parse(v)?,
            ("polarization", "visibility_hv") => self.sim.polarization.visibility_hv = parse(v)?,
            ("polarization", "visibility_pm") => self.sim.polarization.visibility_pm = parse(v)?,
            ("polarization", "rotation_error") => self.sim.polarization.rotation_error = parse(v)?,
            ("correlator", "coincidence_window") => c.coincidence_window = parse(v)?,
            ("correlator", "fine_bin") => c.fine_bin = parse(v)?,
            ("correlator", "coarse_bin") => c.coarse_bin = parse(v)?,
            ("correlator", "search_span_gps") => c.search_span_gps = parse(v)?,
            ("correlator", "search_span_no_gps") => c.search_span_no_gps = parse(v)?,
            ("correlator", "lock_threshold") => c.lock_threshold = parse(v)?,
            ("correlator", "block_span") => c.block_span = parse(v)?,
            ("correlator", "drift_window") => c.drift_window = parse(v)?,
            ("correlator", "max_failures") => c.max_failures = parse(v)?,
            ("transport", "host") => t.host = v.to_string(),
            ("transport", "port") => t.port = parse(v)?,
            ("transport", "block_tags") => t.block_tags = parse(v)?,
            ("transport", "rate_limit") => t.rate_limit = parse(v)?,
            ("transport", "timeout") => t.timeout = parse(v)?,
            ("", k) => bail!("key {k:?} outside any section"),
            (s, k) => bail!("unknown key {k:?} in section [{s}]"),
        }
        Ok(())
    }
}

fn set_clock(clock: &mut ClockModel, key: &str, v: &str) -> Result<()> {
    match key {
        "start_offset" => clock.start_offset = parse(v)?,
        "drift_fraction" => clock.drift_fraction = parse(v)?,
        "phase_noise_sigma" => clock.phase_noise_sigma = parse(v)?,
        "gps_jitter_sigma" => clock.gps_jitter_sigma = parse(v)?,
        "gps_enabled" => clock.gps_enabled = parse(v)?,
        k => bail!("unknown clock key {k:?}"),
    }
    Ok(())
}

fn parse<T: FromStr>(v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| anyhow!("invalid value {v:?}: {e}"))
}

/// One value for all four channels, or four comma-separated values.
fn parse_four(v: &str) -> Result<[f64; 4]> {
    let parts: Vec<f64> = v
        .split(',')
        .map(|p| parse(p.trim()))
        .collect::<Result<_>>()?;
    match parts[..] {
        [x] => Ok([x; 4]),
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => bail!("expected 1 or 4 values, got {}", parts.len()),
    }
}

fn parse_intervals(v: &str) -> Result<Vec<(f64, f64)>> {
    v.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let (s, e) = p
                .split_once('-')
                .ok_or_else(|| anyhow!("interval {p:?} is not start-end"))?;
            Ok((parse(s.trim())?, parse(e.trim())?))
        })
        .collect()
}
