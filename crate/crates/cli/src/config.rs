//! Config file loading. Every value is optional; command-line flags take
//! precedence over the file, and the file over built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use resync::destination::SyncPolicy;
use resync::model::{DigestAlgorithm, Timestamp};
use resync::simulator::SimConfig;
use resync::transport::TransportConfig;
use serde::Deserialize;

use crate::UsageError;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub log: LogSection,
    pub source: SourceSection,
    pub destination: DestinationSection,
    pub simulator: SimulatorSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogSection {
    pub level: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSection {
    pub root: Option<PathBuf>,
    pub base_uri: Option<String>,
    pub list_base: Option<String>,
    pub digests: Option<Vec<String>>,
    pub exclude: Option<Vec<String>>,
    pub changelist_period: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DestinationSection {
    pub apply_deletes: Option<bool>,
    pub max_parallel_transfers: Option<usize>,
    pub verify_digests: Option<bool>,
    pub stale_wins: Option<bool>,
    pub timeout: Option<String>,
    pub retries: Option<u32>,
    pub backoff: Option<String>,
    pub max_redirects: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorSection {
    pub seed: Option<u64>,
    pub n_initial: Option<usize>,
    pub event_rate: Option<f64>,
    pub p_create: Option<f64>,
    pub p_update: Option<f64>,
    pub p_delete: Option<f64>,
    pub body_size_min: Option<usize>,
    pub body_size_max: Option<usize>,
    pub duration: Option<f64>,
    pub start: Option<String>,
    pub burst: Option<bool>,
    /// URL at which the simulator's web root is served.
    pub publish_base: Option<String>,
    pub changelist_period: Option<String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| {
            UsageError::Config(format!("{}: {}", path.display(), e.message())).into()
        })
    }
}

pub fn parse_duration(what: &str, text: &str) -> Result<Duration, UsageError> {
    humantime::parse_duration(text).map_err(|e| UsageError::Flag(format!("{what}: {text:?}: {e}")))
}

pub fn parse_period(text: &str) -> Result<Duration, UsageError> {
    let d = parse_duration("changelist period", text)?;
    if d.as_secs() == 0 || d.subsec_nanos() != 0 {
        return Err(UsageError::Flag(format!("changelist period {text:?} must be a whole number of seconds")));
    }
    Ok(d)
}

pub fn parse_digests(labels: &[String]) -> Result<Vec<DigestAlgorithm>, UsageError> {
    if labels.is_empty() {
        return Err(UsageError::Flag("at least one digest algorithm is required".into()));
    }
    labels
        .iter()
        .map(|l| DigestAlgorithm::from_label(l).ok_or_else(|| UsageError::Flag(format!("unknown digest {l:?}"))))
        .collect()
}

pub fn check_base(what: &str, uri: &str) -> Result<(), UsageError> {
    if resync::model::validate_uri(uri).is_err() || !uri.ends_with('/') {
        return Err(UsageError::Flag(format!("{what} must be an absolute URI ending in '/', got {uri:?}")));
    }
    Ok(())
}

/// Flags that override the destination section.
#[derive(Debug, Default)]
pub struct DestinationFlags {
    pub keep_deletes: bool,
    pub no_verify: bool,
    pub stale_wins: bool,
    pub parallel: Option<usize>,
    pub timeout: Option<String>,
    pub retries: Option<u32>,
}

impl DestinationSection {
    pub fn resolve(&self, flags: &DestinationFlags) -> Result<(SyncPolicy, TransportConfig), UsageError> {
        let defaults = SyncPolicy::default();
        let policy = SyncPolicy {
            apply_deletes: !flags.keep_deletes && self.apply_deletes.unwrap_or(defaults.apply_deletes),
            max_parallel_transfers: flags
                .parallel
                .or(self.max_parallel_transfers)
                .unwrap_or(defaults.max_parallel_transfers),
            verify_digests: !flags.no_verify && self.verify_digests.unwrap_or(defaults.verify_digests),
            stale_wins: flags.stale_wins || self.stale_wins.unwrap_or(defaults.stale_wins),
        };
        if policy.max_parallel_transfers == 0 {
            return Err(UsageError::Flag("max_parallel_transfers must be at least 1".into()));
        }
        let mut transport = TransportConfig::default();
        if let Some(t) = flags.timeout.as_ref().or(self.timeout.as_ref()) {
            transport.timeout = parse_duration("timeout", t)?;
        }
        if let Some(b) = &self.backoff {
            transport.backoff = parse_duration("backoff", b)?;
        }
        if let Some(r) = flags.retries.or(self.retries) {
            transport.retries = r;
        }
        if let Some(r) = self.max_redirects {
            transport.max_redirects = r;
        }
        Ok((policy, transport))
    }
}

/// Flags that override the simulator section.
#[derive(Debug, Default)]
pub struct SimulatorFlags {
    pub seed: Option<u64>,
    pub duration: Option<f64>,
    pub publish_base: Option<String>,
    pub period: Option<String>,
}

pub struct ResolvedSimulator {
    pub config: SimConfig,
    pub publish_base: String,
    pub period: Duration,
}

/// Directory below the web root that holds the simulated tree.
pub const SIM_DATA_DIR: &str = "data";

impl SimulatorSection {
    pub fn resolve(&self, flags: &SimulatorFlags) -> Result<ResolvedSimulator, UsageError> {
        let d = SimConfig::default();
        let publish_base = flags
            .publish_base
            .clone()
            .or_else(|| self.publish_base.clone())
            .unwrap_or_else(|| "http://127.0.0.1:8080/".into());
        check_base("publish_base", &publish_base)?;
        let start = match &self.start {
            Some(s) => s.parse::<Timestamp>().map_err(|e| UsageError::Config(format!("simulator.start: {e}")))?,
            None => d.start,
        };
        let config = SimConfig {
            seed: flags.seed.or(self.seed).unwrap_or(d.seed),
            n_initial: self.n_initial.unwrap_or(d.n_initial),
            event_rate: self.event_rate.unwrap_or(d.event_rate),
            p_create: self.p_create.unwrap_or(d.p_create),
            p_update: self.p_update.unwrap_or(d.p_update),
            p_delete: self.p_delete.unwrap_or(d.p_delete),
            body_size_min: self.body_size_min.unwrap_or(d.body_size_min),
            body_size_max: self.body_size_max.unwrap_or(d.body_size_max),
            duration: flags.duration.or(self.duration).unwrap_or(d.duration),
            start,
            base_uri: format!("{publish_base}{SIM_DATA_DIR}/"),
            burst: self.burst.unwrap_or(d.burst),
        };
        config.validate().map_err(|e| UsageError::Config(e.to_string()))?;
        let period = parse_period(flags.period.as_deref().or(self.changelist_period.as_deref()).unwrap_or("1d"))?;
        Ok(ResolvedSimulator { config, publish_base, period })
    }
}
