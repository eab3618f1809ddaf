//! Domain types shared by the source, destination and codec layers.
//!
//! Everything here is a plain value: no I/O happens in this module. Each
//! aggregate carries a `validate` method that every deserialization path
//! runs before handing a value to callers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, NaiveDateTime, NaiveTime, TimeZone, Timelike, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Maximum number of entries a single non-index document may carry.
pub const MAX_DOCUMENT_ENTRIES: usize = 50_000;

/// Maximum serialized size of a single document, in bytes.
pub const MAX_DOCUMENT_BYTES: usize = 50 * 1024 * 1024;

/// Violations of the model invariants.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("not an absolute URI: {0}")]
    BadUri(String),
    #[error("duplicate URI: {0}")]
    DuplicateUri(String),
    #[error("document carries {0} entries (limit {MAX_DOCUMENT_ENTRIES})")]
    Oversize(usize),
    #[error("index document carries resource-level data: {0}")]
    EntryInIndex(String),
    #[error("invalid resource metadata: {0}")]
    BadMetadata(String),
    #[error("change list out of order at {0}")]
    Unordered(String),
    #[error("invalid inventory: {0}")]
    Inventory(String),
    #[error("invalid destination state: {0}")]
    State(String),
}

/// A UTC instant at whole-second precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(DateTime<Utc>);

/// Error returned for strings that are not W3C datetimes.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("not a W3C datetime: {0:?}")]
pub struct DatetimeError(pub String);

impl Timestamp {
    /// Truncates any sub-second component.
    pub fn from_datetime(dt: DateTime<Utc>) -> Self {
        Timestamp(dt.with_nanosecond(0).expect("zero nanoseconds is always valid"))
    }

    pub fn from_unix(secs: i64) -> Option<Self> {
        Utc.timestamp_opt(secs, 0).single().map(Timestamp)
    }

    pub fn now() -> Self {
        Self::from_datetime(Utc::now())
    }

    pub fn unix(&self) -> i64 {
        self.0.timestamp()
    }

    pub fn as_datetime(&self) -> DateTime<Utc> {
        self.0
    }

    pub fn plus_seconds(&self, secs: i64) -> Self {
        Timestamp(self.0 + chrono::Duration::seconds(secs))
    }

    /// Parses any of the W3C datetime profile forms used by Sitemaps
    /// (`YYYY`, `YYYY-MM`, `YYYY-MM-DD`, `YYYY-MM-DDThh:mmTZD`,
    /// `YYYY-MM-DDThh:mm:ssTZD`, `YYYY-MM-DDThh:mm:ss.sTZD`).
    pub fn parse_w3c(s: &str) -> Result<Self, DatetimeError> {
        let err = || DatetimeError(s.to_string());
        let s = s.trim();
        let date_only = |d: NaiveDate| Timestamp(Utc.from_utc_datetime(&d.and_time(NaiveTime::MIN)));
        match s.len() {
            4 if s.bytes().all(|b| b.is_ascii_digit()) => {
                let y = s.parse().map_err(|_| err())?;
                return NaiveDate::from_ymd_opt(y, 1, 1).map(date_only).ok_or_else(err);
            }
            7 => {
                let d = NaiveDate::parse_from_str(&format!("{s}-01"), "%Y-%m-%d").map_err(|_| err())?;
                return Ok(date_only(d));
            }
            10 => {
                let d = NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| err())?;
                return Ok(date_only(d));
            }
            _ => {}
        }
        if !s.contains('T') {
            return Err(err());
        }
        let (local, offset_secs) = if let Some(body) = s.strip_suffix('Z') {
            (body, 0)
        } else {
            let idx = s.len().checked_sub(6).ok_or_else(err)?;
            let (body, tz) = s.split_at(idx);
            let sign = match tz.as_bytes()[0] {
                b'+' => 1,
                b'-' => -1,
                _ => return Err(err()),
            };
            let (h, m) = tz[1..].split_once(':').ok_or_else(err)?;
            let h: i32 = h.parse().map_err(|_| err())?;
            let m: i32 = m.parse().map_err(|_| err())?;
            if h > 23 || m > 59 {
                return Err(err());
            }
            (body, sign * (h * 3600 + m * 60))
        };
        let naive = NaiveDateTime::parse_from_str(local, "%Y-%m-%dT%H:%M:%S%.f")
            .or_else(|_| NaiveDateTime::parse_from_str(local, "%Y-%m-%dT%H:%M"))
            .map_err(|_| err())?;
        let utc = naive - chrono::Duration::seconds(offset_secs as i64);
        Ok(Self::from_datetime(Utc.from_utc_datetime(&utc)))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.format("%Y-%m-%dT%H:%M:%SZ"))
    }
}

impl FromStr for Timestamp {
    type Err = DatetimeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse_w3c(s)
    }
}

impl From<DateTime<Utc>> for Timestamp {
    fn from(dt: DateTime<Utc>) -> Self {
        Self::from_datetime(dt)
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Declared role of a document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CapabilityKind {
    ResourceList,
    ChangeList,
    ResourceListIndex,
    ChangeListIndex,
}

impl CapabilityKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CapabilityKind::ResourceList => "resourcelist",
            CapabilityKind::ChangeList => "changelist",
            CapabilityKind::ResourceListIndex => "resourcelist-index",
            CapabilityKind::ChangeListIndex => "changelist-index",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "resourcelist" => CapabilityKind::ResourceList,
            "changelist" => CapabilityKind::ChangeList,
            "resourcelist-index" => CapabilityKind::ResourceListIndex,
            "changelist-index" => CapabilityKind::ChangeListIndex,
            _ => return None,
        })
    }

    pub fn is_index(&self) -> bool {
        matches!(self, CapabilityKind::ResourceListIndex | CapabilityKind::ChangeListIndex)
    }

    /// The kind of the members an index of this kind points to, or the
    /// kind itself for non-index documents.
    pub fn member_kind(&self) -> CapabilityKind {
        match self {
            CapabilityKind::ResourceListIndex => CapabilityKind::ResourceList,
            CapabilityKind::ChangeListIndex => CapabilityKind::ChangeList,
            other => *other,
        }
    }

    pub fn index_kind(&self) -> CapabilityKind {
        match self {
            CapabilityKind::ResourceList => CapabilityKind::ResourceListIndex,
            CapabilityKind::ChangeList => CapabilityKind::ChangeListIndex,
            other => *other,
        }
    }
}

impl fmt::Display for CapabilityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChangeKind {
    Created,
    Updated,
    Deleted,
}

impl ChangeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ChangeKind::Created => "created",
            ChangeKind::Updated => "updated",
            ChangeKind::Deleted => "deleted",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "created" => ChangeKind::Created,
            "updated" => ChangeKind::Updated,
            "deleted" => ChangeKind::Deleted,
            _ => return None,
        })
    }
}

impl fmt::Display for ChangeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Supported digest algorithms. Ordering fixes the canonical token order
/// of the `hash` attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DigestAlgorithm {
    Md5,
    Sha1,
    Sha256,
}

impl DigestAlgorithm {
    pub const ALL: [DigestAlgorithm; 3] = [DigestAlgorithm::Md5, DigestAlgorithm::Sha1, DigestAlgorithm::Sha256];

    pub fn label(&self) -> &'static str {
        match self {
            DigestAlgorithm::Md5 => "md5",
            DigestAlgorithm::Sha1 => "sha-1",
            DigestAlgorithm::Sha256 => "sha-256",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Some(match s.to_ascii_lowercase().as_str() {
            "md5" => DigestAlgorithm::Md5,
            "sha-1" | "sha1" => DigestAlgorithm::Sha1,
            "sha-256" | "sha256" => DigestAlgorithm::Sha256,
            _ => return None,
        })
    }

    /// Number of hex characters in a digest of this algorithm.
    pub fn hex_len(&self) -> usize {
        match self {
            DigestAlgorithm::Md5 => 32,
            DigestAlgorithm::Sha1 => 40,
            DigestAlgorithm::Sha256 => 64,
        }
    }

    /// Preference rank when several digests are available; higher is stronger.
    fn strength(&self) -> u8 {
        match self {
            DigestAlgorithm::Md5 => 0,
            DigestAlgorithm::Sha1 => 1,
            DigestAlgorithm::Sha256 => 2,
        }
    }
}

impl fmt::Display for DigestAlgorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

fn is_lower_hex(s: &str) -> bool {
    s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

/// A single labelled digest, written `algo:hex`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Digest {
    pub algorithm: DigestAlgorithm,
    pub hex: String,
}

impl Digest {
    pub fn new(algorithm: DigestAlgorithm, hex: impl Into<String>) -> Result<Self, ModelError> {
        let hex = hex.into();
        if hex.len() != algorithm.hex_len() || !is_lower_hex(&hex) {
            return Err(ModelError::BadMetadata(format!("{} digest {hex:?} is not {} lowercase hex chars", algorithm, algorithm.hex_len())));
        }
        Ok(Digest { algorithm, hex })
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.algorithm, self.hex)
    }
}

impl FromStr for Digest {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (algo, hex) = s
            .split_once(':')
            .ok_or_else(|| ModelError::BadMetadata(format!("digest {s:?} lacks an algorithm label")))?;
        let algorithm = DigestAlgorithm::from_label(algo)
            .ok_or_else(|| ModelError::BadMetadata(format!("unknown digest algorithm {algo:?}")))?;
        Digest::new(algorithm, hex)
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ResourceMetadata {
    pub digests: BTreeMap<DigestAlgorithm, String>,
    pub length: Option<u64>,
    pub mime_type: Option<String>,
    pub change: Option<ChangeKind>,
}

impl ResourceMetadata {
    pub fn is_empty(&self) -> bool {
        self.digests.is_empty() && self.length.is_none() && self.mime_type.is_none() && self.change.is_none()
    }

    /// The strongest digest available.
    pub fn best_digest(&self) -> Option<Digest> {
        self.digests
            .iter()
            .max_by_key(|(a, _)| a.strength())
            .map(|(a, h)| Digest { algorithm: *a, hex: h.clone() })
    }

    pub fn digest(&self, algorithm: DigestAlgorithm) -> Option<Digest> {
        self.digests.get(&algorithm).map(|h| Digest { algorithm, hex: h.clone() })
    }

    pub fn insert_digest(&mut self, digest: Digest) {
        self.digests.insert(digest.algorithm, digest.hex);
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (algo, hex) in &self.digests {
            Digest::new(*algo, hex.clone())?;
        }
        if let Some(t) = &self.mime_type {
            if t.is_empty() || t.chars().any(char::is_whitespace) || !t.contains('/') {
                return Err(ModelError::BadMetadata(format!("bad media type {t:?}")));
            }
        }
        Ok(())
    }
}

/// Checks that `uri` has a scheme and an authority.
pub fn validate_uri(uri: &str) -> Result<(), ModelError> {
    match url::Url::parse(uri) {
        Ok(u) if u.has_host() && uri.contains("://") => Ok(()),
        _ => Err(ModelError::BadUri(uri.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourceEntry {
    pub uri: String,
    pub lastmod: Option<Timestamp>,
    pub metadata: ResourceMetadata,
}

impl ResourceEntry {
    pub fn new(uri: impl Into<String>) -> Self {
        ResourceEntry { uri: uri.into(), lastmod: None, metadata: ResourceMetadata::default() }
    }

    pub fn with_lastmod(mut self, lastmod: Timestamp) -> Self {
        self.lastmod = Some(lastmod);
        self
    }

    pub fn with_change(mut self, change: ChangeKind) -> Self {
        self.metadata.change = Some(change);
        self
    }

    pub fn change(&self) -> Option<ChangeKind> {
        self.metadata.change
    }
}

/// A parsed resource list, change list, or index of either.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncDocument {
    pub capability: CapabilityKind,
    pub modified: Timestamp,
    pub entries: Vec<ResourceEntry>,
}

impl SyncDocument {
    pub fn new(capability: CapabilityKind, modified: Timestamp) -> Self {
        SyncDocument { capability, modified, entries: Vec::new() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut seen = BTreeSet::new();
        if self.entries.len() > MAX_DOCUMENT_ENTRIES {
            return Err(ModelError::Oversize(self.entries.len()));
        }
        let mut previous: Option<Timestamp> = None;
        for entry in &self.entries {
            validate_uri(&entry.uri)?;
            entry.metadata.validate()?;
            if !seen.insert(entry.uri.as_str()) {
                // Change lists record every event, so one URI may recur.
                if self.capability != CapabilityKind::ChangeList {
                    return Err(ModelError::DuplicateUri(entry.uri.clone()));
                }
            }
            match self.capability {
                CapabilityKind::ResourceListIndex | CapabilityKind::ChangeListIndex => {
                    let md = &entry.metadata;
                    if md.change.is_some() || !md.digests.is_empty() || md.length.is_some() || md.mime_type.is_some() {
                        return Err(ModelError::EntryInIndex(entry.uri.clone()));
                    }
                }
                CapabilityKind::ResourceList => {
                    if let Some(change) = entry.metadata.change {
                        return Err(ModelError::BadMetadata(format!(
                            "resource list entry {} carries change={change}",
                            entry.uri
                        )));
                    }
                }
                CapabilityKind::ChangeList => {
                    if entry.metadata.change.is_none() {
                        return Err(ModelError::BadMetadata(format!("change list entry {} lacks a change kind", entry.uri)));
                    }
                    let lastmod = entry
                        .lastmod
                        .ok_or_else(|| ModelError::BadMetadata(format!("change list entry {} lacks lastmod", entry.uri)))?;
                    if previous.is_some_and(|p| lastmod < p) {
                        return Err(ModelError::Unordered(entry.uri.clone()));
                    }
                    previous = Some(lastmod);
                }
            }
        }
        Ok(())
    }
}

/// Snapshot of a resource tree keyed by URI.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inventory {
    pub base_uri: String,
    pub items: BTreeMap<String, ResourceEntry>,
    pub taken_at: Timestamp,
}

impl Inventory {
    pub fn new(base_uri: impl Into<String>, taken_at: Timestamp) -> Self {
        Inventory { base_uri: base_uri.into(), items: BTreeMap::new(), taken_at }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn insert(&mut self, entry: ResourceEntry) {
        self.items.insert(entry.uri.clone(), entry);
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (uri, entry) in &self.items {
            if uri != &entry.uri {
                return Err(ModelError::Inventory(format!("key {uri} does not match entry {}", entry.uri)));
            }
            if !uri.starts_with(&self.base_uri) {
                return Err(ModelError::Inventory(format!("{uri} is outside {}", self.base_uri)));
            }
            validate_uri(uri)?;
            if entry.lastmod.is_none() {
                return Err(ModelError::Inventory(format!("{uri} has no lastmod")));
            }
            if entry.metadata.digests.is_empty() {
                return Err(ModelError::Inventory(format!("{uri} has no digest")));
            }
            entry.metadata.validate()?;
        }
        Ok(())
    }
}

/// What the destination holds for one URI.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalRecord {
    pub digest: Digest,
    pub lastmod: Timestamp,
    pub local_path: String,
}

/// Persistent record of the destination's copies.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DestinationState {
    pub source_id: String,
    /// URI prefix stripped to derive local paths; fixed at baseline time.
    pub base_uri: Option<String>,
    pub records: BTreeMap<String, LocalRecord>,
    pub last_sync: Option<Timestamp>,
}

/// True when `path` is a relative, slash-separated path with no empty,
/// `.` or `..` segments.
pub fn is_safe_relative_path(path: &str) -> bool {
    !path.is_empty()
        && !path.starts_with('/')
        && !path.contains('\\')
        && !path.contains('\0')
        && path.split('/').all(|seg| !seg.is_empty() && seg != "." && seg != "..")
}

impl DestinationState {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.source_id.is_empty() {
            validate_uri(&self.source_id).map_err(|_| ModelError::State(format!("source_id {:?} is not absolute", self.source_id)))?;
        } else if !self.records.is_empty() || self.last_sync.is_some() {
            return Err(ModelError::State("records present without a source_id".into()));
        }
        let mut paths = BTreeSet::new();
        for (uri, record) in &self.records {
            if !is_safe_relative_path(&record.local_path) {
                return Err(ModelError::State(format!("unsafe local path {:?} for {uri}", record.local_path)));
            }
            if !paths.insert(record.local_path.as_str()) {
                return Err(ModelError::State(format!("local path {:?} used twice", record.local_path)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub uri: String,
    pub reason: String,
}

/// Outcome of a baseline or incremental synchronization run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncReport {
    pub created: u64,
    pub updated: u64,
    pub deleted: u64,
    pub skipped: u64,
    pub failed: u64,
    pub bytes_transferred: u64,
    pub failures: Vec<Failure>,
}

impl SyncReport {
    pub fn record_failure(&mut self, uri: impl Into<String>, reason: impl Into<String>) {
        self.failed += 1;
        self.failures.push(Failure { uri: uri.into(), reason: reason.into() });
    }

    pub fn transfers(&self) -> u64 {
        self.created + self.updated
    }

    pub fn is_success(&self) -> bool {
        self.failed == 0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub in_sync: u64,
    pub missing: Vec<String>,
    pub stale: Vec<String>,
    pub extraneous: Vec<String>,
}

impl AuditReport {
    pub fn is_consistent(&self) -> bool {
        self.missing.is_empty() && self.stale.is_empty() && self.extraneous.is_empty()
    }
}
