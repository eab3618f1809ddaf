//! The source side: scanning a resource tree, publishing resource lists,
//! and deriving change lists from inventory diffs or an event log.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use globset::{Glob, GlobSet, GlobSetBuilder};
use log::warn;
use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use rayon::prelude::*;
use thiserror::Error;

use crate::codec::{self, CodecError};
use crate::digest;
use crate::fsutil::write_atomic;
use crate::model::{
    validate_uri, CapabilityKind, ChangeKind, Digest, DigestAlgorithm, Inventory, ModelError, ResourceEntry,
    ResourceMetadata, SyncDocument, Timestamp, MAX_DOCUMENT_ENTRIES,
};

/// RFC 3986 unreserved characters stay literal; everything else in a path
/// segment is percent-encoded.
const SEGMENT: &AsciiSet = &NON_ALPHANUMERIC.remove(b'-').remove(b'.').remove(b'_').remove(b'~');

pub const RESOURCELIST_FILE: &str = "resourcelist.xml";
pub const RESOURCELIST_INDEX_FILE: &str = "resourcelist-index.xml";
pub const CHANGELIST_FILE: &str = "changelist.xml";
pub const CHANGELIST_INDEX_FILE: &str = "changelist-index.xml";

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("invalid source configuration: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("inventories have different base URIs: {0} vs {1}")]
    BaseMismatch(String, String),
    #[error("change at {instant} for {uri} precedes the last logged instant {last}")]
    OutOfOrder { instant: Timestamp, uri: String, last: Timestamp },
    #[error("change log line {line}: {detail}")]
    LogFormat { line: usize, detail: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SourceError + '_ {
    move |source| SourceError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone)]
pub struct SourceConfig {
    pub root_dir: PathBuf,
    pub base_uri: String,
    pub digest_algorithms: Vec<DigestAlgorithm>,
    pub exclude_patterns: Vec<String>,
    /// Width of change-list windows; whole seconds.
    pub changelist_period: Duration,
}

impl SourceConfig {
    pub fn new(root_dir: impl Into<PathBuf>, base_uri: impl Into<String>) -> Self {
        SourceConfig {
            root_dir: root_dir.into(),
            base_uri: base_uri.into(),
            digest_algorithms: vec![DigestAlgorithm::Md5],
            exclude_patterns: Vec::new(),
            changelist_period: Duration::from_secs(86_400),
        }
    }

    pub fn validate(&self) -> Result<(), SourceError> {
        if !self.base_uri.ends_with('/') {
            return Err(SourceError::Config(format!("base URI {:?} must end with '/'", self.base_uri)));
        }
        validate_uri(&self.base_uri).map_err(|e| SourceError::Config(e.to_string()))?;
        if self.digest_algorithms.is_empty() {
            return Err(SourceError::Config("at least one digest algorithm is required".into()));
        }
        period_secs(self.changelist_period)?;
        Ok(())
    }

    fn exclusions(&self) -> Result<GlobSet, SourceError> {
        let mut builder = GlobSetBuilder::new();
        for pattern in &self.exclude_patterns {
            builder.add(Glob::new(pattern).map_err(|e| SourceError::Config(format!("exclude pattern: {e}")))?);
        }
        builder.build().map_err(|e| SourceError::Config(e.to_string()))
    }
}

fn period_secs(period: Duration) -> Result<i64, SourceError> {
    if period.as_secs() == 0 || period.subsec_nanos() != 0 {
        return Err(SourceError::Config(format!("change list period {period:?} must be a whole number of seconds")));
    }
    Ok(period.as_secs() as i64)
}

/// Percent-encodes a relative slash-separated path segment by segment.
pub fn encode_path(rel: &str) -> String {
    rel.split('/').map(|seg| utf8_percent_encode(seg, SEGMENT).to_string()).collect::<Vec<_>>().join("/")
}

/// Inverse of [`encode_path`]. Returns `None` for undecodable input.
pub fn decode_path(encoded: &str) -> Option<String> {
    let parts: Option<Vec<String>> = encoded
        .split('/')
        .map(|seg| percent_decode_str(seg).decode_utf8().ok().map(|s| s.into_owned()))
        .collect();
    parts.map(|p| p.join("/"))
}

/// A file that could not be included in a scan.
#[derive(Debug, Clone)]
pub struct ScanWarning {
    pub path: PathBuf,
    pub reason: String,
}

/// Scans the configured tree into an inventory taken now.
pub fn scan(config: &SourceConfig) -> Result<Inventory, SourceError> {
    scan_as_of(config, Timestamp::now())
}

pub fn scan_as_of(config: &SourceConfig, taken_at: Timestamp) -> Result<Inventory, SourceError> {
    let (inventory, warnings) = scan_detailed(config, taken_at)?;
    for w in warnings {
        warn!("skipped {}: {}", w.path.display(), w.reason);
    }
    Ok(inventory)
}

/// Scans the tree, returning skipped files alongside the inventory.
pub fn scan_detailed(config: &SourceConfig, taken_at: Timestamp) -> Result<(Inventory, Vec<ScanWarning>), SourceError> {
    config.validate()?;
    let root = &config.root_dir;
    fs::read_dir(root).map_err(io_err(root))?;
    let exclusions = config.exclusions()?;

    let mut warnings = Vec::new();
    let mut candidates = Vec::new();
    for item in walkdir::WalkDir::new(root).follow_links(false).sort_by_file_name() {
        let item = match item {
            Ok(item) => item,
            Err(e) => {
                let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| root.clone());
                if path == *root {
                    return Err(SourceError::Io { path, source: e.into() });
                }
                warnings.push(ScanWarning { path, reason: e.to_string() });
                continue;
            }
        };
        if !item.file_type().is_file() {
            continue;
        }
        let rel = item.path().strip_prefix(root).expect("walkdir yields paths under its root");
        let Some(rel) = rel.to_str() else {
            warnings.push(ScanWarning { path: item.path().to_path_buf(), reason: "file name is not UTF-8".into() });
            continue;
        };
        let rel = rel.replace(std::path::MAIN_SEPARATOR, "/");
        if exclusions.is_match(&rel) {
            continue;
        }
        candidates.push((item.path().to_path_buf(), rel));
    }

    let algorithms = &config.digest_algorithms;
    let results: Vec<Result<ResourceEntry, ScanWarning>> = candidates
        .par_iter()
        .map(|(path, rel)| {
            describe_file(path, algorithms)
                .map(|(lastmod, metadata)| ResourceEntry {
                    uri: format!("{}{}", config.base_uri, encode_path(rel)),
                    lastmod: Some(lastmod),
                    metadata,
                })
                .map_err(|e| ScanWarning { path: path.clone(), reason: e.to_string() })
        })
        .collect();

    let mut inventory = Inventory::new(config.base_uri.clone(), taken_at);
    for r in results {
        match r {
            Ok(entry) => inventory.insert(entry),
            Err(w) => warnings.push(w),
        }
    }
    inventory.validate()?;
    Ok((inventory, warnings))
}

fn describe_file(path: &Path, algorithms: &[DigestAlgorithm]) -> io::Result<(Timestamp, ResourceMetadata)> {
    let meta = fs::metadata(path)?;
    let lastmod = Timestamp::from_datetime(meta.modified()?.into());
    let (length, digests) = digest::digest_file(path, algorithms)?;
    let mut metadata = ResourceMetadata { length: Some(length), ..Default::default() };
    for d in digests {
        metadata.insert_digest(d);
    }
    metadata.mime_type = Some(mime_guess::from_path(path).first_or_octet_stream().essence_str().to_string());
    Ok((lastmod, metadata))
}

/// A resource list, partitioned into members plus an index when it
/// exceeds the per-document entry cap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourceListSet {
    pub index: Option<SyncDocument>,
    pub members: Vec<SyncDocument>,
}

impl ResourceListSet {
    /// File names paired with their documents, in publication order.
    pub fn files(&self) -> Vec<(String, &SyncDocument)> {
        match &self.index {
            None => self.members.iter().map(|d| (RESOURCELIST_FILE.to_string(), d)).collect(),
            Some(index) => {
                let mut out: Vec<_> =
                    self.members.iter().enumerate().map(|(i, d)| (member_file_name(i), d)).collect();
                out.push((RESOURCELIST_INDEX_FILE.to_string(), index));
                out
            }
        }
    }

    /// Every listed resource, in order.
    pub fn entries(&self) -> impl Iterator<Item = &ResourceEntry> {
        self.members.iter().flat_map(|d| d.entries.iter())
    }
}

fn member_file_name(i: usize) -> String {
    format!("resourcelist-{}.xml", i + 1)
}

/// Builds the resource list for `inv`. `list_base` is the URI prefix under
/// which the list documents themselves are published; it only matters when
/// the inventory needs partitioning.
pub fn generate_resource_list(inv: &Inventory, modified: Timestamp, list_base: &str) -> Result<ResourceListSet, SourceError> {
    inv.validate()?;
    let entries: Vec<ResourceEntry> = inv
        .items
        .values()
        .map(|e| {
            let mut e = e.clone();
            e.metadata.change = None;
            e
        })
        .collect();
    if entries.len() <= MAX_DOCUMENT_ENTRIES {
        let doc = SyncDocument { capability: CapabilityKind::ResourceList, modified, entries };
        return Ok(ResourceListSet { index: None, members: vec![doc] });
    }
    let members: Vec<SyncDocument> = entries
        .chunks(MAX_DOCUMENT_ENTRIES)
        .map(|chunk| SyncDocument { capability: CapabilityKind::ResourceList, modified, entries: chunk.to_vec() })
        .collect();
    let index = SyncDocument {
        capability: CapabilityKind::ResourceListIndex,
        modified,
        entries: (0..members.len())
            .map(|i| ResourceEntry::new(format!("{list_base}{}", member_file_name(i))).with_lastmod(modified))
            .collect(),
    };
    index.validate()?;
    Ok(ResourceListSet { index: Some(index), members })
}

/// Rebuilds an inventory from resource list documents, e.g. a published
/// snapshot. `base_uri` defaults to the longest common directory prefix.
pub fn inventory_from_documents<'a>(
    docs: impl IntoIterator<Item = &'a SyncDocument>,
    base_uri: Option<&str>,
) -> Result<Inventory, SourceError> {
    let mut items = BTreeMap::new();
    let mut taken_at = None;
    for doc in docs {
        if doc.capability != CapabilityKind::ResourceList {
            return Err(SourceError::Config(format!("expected a resource list, found {}", doc.capability)));
        }
        taken_at = Some(taken_at.map_or(doc.modified, |t: Timestamp| t.max(doc.modified)));
        for e in &doc.entries {
            if items.insert(e.uri.clone(), e.clone()).is_some() {
                return Err(ModelError::DuplicateUri(e.uri.clone()).into());
            }
        }
    }
    let base = match base_uri {
        Some(b) => b.to_string(),
        None => common_directory_prefix(items.keys().map(String::as_str)).unwrap_or_default(),
    };
    let inv = Inventory {
        base_uri: base,
        items,
        taken_at: taken_at.ok_or_else(|| SourceError::Config("no resource list documents".into()))?,
    };
    inv.validate()?;
    Ok(inv)
}

/// Longest common prefix of `uris` that ends at a `/` after the authority.
pub fn common_directory_prefix<'a>(uris: impl IntoIterator<Item = &'a str>) -> Option<String> {
    let mut iter = uris.into_iter();
    let first = iter.next()?;
    let mut prefix = &first[..first.rfind('/').map_or(0, |i| i + 1)];
    for uri in iter {
        let common = prefix.bytes().zip(uri.bytes()).take_while(|(a, b)| a == b).count();
        prefix = &prefix[..common];
        prefix = &prefix[..prefix.rfind('/').map_or(0, |i| i + 1)];
    }
    // Never cut into the scheme or authority.
    let authority_end = prefix.find("://").map(|i| i + 3)?;
    if prefix[authority_end..].contains('/') {
        Some(prefix.to_string())
    } else {
        None
    }
}

/// Change list taking `old` to `new`, detected by digest comparison.
pub fn diff_inventories(old: &Inventory, new: &Inventory) -> Result<SyncDocument, SourceError> {
    if old.base_uri != new.base_uri {
        return Err(SourceError::BaseMismatch(old.base_uri.clone(), new.base_uri.clone()));
    }
    let mut entries = Vec::new();
    for (uri, entry) in &new.items {
        let change = match old.items.get(uri) {
            None => ChangeKind::Created,
            Some(prev) if !same_content(prev, entry) => ChangeKind::Updated,
            Some(_) => continue,
        };
        let mut e = entry.clone();
        e.metadata.change = Some(change);
        entries.push(e);
    }
    for uri in old.items.keys() {
        if !new.items.contains_key(uri) {
            entries.push(ResourceEntry::new(uri.clone()).with_lastmod(new.taken_at).with_change(ChangeKind::Deleted));
        }
    }
    entries.sort_by(|a, b| (a.lastmod, &a.uri).cmp(&(b.lastmod, &b.uri)));
    let doc = SyncDocument { capability: CapabilityKind::ChangeList, modified: new.taken_at, entries };
    doc.validate()?;
    Ok(doc)
}

/// Compares on a shared digest algorithm; falls back to length when the
/// two sides have none in common.
fn same_content(a: &ResourceEntry, b: &ResourceEntry) -> bool {
    let shared: Vec<_> = a.metadata.digests.keys().filter(|k| b.metadata.digests.contains_key(k)).collect();
    if shared.is_empty() {
        return a.metadata.length == b.metadata.length && a.lastmod == b.lastmod;
    }
    shared.iter().all(|k| a.metadata.digests[k] == b.metadata.digests[k])
}

/// The latest whole second whose changes are fully reflected by a
/// snapshot taken at `as_of`. Events later in the same second as `as_of`
/// share its truncated timestamp, so that second cannot count as covered.
pub fn covered_until(as_of: Timestamp) -> Timestamp {
    as_of.plus_seconds(-1)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeRecord {
    pub instant: Timestamp,
    pub uri: String,
    pub kind: ChangeKind,
    pub metadata: ResourceMetadata,
}

impl ChangeRecord {
    fn to_entry(&self) -> ResourceEntry {
        let mut metadata = self.metadata.clone();
        metadata.change = Some(self.kind);
        ResourceEntry { uri: self.uri.clone(), lastmod: Some(self.instant), metadata }
    }

    /// `<instant>\t<kind>\t<uri>\t<algo:hex>\t<length>`; absent fields are `-`.
    pub fn to_line(&self) -> String {
        let digests = if self.metadata.digests.is_empty() {
            "-".to_string()
        } else {
            self.metadata.digests.iter().map(|(a, h)| format!("{a}:{h}")).collect::<Vec<_>>().join(" ")
        };
        let length = self.metadata.length.map_or("-".to_string(), |l| l.to_string());
        format!("{}\t{}\t{}\t{}\t{}", self.instant, self.kind, self.uri, digests, length)
    }

    pub fn from_line(line: &str, number: usize) -> Result<Self, SourceError> {
        let bad = |detail: String| SourceError::LogFormat { line: number, detail };
        let fields: Vec<&str> = line.split('\t').collect();
        let [instant, kind, uri, digests, length] = fields[..] else {
            return Err(bad(format!("expected 5 tab-separated fields, found {}", fields.len())));
        };
        let instant = Timestamp::parse_w3c(instant).map_err(|e| bad(e.to_string()))?;
        let kind = ChangeKind::parse(kind).ok_or_else(|| bad(format!("unknown change kind {kind:?}")))?;
        validate_uri(uri).map_err(|e| bad(e.to_string()))?;
        let mut metadata = ResourceMetadata::default();
        if digests != "-" {
            for token in digests.split_whitespace() {
                let d: Digest = token.parse().map_err(|e: ModelError| bad(e.to_string()))?;
                metadata.insert_digest(d);
            }
        }
        if length != "-" {
            metadata.length = Some(length.parse().map_err(|_| bad(format!("bad length {length:?}")))?);
        }
        Ok(ChangeRecord { instant, uri: uri.to_string(), kind, metadata })
    }
}

/// Append-only, time-ordered record of source changes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChangeLog {
    records: Vec<ChangeRecord>,
}

impl ChangeLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[ChangeRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last_instant(&self) -> Option<Timestamp> {
        self.records.last().map(|r| r.instant)
    }

    pub fn append(
        &mut self,
        instant: Timestamp,
        uri: impl Into<String>,
        kind: ChangeKind,
        mut metadata: ResourceMetadata,
    ) -> Result<&ChangeRecord, SourceError> {
        let uri = uri.into();
        if let Some(last) = self.last_instant() {
            if instant < last {
                return Err(SourceError::OutOfOrder { instant, uri, last });
            }
        }
        validate_uri(&uri)?;
        metadata.change = None;
        self.records.push(ChangeRecord { instant, uri, kind, metadata });
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn load(path: &Path) -> Result<Self, SourceError> {
        let file = match fs::File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Self::new()),
            Err(e) => return Err(io_err(path)(e)),
        };
        let mut log = Self::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let r = ChangeRecord::from_line(&line, i + 1)?;
            log.append(r.instant, r.uri, r.kind, r.metadata)?;
        }
        Ok(log)
    }

    /// Appends the records from `from` onwards to the file at `path`.
    pub fn append_to_file(&self, path: &Path, from: usize) -> Result<(), SourceError> {
        if from >= self.records.len() {
            return Ok(());
        }
        let mut file = fs::OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
        let mut buf = String::new();
        for r in &self.records[from..] {
            buf.push_str(&r.to_line());
            buf.push('\n');
        }
        file.write_all(buf.as_bytes()).map_err(io_err(path))?;
        file.sync_all().map_err(io_err(path))
    }
}

fn window_start(instant: Timestamp, period: i64) -> Timestamp {
    let t = instant.unix();
    Timestamp::from_unix(t - t.rem_euclid(period)).expect("in range")
}

/// One change list per period-aligned UTC window that has events. A
/// window's `modified` is the last second it covers.
pub fn emit_changelists(log: &ChangeLog, period: Duration) -> Result<Vec<SyncDocument>, SourceError> {
    Ok(emit_windows(log, period, None)?.into_iter().map(|w| w.document).collect())
}

/// Like [`emit_changelists`], but the window containing `as_of` is still
/// open: its `modified` is [`covered_until`]`(as_of)` and it is emitted
/// even when empty.
pub fn emit_changelists_until(log: &ChangeLog, period: Duration, as_of: Timestamp) -> Result<Vec<ChangeWindow>, SourceError> {
    emit_windows(log, period, Some(as_of))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeWindow {
    pub start: Timestamp,
    pub open: bool,
    pub document: SyncDocument,
}

impl ChangeWindow {
    /// `changelist-YYYY-MM-DD.xml` for day-aligned windows, otherwise with
    /// the window's start time appended.
    pub fn file_name(&self, period: Duration) -> String {
        let dt = self.start.as_datetime();
        if period.as_secs() % 86_400 == 0 {
            format!("changelist-{}.xml", dt.format("%Y-%m-%d"))
        } else {
            format!("changelist-{}.xml", dt.format("%Y-%m-%dT%H-%M-%S"))
        }
    }
}

fn emit_windows(log: &ChangeLog, period: Duration, as_of: Option<Timestamp>) -> Result<Vec<ChangeWindow>, SourceError> {
    let period = period_secs(period)?;
    let mut buckets: BTreeMap<Timestamp, Vec<ResourceEntry>> = BTreeMap::new();
    for r in &log.records {
        buckets.entry(window_start(r.instant, period)).or_default().push(r.to_entry());
    }
    let current = as_of.map(|t| window_start(t, period));
    if let Some(c) = current {
        buckets.entry(c).or_default();
    }
    let mut out = Vec::with_capacity(buckets.len());
    for (start, entries) in buckets {
        let end = start.plus_seconds(period);
        let open = as_of.is_some_and(|t| t < end);
        let modified = match as_of {
            Some(t) if open => covered_until(t),
            _ => end.plus_seconds(-1),
        };
        if entries.len() > MAX_DOCUMENT_ENTRIES {
            return Err(ModelError::Oversize(entries.len()).into());
        }
        let document = SyncDocument { capability: CapabilityKind::ChangeList, modified, entries };
        document.validate()?;
        out.push(ChangeWindow { start, open, document });
    }
    Ok(out)
}

/// Writes the resource list and change lists for a source into `web_root`.
///
/// Layout: `resourcelist.xml` (or `resourcelist-index.xml` plus members),
/// one `changelist-<window>.xml` per window, `changelist.xml` for the
/// current window, and `changelist-index.xml` over all windows. Every file
/// is replaced atomically.
pub fn publish(
    web_root: &Path,
    list_base: &str,
    inventory: &Inventory,
    log: &ChangeLog,
    period: Duration,
    as_of: Timestamp,
) -> Result<Vec<PathBuf>, SourceError> {
    let mut written = Vec::new();
    let mut write = |name: &str, doc: &SyncDocument| -> Result<(), SourceError> {
        let path = web_root.join(name);
        write_atomic(&path, &codec::serialize_document(doc)?).map_err(io_err(&path))?;
        written.push(path);
        Ok(())
    };

    let lists = generate_resource_list(inventory, covered_until(as_of), list_base)?;
    for (name, doc) in lists.files() {
        write(&name, doc)?;
    }
    // Only one of the two resource list layouts may be current.
    let stale = if lists.index.is_some() { RESOURCELIST_FILE } else { RESOURCELIST_INDEX_FILE };
    let _ = fs::remove_file(web_root.join(stale));

    let windows = emit_changelists_until(log, period, as_of)?;
    let mut index = SyncDocument::new(CapabilityKind::ChangeListIndex, covered_until(as_of));
    for w in &windows {
        let name = w.file_name(period);
        write(&name, &w.document)?;
        if w.open {
            write(CHANGELIST_FILE, &w.document)?;
        }
        index.entries.push(ResourceEntry::new(format!("{list_base}{name}")).with_lastmod(w.document.modified));
    }
    if index.entries.len() > MAX_DOCUMENT_ENTRIES {
        let keep = index.entries.len() - MAX_DOCUMENT_ENTRIES;
        index.entries.drain(..keep);
    }
    write(CHANGELIST_INDEX_FILE, &index)?;
    Ok(written)
}
