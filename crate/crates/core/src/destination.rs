//! The destination side: baseline synchronization, incremental
//! synchronization and audit against a source, over a local store.
//!
//! A store is a directory mirroring the source's resource tree. Names
//! starting with `.resync` at the top of the store are reserved for the
//! lock file, the default state file and in-flight downloads.
//!
//! Every body is downloaded into the store's temp area and renamed into
//! place only after it is complete and verified, so a final path never
//! holds a partial file. The state file is written the same way.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs::{self, File};
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Mutex};
use std::thread;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, CodecError};
use crate::digest;
use crate::fsutil::{join_relative, prune_empty_dirs, write_atomic};
use crate::model::{
    is_safe_relative_path, AuditReport, CapabilityKind, ChangeKind, DestinationState, Digest, DigestAlgorithm,
    LocalRecord, ModelError, ResourceEntry, SyncDocument, SyncReport, Timestamp,
};
use crate::source::{common_directory_prefix, decode_path, encode_path};
use crate::transport::{HttpClient, TransportError};

pub const LOCK_FILE: &str = ".resync.lock";
pub const STATE_FILE: &str = ".resync.state.json";
pub const TEMP_DIR: &str = ".resync.tmp";
const RESERVED_PREFIX: &str = ".resync";

pub const STATE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SyncError {
    #[error("baseline synchronization required before incremental synchronization")]
    BaselineRequired,
    #[error("store {} is locked by another sync run", .0.display())]
    Locked(PathBuf),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("{uri}: {source}")]
    Codec { uri: String, source: CodecError },
    #[error("{uri}: expected {expected}, found {found}")]
    WrongCapability { uri: String, expected: CapabilityKind, found: CapabilityKind },
    #[error("cannot map URIs to local paths: {0}")]
    PathMapping(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt state file {}: {detail}", path.display())]
    CorruptState { path: PathBuf, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SyncError + '_ {
    move |source| SyncError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncPolicy {
    pub apply_deletes: bool,
    pub max_parallel_transfers: usize,
    pub verify_digests: bool,
    /// Apply change entries even when they are older than the local copy.
    pub stale_wins: bool,
}

impl Default for SyncPolicy {
    fn default() -> Self {
        SyncPolicy { apply_deletes: true, max_parallel_transfers: 4, verify_digests: true, stale_wins: false }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    format_version: u32,
    source_id: String,
    #[serde(default)]
    base_uri: Option<String>,
    last_sync: Option<Timestamp>,
    records: BTreeMap<String, LocalRecord>,
}

/// Reads a state file. A missing file yields an empty state; anything
/// unreadable or invalid is an error.
pub fn load_state(path: &Path) -> Result<DestinationState, SyncError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(DestinationState::default()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let corrupt = |detail: String| SyncError::CorruptState { path: path.to_path_buf(), detail };
    let file: StateFile = serde_json::from_slice(&bytes).map_err(|e| corrupt(e.to_string()))?;
    if file.format_version != STATE_FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format_version {}", file.format_version)));
    }
    let state = DestinationState {
        source_id: file.source_id,
        base_uri: file.base_uri,
        records: file.records,
        last_sync: file.last_sync,
    };
    state.validate().map_err(|e| corrupt(e.to_string()))?;
    Ok(state)
}

/// Writes a state file atomically as key-sorted JSON.
pub fn save_state(state: &DestinationState, path: &Path) -> Result<(), SyncError> {
    state.validate()?;
    let file = StateFile {
        format_version: STATE_FORMAT_VERSION,
        source_id: state.source_id.clone(),
        base_uri: state.base_uri.clone(),
        last_sync: state.last_sync,
        records: state.records.clone(),
    };
    // serde_json::Value keeps object keys sorted.
    let value = serde_json::to_value(&file).expect("state is always representable as JSON");
    let mut bytes = serde_json::to_vec_pretty(&value).expect("JSON values always serialize");
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(io_err(path))
}

/// Exclusive advisory lock on a store, released when dropped or when the
/// holding process dies.
#[derive(Debug)]
pub struct StoreLock {
    _file: File,
}

impl StoreLock {
    pub fn acquire(store_dir: &Path) -> Result<Self, SyncError> {
        fs::create_dir_all(store_dir).map_err(io_err(store_dir))?;
        let path = store_dir.join(LOCK_FILE);
        let file = fs::OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(io_err(&path))?;
        match file.try_lock() {
            Ok(()) => Ok(StoreLock { _file: file }),
            Err(fs::TryLockError::WouldBlock) => Err(SyncError::Locked(store_dir.to_path_buf())),
            Err(fs::TryLockError::Error(e)) => Err(io_err(&path)(e)),
        }
    }
}

/// Maps URIs below a base onto relative paths in the store.
#[derive(Debug, Clone)]
pub struct PathMapper {
    base: String,
}

impl PathMapper {
    pub fn new(base: impl Into<String>) -> Self {
        PathMapper { base: base.into() }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    pub fn local_path(&self, uri: &str) -> Result<String, SyncError> {
        let rest = uri
            .strip_prefix(&self.base)
            .ok_or_else(|| SyncError::PathMapping(format!("{uri} is outside {}", self.base)))?;
        if rest.contains(['?', '#']) {
            return Err(SyncError::PathMapping(format!("{uri} has a query or fragment")));
        }
        let path = decode_path(rest).ok_or_else(|| SyncError::PathMapping(format!("{uri} does not decode to UTF-8")))?;
        if !is_safe_relative_path(&path) {
            return Err(SyncError::PathMapping(format!("{uri} maps to unsafe path {path:?}")));
        }
        if path.split('/').next().is_some_and(|first| first.starts_with(RESERVED_PREFIX)) {
            return Err(SyncError::PathMapping(format!("{uri} maps to a reserved name")));
        }
        Ok(path)
    }

    pub fn uri_for(&self, local_path: &str) -> String {
        format!("{}{}", self.base, encode_path(local_path))
    }
}

/// Directory part of a URI, including the trailing slash.
fn uri_directory(uri: &str) -> &str {
    let path_start = uri.find("://").map_or(0, |i| i + 3);
    match uri[path_start..].rfind('/') {
        Some(i) => &uri[..path_start + i + 1],
        None => uri,
    }
}

/// The longest common directory of the list's own location and every URI
/// it lists.
fn derive_base<'a>(list_uri: &'a str, entries: impl Iterator<Item = &'a ResourceEntry>) -> Result<String, SyncError> {
    let uris = std::iter::once(uri_directory(list_uri)).chain(entries.map(|e| e.uri.as_str()));
    // A trailing slash keeps the list's directory itself in play.
    let uris = uris.map(|u| if u.ends_with('/') { format!("{u}_") } else { u.to_string() }).collect::<Vec<_>>();
    common_directory_prefix(uris.iter().map(String::as_str))
        .ok_or_else(|| SyncError::PathMapping(format!("{list_uri} lists resources on another host")))
}

fn is_reserved(rel: &str) -> bool {
    rel.split('/').next().is_some_and(|first| first.starts_with(RESERVED_PREFIX))
}

/// Relative paths of every regular file in the store, reserved names excluded.
fn local_files(store_dir: &Path) -> Result<BTreeSet<String>, SyncError> {
    let mut out = BTreeSet::new();
    if !store_dir.exists() {
        return Ok(out);
    }
    let walker = walkdir::WalkDir::new(store_dir).follow_links(false).into_iter().filter_entry(|e| {
        e.depth() != 1 || !e.file_name().to_string_lossy().starts_with(RESERVED_PREFIX)
    });
    for item in walker {
        let item = item.map_err(|e| SyncError::Io {
            path: e.path().map(Path::to_path_buf).unwrap_or_else(|| store_dir.to_path_buf()),
            source: e.into(),
        })?;
        if !item.file_type().is_file() {
            continue;
        }
        let rel = item.path().strip_prefix(store_dir).expect("walkdir yields paths under its root");
        match rel.to_str() {
            Some(rel) if !is_reserved(rel) => {
                out.insert(rel.replace(std::path::MAIN_SEPARATOR, "/"));
            }
            Some(_) => {}
            None => warn!("ignoring non-UTF-8 file name {}", rel.display()),
        }
    }
    Ok(out)
}

/// Strongest digest the entry carries, when verification is wanted.
fn expected_digest(entry: &ResourceEntry, verify: bool) -> Option<Digest> {
    if verify {
        entry.metadata.best_digest()
    } else {
        None
    }
}

fn digest_local(path: &Path, algorithm: DigestAlgorithm) -> io::Result<(u64, Digest)> {
    let (len, mut ds) = digest::digest_file(path, &[algorithm])?;
    Ok((len, ds.pop().expect("one algorithm requested")))
}

#[derive(Debug, Clone)]
struct Job {
    uri: String,
    local_path: String,
    expected: Option<Digest>,
    algorithm: DigestAlgorithm,
    kind: ChangeKind,
    lastmod: Timestamp,
}

#[derive(Debug)]
struct Transferred {
    length: u64,
    digest: Digest,
}

/// Drives synchronization of one store against a source.
pub struct Destination {
    client: HttpClient,
    store_dir: PathBuf,
    policy: SyncPolicy,
    temp_counter: AtomicU64,
    held: Option<StoreLock>,
}

impl Destination {
    pub fn new(client: HttpClient, store_dir: impl Into<PathBuf>, policy: SyncPolicy) -> Self {
        Destination { client, store_dir: store_dir.into(), policy, temp_counter: AtomicU64::new(0), held: None }
    }

    /// Takes the store lock for the lifetime of this value, so callers can
    /// load and save state under the same lock as the sync itself.
    pub fn hold_lock(&mut self) -> Result<(), SyncError> {
        if self.held.is_none() {
            self.held = Some(StoreLock::acquire(&self.store_dir)?);
        }
        Ok(())
    }

    fn lock(&self) -> Result<Option<StoreLock>, SyncError> {
        match self.held {
            Some(_) => Ok(None),
            None => StoreLock::acquire(&self.store_dir).map(Some),
        }
    }

    pub fn store_dir(&self) -> &Path {
        &self.store_dir
    }

    pub fn policy(&self) -> &SyncPolicy {
        &self.policy
    }

    fn fetch_document(&self, uri: &str) -> Result<SyncDocument, SyncError> {
        let result = self.client.fetch(uri, None)?;
        codec::parse_document(&result.body).map_err(|source| SyncError::Codec { uri: uri.to_string(), source })
    }

    /// Fetches `uri` and, if it is an index, the members it lists whose
    /// `lastmod` is after `skip_until`. Returns the top-level document's
    /// modified instant with the member documents.
    fn fetch_documents(
        &self,
        uri: &str,
        kind: CapabilityKind,
        skip_until: Option<Timestamp>,
    ) -> Result<(Timestamp, Vec<SyncDocument>), SyncError> {
        let top = self.fetch_document(uri)?;
        if top.capability == kind {
            return Ok((top.modified, vec![top]));
        }
        if top.capability != kind.index_kind() {
            return Err(SyncError::WrongCapability { uri: uri.to_string(), expected: kind, found: top.capability });
        }
        let mut members = Vec::new();
        for member in &top.entries {
            if let (Some(limit), Some(lastmod)) = (skip_until, member.lastmod) {
                if lastmod <= limit {
                    continue;
                }
            }
            let doc = self.fetch_document(&member.uri)?;
            if doc.capability != kind {
                return Err(SyncError::WrongCapability {
                    uri: member.uri.clone(),
                    expected: kind,
                    found: doc.capability,
                });
            }
            members.push(doc);
        }
        Ok((top.modified, members))
    }

    fn temp_dir(&self) -> PathBuf {
        self.store_dir.join(TEMP_DIR)
    }

    fn reset_temp_dir(&self) -> Result<(), SyncError> {
        let dir = self.temp_dir();
        match fs::remove_dir_all(&dir) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(io_err(&dir)(e)),
        }
        fs::create_dir_all(&dir).map_err(io_err(&dir))
    }

    fn final_path(&self, local_path: &str) -> Result<PathBuf, SyncError> {
        join_relative(&self.store_dir, local_path)
            .ok_or_else(|| SyncError::PathMapping(format!("unsafe local path {local_path:?}")))
    }

    fn transfer(&self, job: &Job) -> Result<Transferred, String> {
        let final_path = self.final_path(&job.local_path).map_err(|e| e.to_string())?;
        let temp = self.temp_dir().join(format!(
            "{}-{}.part",
            std::process::id(),
            self.temp_counter.fetch_add(1, Ordering::Relaxed)
        ));
        let mut attempt = 0;
        let (length, digest) = loop {
            match self.client.download_to(&job.uri, &temp, job.expected.as_ref(), job.algorithm) {
                Ok(ok) => break ok,
                Err(TransportError::DigestMismatch { .. }) if attempt == 0 => {
                    attempt += 1;
                    debug!("digest mismatch for {}, retrying once", job.uri);
                }
                Err(e) => return Err(e.to_string()),
            }
        };
        let place = || -> io::Result<()> {
            if let Some(parent) = final_path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::rename(&temp, &final_path)
        };
        if let Err(e) = place() {
            let _ = fs::remove_file(&temp);
            return Err(format!("cannot place {}: {e}", final_path.display()));
        }
        Ok(Transferred { length, digest })
    }

    /// Runs jobs on up to `max_parallel_transfers` workers and hands each
    /// outcome to `on_done` on the calling thread.
    fn run_transfers(&self, jobs: Vec<Job>, mut on_done: impl FnMut(Job, Result<Transferred, String>)) {
        if jobs.is_empty() {
            return;
        }
        let workers = self.policy.max_parallel_transfers.max(1).min(jobs.len());
        let queue = Mutex::new(jobs.into_iter().collect::<VecDeque<_>>());
        let (tx, rx) = mpsc::channel();
        thread::scope(|scope| {
            for _ in 0..workers {
                let tx = tx.clone();
                let queue = &queue;
                scope.spawn(move || loop {
                    let Some(job) = queue.lock().expect("queue lock").pop_front() else {
                        break;
                    };
                    let outcome = self.transfer(&job);
                    if tx.send((job, outcome)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            for (job, outcome) in rx {
                on_done(job, outcome);
            }
        });
    }

    fn remove_local(&self, local_path: &str) -> Result<bool, SyncError> {
        let path = self.final_path(local_path)?;
        match fs::remove_file(&path) {
            Ok(()) => {
                if let Some(parent) = path.parent() {
                    prune_empty_dirs(&self.store_dir, parent);
                }
                Ok(true)
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(false),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    /// Aligns the store with the resource list at `resource_list_uri`.
    pub fn baseline_sync(&self, resource_list_uri: &str, state: &mut DestinationState) -> Result<SyncReport, SyncError> {
        let _lock = self.lock()?;
        self.reset_temp_dir()?;
        let (modified, docs) = self.fetch_documents(resource_list_uri, CapabilityKind::ResourceList, None)?;
        let entries: Vec<&ResourceEntry> = docs.iter().flat_map(|d| d.entries.iter()).collect();

        let base = match (&state.base_uri, state.source_id == resource_list_uri) {
            (Some(base), true) if entries.iter().all(|e| e.uri.starts_with(base.as_str())) => base.clone(),
            _ => derive_base(resource_list_uri, entries.iter().copied())?,
        };
        if state.source_id != resource_list_uri {
            state.last_sync = None;
        }
        state.source_id = resource_list_uri.to_string();
        state.base_uri = Some(base.clone());
        let mapper = PathMapper::new(base);

        let mut report = SyncReport::default();
        let mut listed_paths: HashMap<String, String> = HashMap::new();
        let mut jobs = Vec::new();
        for entry in &entries {
            let local_path = match mapper.local_path(&entry.uri) {
                Ok(p) => p,
                Err(e) => {
                    report.record_failure(&entry.uri, e.to_string());
                    continue;
                }
            };
            if let Some(other) = listed_paths.get(&local_path) {
                report.record_failure(&entry.uri, format!("local path {local_path:?} collides with {other}"));
                continue;
            }
            listed_paths.insert(local_path.clone(), entry.uri.clone());
            let lastmod = entry.lastmod.unwrap_or(modified);
            let expected = expected_digest(entry, self.policy.verify_digests);
            let algorithm = entry.metadata.best_digest().map_or(DigestAlgorithm::Md5, |d| d.algorithm);
            let path = self.final_path(&local_path)?;
            let current = if path.is_file() {
                self.local_matches(entry, &path, state.records.get(&entry.uri), algorithm)
            } else {
                None
            };
            match current {
                Some((length, digest)) => {
                    debug!("{} is current", entry.uri);
                    let _ = length;
                    report.skipped += 1;
                    state.records.insert(entry.uri.clone(), LocalRecord { digest, lastmod, local_path });
                }
                None => {
                    let kind = if path.exists() { ChangeKind::Updated } else { ChangeKind::Created };
                    jobs.push(Job { uri: entry.uri.clone(), local_path, expected, algorithm, kind, lastmod });
                }
            }
        }

        self.run_transfers(jobs, |job, outcome| match outcome {
            Ok(done) => {
                match job.kind {
                    ChangeKind::Created => report.created += 1,
                    _ => report.updated += 1,
                }
                report.bytes_transferred += done.length;
                state.records.insert(
                    job.uri,
                    LocalRecord { digest: done.digest, lastmod: job.lastmod, local_path: job.local_path },
                );
            }
            Err(reason) => report.record_failure(job.uri, reason),
        });

        // Anything local that the list does not name.
        for rel in local_files(&self.store_dir)? {
            if listed_paths.contains_key(&rel) {
                continue;
            }
            if self.policy.apply_deletes {
                if self.remove_local(&rel)? {
                    report.deleted += 1;
                }
            } else {
                warn!("extraneous local file {rel}");
            }
        }
        let listed: BTreeSet<&str> = entries.iter().map(|e| e.uri.as_str()).collect();
        let store = &self.store_dir;
        state.records.retain(|uri, rec| {
            listed.contains(uri.as_str()) || (!listed_paths.contains_key(&rec.local_path) && store.join(&rec.local_path).is_file())
        });
        // A failed download may leave a stale record for a path that is gone.
        state.records.retain(|_, rec| store.join(&rec.local_path).is_file());

        if report.is_success() {
            state.last_sync = Some(modified);
        }
        let _ = fs::remove_dir(self.temp_dir());
        info!(
            "baseline {}: created {} updated {} deleted {} skipped {} failed {}",
            resource_list_uri, report.created, report.updated, report.deleted, report.skipped, report.failed
        );
        Ok(report)
    }

    /// Returns the local length and digest when the file at `path` already
    /// matches `entry`.
    fn local_matches(
        &self,
        entry: &ResourceEntry,
        path: &Path,
        record: Option<&LocalRecord>,
        algorithm: DigestAlgorithm,
    ) -> Option<(u64, Digest)> {
        let (length, digest) = digest_local(path, algorithm).ok()?;
        if let Some(listed) = entry.metadata.digest(algorithm) {
            return (listed == digest).then_some((length, digest));
        }
        if entry.metadata.length.is_some_and(|l| l != length) {
            return None;
        }
        // Without a digest, trust an unchanged lastmod on a known record.
        let record = record?;
        if record.digest.algorithm == algorithm && record.digest != digest {
            return None;
        }
        match entry.lastmod {
            Some(l) if l != record.lastmod => None,
            _ => Some((length, digest)),
        }
    }

    /// Applies the change list (or change list index) at `changelist_uri`.
    pub fn incremental_sync(&self, changelist_uri: &str, state: &mut DestinationState) -> Result<SyncReport, SyncError> {
        let last_sync = state.last_sync.ok_or(SyncError::BaselineRequired)?;
        let base = state.base_uri.clone().ok_or(SyncError::BaselineRequired)?;
        let _lock = self.lock()?;
        self.reset_temp_dir()?;
        let (modified, mut docs) = self.fetch_documents(changelist_uri, CapabilityKind::ChangeList, Some(last_sync))?;
        docs.sort_by_key(|d| d.modified);
        let mut entries: Vec<&ResourceEntry> = docs
            .iter()
            .flat_map(|d| d.entries.iter())
            .filter(|e| e.lastmod.is_none_or(|l| l > last_sync))
            .collect();
        entries.sort_by_key(|e| e.lastmod);
        let mapper = PathMapper::new(base);
        let mut report = SyncReport::default();

        // First pass: decide which entries take effect, simulating the
        // per-URI lastmod so later entries see earlier ones.
        #[derive(Clone, Copy, PartialEq)]
        enum Action {
            Skip,
            Put,
            Delete,
        }
        let mut sim_lastmod: HashMap<&str, Timestamp> =
            state.records.iter().map(|(u, r)| (u.as_str(), r.lastmod)).collect();
        let mut actions = Vec::with_capacity(entries.len());
        for entry in &entries {
            let lastmod = entry.lastmod.unwrap_or(modified);
            let older = sim_lastmod.get(entry.uri.as_str()).is_some_and(|l| lastmod < *l);
            let action = match entry.change() {
                _ if older && !self.policy.stale_wins => Action::Skip,
                Some(ChangeKind::Created | ChangeKind::Updated) => Action::Put,
                Some(ChangeKind::Deleted) => Action::Delete,
                None => Action::Skip,
            };
            if action != Action::Skip {
                sim_lastmod.insert(entry.uri.as_str(), lastmod);
            }
            actions.push(action);
        }
        let mut last_effective: HashMap<&str, usize> = HashMap::new();
        for (i, (entry, action)) in entries.iter().zip(&actions).enumerate() {
            if *action != Action::Skip {
                last_effective.insert(entry.uri.as_str(), i);
            }
        }

        // Second pass: only the last effective entry per URI touches the
        // store; earlier ones are superseded and counted without I/O.
        let mut jobs = Vec::new();
        let mut planned_put: BTreeSet<&str> = BTreeSet::new();
        for (i, (entry, action)) in entries.iter().zip(&actions).enumerate() {
            let kind = entry.change().expect("change lists carry a kind on every entry");
            let count = |report: &mut SyncReport| match kind {
                ChangeKind::Created => report.created += 1,
                ChangeKind::Updated => report.updated += 1,
                ChangeKind::Deleted => report.deleted += 1,
            };
            if *action == Action::Skip {
                report.skipped += 1;
                continue;
            }
            let lastmod = entry.lastmod.unwrap_or(modified);
            if last_effective[entry.uri.as_str()] != i {
                count(&mut report);
                if *action == Action::Put {
                    planned_put.insert(entry.uri.as_str());
                }
                continue;
            }
            let local_path = match state.records.get(&entry.uri) {
                Some(r) => Ok(r.local_path.clone()),
                None => mapper.local_path(&entry.uri),
            };
            let local_path = match local_path {
                Ok(p) => p,
                Err(e) => {
                    report.record_failure(&entry.uri, e.to_string());
                    continue;
                }
            };
            if let Some((other, _)) =
                state.records.iter().find(|(u, r)| r.local_path == local_path && u.as_str() != entry.uri)
            {
                report.record_failure(&entry.uri, format!("local path {local_path:?} is held by {other}"));
                continue;
            }
            let path = self.final_path(&local_path)?;
            match action {
                Action::Put => {
                    let algorithm = entry.metadata.best_digest().map_or(DigestAlgorithm::Md5, |d| d.algorithm);
                    let listed = entry.metadata.digest(algorithm);
                    let current = match (&listed, path.is_file()) {
                        (Some(listed), true) => digest_local(&path, algorithm).ok().filter(|(_, d)| d == listed),
                        _ => None,
                    };
                    if let Some((_, digest)) = current {
                        report.skipped += 1;
                        state.records.insert(entry.uri.clone(), LocalRecord { digest, lastmod, local_path });
                        continue;
                    }
                    jobs.push(Job {
                        uri: entry.uri.clone(),
                        local_path,
                        expected: expected_digest(entry, self.policy.verify_digests),
                        algorithm,
                        kind,
                        lastmod,
                    });
                }
                Action::Delete if !self.policy.apply_deletes => {
                    debug!("withholding delete of {}", entry.uri);
                    report.skipped += 1;
                }
                Action::Delete => {
                    let had_record = state.records.remove(&entry.uri).is_some();
                    let removed = self.remove_local(&local_path)?;
                    if removed || had_record || planned_put.contains(entry.uri.as_str()) {
                        count(&mut report);
                    } else {
                        report.skipped += 1;
                    }
                }
                Action::Skip => unreachable!(),
            }
        }

        self.run_transfers(jobs, |job, outcome| match outcome {
            Ok(done) => {
                match job.kind {
                    ChangeKind::Created => report.created += 1,
                    _ => report.updated += 1,
                }
                report.bytes_transferred += done.length;
                state.records.insert(
                    job.uri,
                    LocalRecord { digest: done.digest, lastmod: job.lastmod, local_path: job.local_path },
                );
            }
            Err(reason) => report.record_failure(job.uri, reason),
        });

        if report.is_success() {
            state.last_sync = Some(last_sync.max(modified));
        }
        let _ = fs::remove_dir(self.temp_dir());
        info!(
            "incremental {}: created {} updated {} deleted {} skipped {} failed {}",
            changelist_uri, report.created, report.updated, report.deleted, report.skipped, report.failed
        );
        Ok(report)
    }

    /// Compares the store against the resource list without transferring
    /// any bodies or changing anything.
    pub fn audit(&self, resource_list_uri: &str, state: &DestinationState) -> Result<AuditReport, SyncError> {
        let (_, docs) = self.fetch_documents(resource_list_uri, CapabilityKind::ResourceList, None)?;
        let entries: Vec<&ResourceEntry> = docs.iter().flat_map(|d| d.entries.iter()).collect();
        let base = match &state.base_uri {
            Some(b) if state.source_id == resource_list_uri => b.clone(),
            _ => derive_base(resource_list_uri, entries.iter().copied())?,
        };
        let mapper = PathMapper::new(base);
        let files = local_files(&self.store_dir)?;

        let mut report = AuditReport::default();
        let mut listed_uris = BTreeSet::new();
        let mut listed_paths = BTreeSet::new();
        let mut warned = false;
        for entry in &entries {
            listed_uris.insert(entry.uri.as_str());
            let local_path = match state.records.get(&entry.uri) {
                Some(r) => Ok(r.local_path.clone()),
                None => mapper.local_path(&entry.uri),
            };
            let Ok(local_path) = local_path else {
                report.missing.push(entry.uri.clone());
                continue;
            };
            listed_paths.insert(local_path.clone());
            if !files.contains(&local_path) {
                report.missing.push(entry.uri.clone());
                continue;
            }
            let path = self.final_path(&local_path)?;
            let md = &entry.metadata;
            let stale = if let Some(listed) = md.best_digest() {
                let (_, local) = digest_local(&path, listed.algorithm).map_err(io_err(&path))?;
                local != listed
            } else if let Some(length) = md.length {
                fs::metadata(&path).map_err(io_err(&path))?.len() != length
            } else if let (Some(lastmod), Some(record)) = (entry.lastmod, state.records.get(&entry.uri)) {
                record.lastmod != lastmod
            } else {
                if !warned {
                    warn!("{resource_list_uri} carries no digests, lengths or lastmods; only presence is audited");
                    warned = true;
                }
                false
            };
            if stale {
                report.stale.push(entry.uri.clone());
            } else {
                report.in_sync += 1;
            }
        }
        let mut extraneous = BTreeSet::new();
        for uri in state.records.keys() {
            if !listed_uris.contains(uri.as_str()) {
                extraneous.insert(uri.clone());
            }
        }
        for rel in &files {
            if !listed_paths.contains(rel) {
                let uri = state
                    .records
                    .iter()
                    .find(|(_, r)| &r.local_path == rel)
                    .map(|(u, _)| u.clone())
                    .unwrap_or_else(|| mapper.uri_for(rel));
                if !listed_uris.contains(uri.as_str()) {
                    extraneous.insert(uri);
                }
            }
        }
        report.extraneous = extraneous.into_iter().collect();
        report.missing.sort();
        report.stale.sort();
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mapper_rejects_unsafe_uris() {
        let m = PathMapper::new("http://e.com/");
        assert_eq!(m.local_path("http://e.com/a/r%C3%A9s.txt").unwrap(), "a/rés.txt");
        assert!(m.local_path("http://e.com/a/%2E%2E/x").is_err());
        assert!(m.local_path("http://e.com/a//x").is_err());
        assert!(m.local_path("http://f.com/a").is_err());
        assert!(m.local_path("http://e.com/.resync.state.json").is_err());
        assert!(m.local_path("http://e.com/a?x=1").is_err());
        assert_eq!(m.uri_for("a b/c"), "http://e.com/a%20b/c");
    }

    #[test]
    fn base_derivation() {
        let e = |u: &str| ResourceEntry::new(u);
        let entries = [e("http://e.com/resources/a"), e("http://e.com/resources/sub/b")];
        assert_eq!(derive_base("http://e.com/resourcelist.xml", entries.iter()).unwrap(), "http://e.com/");
        assert_eq!(derive_base("http://e.com/resources/list.xml", entries.iter()).unwrap(), "http://e.com/resources/");
        assert!(derive_base("http://e.com/list.xml", [e("http://f.com/a")].iter()).is_err());
        assert_eq!(derive_base("http://e.com/x/list.xml", std::iter::empty()).unwrap(), "http://e.com/x/");
    }

    #[test]
    fn state_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        assert_eq!(load_state(&path).unwrap(), DestinationState::default());

        let mut state = DestinationState {
            source_id: "http://e.com/resourcelist.xml".into(),
            base_uri: Some("http://e.com/".into()),
            last_sync: Some("2013-01-03T09:00:00Z".parse().unwrap()),
            ..Default::default()
        };
        state.records.insert(
            "http://e.com/a".into(),
            LocalRecord {
                digest: digest::digest_bytes(DigestAlgorithm::Md5, b"hi"),
                lastmod: "2013-01-02T00:00:00Z".parse().unwrap(),
                local_path: "a".into(),
            },
        );
        save_state(&state, &path).unwrap();
        assert_eq!(load_state(&path).unwrap(), state);

        let text = fs::read_to_string(&path).unwrap();
        let keys: Vec<usize> = ["base_uri", "format_version", "last_sync", "records", "source_id"]
            .iter()
            .map(|k| text.find(&format!("\"{k}\"")).unwrap())
            .collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]), "keys are sorted: {text}");

        fs::write(&path, text.replace("\"local_path\": \"a\"", "\"local_path\": \"../a\"")).unwrap();
        assert!(matches!(load_state(&path), Err(SyncError::CorruptState { .. })));
        fs::write(&path, text.replace("\"format_version\": 1", "\"format_version\": 9")).unwrap();
        assert!(matches!(load_state(&path), Err(SyncError::CorruptState { .. })));
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let first = StoreLock::acquire(dir.path()).unwrap();
        assert!(matches!(StoreLock::acquire(dir.path()), Err(SyncError::Locked(_))));
        drop(first);
        StoreLock::acquire(dir.path()).unwrap();
    }
}
