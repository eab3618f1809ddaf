//! Deterministic synthetic source.
//!
//! A simulator owns a directory tree and mutates it with a seeded stream of
//! create, update and delete events. Event times follow a Poisson process
//! on a virtual clock; every file's mtime is set to the virtual instant of
//! its last change, so scans of the tree agree with the change log.
//!
//! The generator is ChaCha8 (`rand_chacha`) seeded from the configured
//! 64-bit seed, which makes runs reproducible across platforms.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::digest_bytes;
use crate::fsutil::{join_relative, prune_empty_dirs, write_atomic};
use crate::model::{validate_uri, ChangeKind, DigestAlgorithm, Inventory, ResourceMetadata, Timestamp};
use crate::source::{self, encode_path, ChangeLog, SourceConfig, SourceError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error("invalid simulator state {}: {detail}", path.display())]
    State { path: PathBuf, detail: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SimError + '_ {
    move |source| SimError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub n_initial: usize,
    /// Mean events per second of virtual time.
    pub event_rate: f64,
    pub p_create: f64,
    pub p_update: f64,
    pub p_delete: f64,
    pub body_size_min: usize,
    pub body_size_max: usize,
    /// Virtual seconds to simulate.
    pub duration: f64,
    /// Virtual instant at which the initial tree is created.
    pub start: Timestamp,
    /// URI under which the simulated tree is published.
    pub base_uri: String,
    /// Stamp every event of a run with the run's final instant.
    pub burst: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            n_initial: 100,
            event_rate: 1.4,
            p_create: 0.1,
            p_update: 0.8,
            p_delete: 0.1,
            body_size_min: 64,
            body_size_max: 4096,
            duration: 60.0,
            start: "2013-01-01T00:00:00Z".parse().expect("valid literal"),
            base_uri: "http://localhost:8080/data/".into(),
            burst: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        for (name, p) in [("p_create", self.p_create), ("p_update", self.p_update), ("p_delete", self.p_delete)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        let sum = self.p_create + self.p_update + self.p_delete;
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("probabilities must sum to 1, got {sum}"));
        }
        if !self.event_rate.is_finite() || self.event_rate < 0.0 {
            return bad(format!("event_rate must be finite and non-negative, got {}", self.event_rate));
        }
        if !self.duration.is_finite() || self.duration < 0.0 {
            return bad(format!("duration must be finite and non-negative, got {}", self.duration));
        }
        if self.body_size_min > self.body_size_max {
            return bad(format!("body_size_min {} exceeds body_size_max {}", self.body_size_min, self.body_size_max));
        }
        if validate_uri(&self.base_uri).is_err() || !self.base_uri.ends_with('/') {
            return bad(format!("base_uri must be absolute and end with '/', got {:?}", self.base_uri));
        }
        Ok(())
    }

    fn source_config(&self, root: &Path) -> SourceConfig {
        SourceConfig::new(root, self.base_uri.clone())
    }
}

/// Everything needed to resume a simulator besides its tree and log.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SimState {
    config: SimConfig,
    elapsed: f64,
    next_event_at: Option<f64>,
    rng_word_pos: String,
    live: Vec<String>,
    next_id: u64,
}

pub struct Simulator {
    config: SimConfig,
    root: PathBuf,
    rng: ChaCha8Rng,
    /// Virtual seconds since `config.start`.
    elapsed: f64,
    next_event_at: Option<f64>,
    live: Vec<String>,
    next_id: u64,
    log: ChangeLog,
}

impl Simulator {
    /// Materializes the initial tree in `root`, which must be empty or absent.
    pub fn create(config: SimConfig, root: impl Into<PathBuf>) -> Result<Self, SimError> {
        config.validate()?;
        let root = root.into();
        if root.exists() {
            let mut items = fs::read_dir(&root).map_err(io_err(&root))?;
            if items.next().is_some() {
                return Err(SimError::Config(format!("{} is not empty", root.display())));
            }
        }
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut sim = Simulator {
            config,
            root,
            rng,
            elapsed: 0.0,
            next_event_at: None,
            live: Vec::new(),
            next_id: 0,
            log: ChangeLog::new(),
        };
        let start = sim.config.start;
        for _ in 0..sim.config.n_initial {
            let path = sim.mint_path();
            let body = sim.random_body();
            sim.write_resource(&path, &body, start)?;
            sim.live.push(path);
        }
        sim.next_event_at = sim.draw_interarrival();
        Ok(sim)
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn log(&self) -> &ChangeLog {
        &self.log
    }

    pub fn into_log(self) -> ChangeLog {
        self.log
    }

    /// Current virtual instant, truncated to the second.
    pub fn now(&self) -> Timestamp {
        self.config.start.plus_seconds(self.elapsed.floor() as i64)
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    fn draw_interarrival(&mut self) -> Option<f64> {
        if self.config.event_rate <= 0.0 {
            return None;
        }
        let exp = Exp::new(self.config.event_rate).expect("positive rate");
        Some(self.elapsed_base() + exp.sample(&mut self.rng))
    }

    fn elapsed_base(&self) -> f64 {
        self.next_event_at.unwrap_or(self.elapsed)
    }

    fn mint_path(&mut self) -> String {
        let id = self.next_id;
        self.next_id += 1;
        format!("d{:02}/r{:07}.dat", id % 16, id)
    }

    fn random_body(&mut self) -> Vec<u8> {
        let len = self.rng.gen_range(self.config.body_size_min..=self.config.body_size_max);
        let mut body = vec![0u8; len];
        self.rng.fill_bytes(&mut body);
        body
    }

    fn uri(&self, path: &str) -> String {
        format!("{}{}", self.config.base_uri, encode_path(path))
    }

    fn write_resource(&self, rel: &str, body: &[u8], instant: Timestamp) -> Result<(), SimError> {
        let path = join_relative(&self.root, rel).expect("minted paths are relative");
        write_atomic(&path, body).map_err(io_err(&path))?;
        let mtime = SystemTime::UNIX_EPOCH + Duration::from_secs(instant.unix().max(0) as u64);
        let file = fs::File::options().write(true).open(&path).map_err(io_err(&path))?;
        file.set_modified(mtime).map_err(io_err(&path))
    }

    fn pick_kind(&mut self) -> ChangeKind {
        let u: f64 = self.rng.gen();
        let kind = if u < self.config.p_create {
            ChangeKind::Created
        } else if u < self.config.p_create + self.config.p_update {
            ChangeKind::Updated
        } else {
            ChangeKind::Deleted
        };
        if kind != ChangeKind::Created && self.live.is_empty() {
            ChangeKind::Created
        } else {
            kind
        }
    }

    /// Applies one randomly chosen event at `instant`.
    fn fire(&mut self, instant: Timestamp) -> Result<(), SimError> {
        let kind = self.pick_kind();
        let (rel, metadata) = match kind {
            ChangeKind::Created => {
                let rel = self.mint_path();
                let body = self.random_body();
                self.write_resource(&rel, &body, instant)?;
                self.live.push(rel.clone());
                (rel, describe(&body))
            }
            ChangeKind::Updated => {
                let i = self.rng.gen_range(0..self.live.len());
                let rel = self.live[i].clone();
                let path = join_relative(&self.root, &rel).expect("live paths are relative");
                let old = fs::read(&path).map_err(io_err(&path))?;
                let mut body = self.random_body();
                if body == old {
                    body.push(b'\n');
                }
                self.write_resource(&rel, &body, instant)?;
                (rel, describe(&body))
            }
            ChangeKind::Deleted => {
                let i = self.rng.gen_range(0..self.live.len());
                let rel = self.live.swap_remove(i);
                let path = join_relative(&self.root, &rel).expect("live paths are relative");
                fs::remove_file(&path).map_err(io_err(&path))?;
                if let Some(parent) = path.parent() {
                    prune_empty_dirs(&self.root, parent);
                }
                (rel, ResourceMetadata::default())
            }
        };
        let uri = self.uri(&rel);
        self.log.append(instant, uri, kind, metadata)?;
        Ok(())
    }

    /// Advances the virtual clock by `seconds`, firing every event that
    /// falls due. Returns the number of events fired.
    pub fn step(&mut self, seconds: f64) -> Result<usize, SimError> {
        if !seconds.is_finite() || seconds < 0.0 {
            return Err(SimError::Config(format!("cannot step by {seconds} seconds")));
        }
        let target = self.elapsed + seconds;
        let stamp_at_end = self.config.burst;
        let end_instant = self.config.start.plus_seconds(target.floor() as i64);
        let mut fired = 0;
        while let Some(at) = self.next_event_at.filter(|at| *at <= target) {
            let instant =
                if stamp_at_end { end_instant } else { self.config.start.plus_seconds(at.floor() as i64) };
            self.fire(instant)?;
            fired += 1;
            self.next_event_at = self.draw_interarrival();
        }
        self.elapsed = target;
        Ok(fired)
    }

    /// Fires exactly `n` events, all stamped with `instant`, without moving
    /// the Poisson schedule. `instant` must not precede the last logged event.
    pub fn apply_burst(&mut self, n: usize, instant: Timestamp) -> Result<(), SimError> {
        for _ in 0..n {
            self.fire(instant)?;
        }
        let offset = (instant.unix() - self.config.start.unix()) as f64;
        if offset > self.elapsed {
            self.elapsed = offset;
        }
        Ok(())
    }

    /// Scans the simulated tree.
    pub fn snapshot(&self) -> Result<Inventory, SimError> {
        Ok(source::scan_as_of(&self.config.source_config(&self.root), self.now())?)
    }

    /// Writes the resource list and change lists for the current tree into
    /// `web_root`, with documents addressed under `list_base`.
    pub fn publish(&self, web_root: &Path, list_base: &str, period: Duration) -> Result<Vec<PathBuf>, SimError> {
        let inventory = self.snapshot()?;
        Ok(source::publish(web_root, list_base, &inventory, &self.log, period, self.now())?)
    }

    /// Persists the resumable state to `state_path` and the full change log
    /// to `log_path`.
    pub fn save(&self, state_path: &Path, log_path: &Path) -> Result<(), SimError> {
        let state = SimState {
            config: self.config.clone(),
            elapsed: self.elapsed,
            next_event_at: self.next_event_at,
            rng_word_pos: self.rng.get_word_pos().to_string(),
            live: self.live.clone(),
            next_id: self.next_id,
        };
        let mut bytes = serde_json::to_vec_pretty(&state).expect("state serializes");
        bytes.push(b'\n');
        write_atomic(state_path, &bytes).map_err(io_err(state_path))?;
        let mut text = String::new();
        for r in self.log.records() {
            text.push_str(&r.to_line());
            text.push('\n');
        }
        write_atomic(log_path, text.as_bytes()).map_err(io_err(log_path))
    }

    /// Resumes a simulator saved with [`Simulator::save`] over the tree at `root`.
    pub fn load(root: impl Into<PathBuf>, state_path: &Path, log_path: &Path) -> Result<Self, SimError> {
        let bad = |detail: String| SimError::State { path: state_path.to_path_buf(), detail };
        let bytes = fs::read(state_path).map_err(io_err(state_path))?;
        let state: SimState = serde_json::from_slice(&bytes).map_err(|e| bad(e.to_string()))?;
        state.config.validate()?;
        let word_pos: u128 = state.rng_word_pos.parse().map_err(|_| bad("bad rng_word_pos".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(state.config.seed);
        rng.set_word_pos(word_pos);
        let unique: BTreeSet<&String> = state.live.iter().collect();
        if unique.len() != state.live.len() {
            return Err(bad("duplicate live paths".into()));
        }
        Ok(Simulator {
            config: state.config,
            root: root.into(),
            rng,
            elapsed: state.elapsed,
            next_event_at: state.next_event_at,
            live: state.live,
            next_id: state.next_id,
            log: ChangeLog::load(log_path)?,
        })
    }
}

fn describe(body: &[u8]) -> ResourceMetadata {
    let mut md = ResourceMetadata { length: Some(body.len() as u64), ..Default::default() };
    md.insert_digest(digest_bytes(DigestAlgorithm::Md5, body));
    md
}

/// Runs a fresh simulation for the configured duration.
pub fn run(config: SimConfig, root: &Path) -> Result<ChangeLog, SimError> {
    let duration = config.duration;
    let mut sim = Simulator::create(config, root)?;
    sim.step(duration)?;
    Ok(sim.into_log())
}
