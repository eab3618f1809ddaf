//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line for
//! each and exits non-zero if any failed.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Stdio;
use std::thread;
use std::time::{Duration, Instant};

use common::{bin, run, run_json, tree, write_sim_config, Server};
use rand::rngs::StdRng;
use rand::{Rng, RngCore, SeedableRng};
use resync::codec::{parse_document, serialize_document};
use resync::digest::digest_bytes;
use resync::model::{
    CapabilityKind, ChangeKind, DigestAlgorithm, Inventory, ResourceEntry, ResourceMetadata, SyncDocument, Timestamp,
    MAX_DOCUMENT_BYTES,
};
use resync::simulator::{SimConfig, Simulator};
use resync::source::{decode_path, diff_inventories, generate_resource_list, scan_as_of, SourceConfig};

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ts(s: &str) -> Timestamp {
    s.parse().unwrap()
}

const RESOURCE_LIST: &str = r#"<?xml version="1.0" encoding="UTF-8"?>
<urlset xmlns="http://www.sitemaps.org/schemas/sitemap/0.9"
        xmlns:rs="http://www.openarchives.org/rs/terms/">
  <rs:md capability="resourcelist"
         modified="2013-01-03T09:00:00Z"/>
  <url>
      <loc>http://example.com/res1</loc>
  </url>
  <url>
      <loc>http://example.com/res2</loc>
  </url>
</urlset>
"#;

const CHANGE_LIST: &str = r#"<?xml version="1.0" encoding="UTF-8"?>
<urlset xmlns="http://www.sitemaps.org/schemas/sitemap/0.9"
        xmlns:rs="http://www.openarchives.org/rs/terms/">
  <rs:md capability="changelist"
         modified="2013-01-03T11:00:00Z"/>
  <url>
      <loc>http://example.com/res2.pdf</loc>
      <lastmod>2013-01-02T13:00:00Z</lastmod>
      <rs:md change="updated"/>
  </url>
  <url>
      <loc>http://example.com/res3.tiff</loc>
      <lastmod>2013-01-02T18:00:00Z</lastmod>
      <rs:md change="deleted"/>
  </url>
</urlset>
"#;

fn golden_listings() -> Outcome {
    let rl = parse_document(RESOURCE_LIST.as_bytes()).map_err(|e| e.to_string())?;
    check!(rl.capability.as_str() == "resourcelist", "capability {}", rl.capability);
    check!(rl.modified.to_string() == "2013-01-03T09:00:00Z", "modified {}", rl.modified);
    let uris: Vec<&str> = rl.entries.iter().map(|e| e.uri.as_str()).collect();
    check!(uris == ["http://example.com/res1", "http://example.com/res2"], "uris {uris:?}");
    check!(rl.entries.iter().all(|e| e.lastmod.is_none() && e.metadata.is_empty()), "unexpected metadata");

    let cl = parse_document(CHANGE_LIST.as_bytes()).map_err(|e| e.to_string())?;
    check!(cl.capability.as_str() == "changelist", "capability {}", cl.capability);
    check!(cl.modified.to_string() == "2013-01-03T11:00:00Z", "modified {}", cl.modified);
    let rows: Vec<(String, String, String)> = cl
        .entries
        .iter()
        .map(|e| (e.uri.clone(), e.lastmod.map(|t| t.to_string()).unwrap_or_default(), e.change().map(|c| c.as_str().to_string()).unwrap_or_default()))
        .collect();
    let expected = [
        ("http://example.com/res2.pdf", "2013-01-02T13:00:00Z", "updated"),
        ("http://example.com/res3.tiff", "2013-01-02T18:00:00Z", "deleted"),
    ]
    .map(|(a, b, c)| (a.to_string(), b.to_string(), c.to_string()));
    check!(rows == expected, "entries {rows:?}");

    for doc in [&rl, &cl] {
        let bytes = serialize_document(doc).map_err(|e| e.to_string())?;
        let again = parse_document(&bytes).map_err(|e| e.to_string())?;
        check!(&again == doc, "round trip changed {:?}", doc.capability);
    }
    Ok("both listings exact and round-trip".into())
}

fn random_uri(rng: &mut StdRng, i: usize) -> String {
    const SEGMENT: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789-._~";
    let host = ["http://example.com", "https://example.org:8443", "http://127.0.0.1:8080"][rng.gen_range(0..3)];
    let mut uri = format!("{host}/{i}");
    for _ in 0..rng.gen_range(1..4) {
        uri.push('/');
        for _ in 0..rng.gen_range(1..10) {
            uri.push(SEGMENT[rng.gen_range(0..SEGMENT.len())] as char);
        }
    }
    match rng.gen_range(0..4) {
        0 => uri.push_str("?a=1&b=%C3%A9"),
        1 => uri.push_str("%20x%3Cy%3E"),
        _ => {}
    }
    uri
}

fn random_hex(rng: &mut StdRng, len: usize) -> String {
    (0..len).map(|_| char::from_digit(rng.gen_range(0..16), 16).unwrap()).collect()
}

fn random_timestamp(rng: &mut StdRng) -> Timestamp {
    Timestamp::from_unix(rng.gen_range(0..4_102_444_800)).unwrap()
}

fn random_metadata(rng: &mut StdRng) -> ResourceMetadata {
    let mut md = ResourceMetadata::default();
    for alg in [DigestAlgorithm::Md5, DigestAlgorithm::Sha1, DigestAlgorithm::Sha256] {
        if rng.gen_bool(0.5) {
            md.digests.insert(alg, random_hex(rng, alg.hex_len()));
        }
    }
    if rng.gen_bool(0.5) {
        md.length = Some(rng.gen_range(0..u64::MAX / 2));
    }
    if rng.gen_bool(0.3) {
        md.mime_type = Some(["text/html", "application/pdf", "image/tiff", "text/plain;charset=utf-8"][rng.gen_range(0..4)].into());
    }
    md
}

fn random_document(rng: &mut StdRng) -> SyncDocument {
    let capability = [
        CapabilityKind::ResourceList,
        CapabilityKind::ChangeList,
        CapabilityKind::ResourceListIndex,
        CapabilityKind::ChangeListIndex,
    ][rng.gen_range(0..4)];
    let modified = random_timestamp(rng);
    let n = rng.gen_range(0..40);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        // Change lists may name one URI more than once.
        let uri = if capability == CapabilityKind::ChangeList && i > 0 && rng.gen_bool(0.2) {
            entries.last().map(|e: &ResourceEntry| e.uri.clone()).unwrap()
        } else {
            random_uri(rng, i)
        };
        let lastmod = rng.gen_bool(0.7).then(|| random_timestamp(rng));
        let entry = match capability {
            CapabilityKind::ResourceList => ResourceEntry { uri, lastmod, metadata: random_metadata(rng) },
            CapabilityKind::ChangeList => {
                let mut md = random_metadata(rng);
                md.change = Some([ChangeKind::Created, ChangeKind::Updated, ChangeKind::Deleted][rng.gen_range(0..3)]);
                ResourceEntry { uri, lastmod: Some(lastmod.unwrap_or(modified)), metadata: md }
            }
            _ => ResourceEntry { uri, lastmod, metadata: ResourceMetadata::default() },
        };
        entries.push(entry);
    }
    if capability == CapabilityKind::ChangeList {
        entries.sort_by_key(|e| e.lastmod);
    }
    SyncDocument { capability, modified, entries }
}

fn codec_round_trip() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x5eed_0002);
    let mut entries = 0;
    for i in 0..1000 {
        let doc = random_document(&mut rng);
        doc.validate().map_err(|e| format!("generator produced invalid document {i}: {e}"))?;
        let bytes = serialize_document(&doc).map_err(|e| format!("document {i}: {e}"))?;
        let parsed = parse_document(&bytes).map_err(|e| format!("document {i}: {e}"))?;
        check!(parsed == doc, "document {i} differs after round trip");
        entries += doc.entries.len();
    }
    Ok(format!("1000/1000 documents, {entries} entries"))
}

fn random_body(rng: &mut StdRng) -> Vec<u8> {
    // Mostly small files, occasionally empty or at the 64 KiB limit.
    let len = match rng.gen_range(0..20) {
        0 => 0,
        1 => 64 * 1024,
        _ => (2f64.powf(rng.gen_range(0.0..16.0)) as usize).min(64 * 1024),
    };
    let mut body = vec![0u8; len];
    rng.fill_bytes(&mut body);
    body
}

fn write_tree(root: &Path, files: &BTreeMap<String, Vec<u8>>) {
    fs::create_dir_all(root).unwrap();
    for (rel, body) in files {
        let path = root.join(rel);
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, body).unwrap();
    }
}

fn diff_apply_oracle() -> Outcome {
    const BASE: &str = "http://example.com/tree/";
    let mut rng = StdRng::seed_from_u64(0x5eed_0003);
    let mut totals = [0usize; 3];
    for pair in 0..100 {
        let dir = tempfile::tempdir().unwrap();
        let names = ["a", "b c", "dir/x", "dir/sub/y", "é", "f%2", "g+h"];
        let mut a = BTreeMap::new();
        for i in 0..rng.gen_range(0..=200) {
            a.insert(format!("{}-{i}", names[rng.gen_range(0..names.len())]), random_body(&mut rng));
        }
        let mut b = BTreeMap::new();
        for (k, v) in &a {
            match rng.gen_range(0..10) {
                0 | 1 => {}
                2 => {
                    let mut v = v.clone();
                    match v.len() {
                        0 => v.push(0),
                        n => v[rng.gen_range(0..n)] ^= 1,
                    }
                    b.insert(k.clone(), v);
                }
                3 | 4 => {
                    b.insert(k.clone(), random_body(&mut rng));
                }
                _ => {
                    b.insert(k.clone(), v.clone());
                }
            }
        }
        let mut extra = 0;
        while b.len() < 200 && rng.gen_bool(0.3) {
            b.insert(format!("new/{extra}-{}", names[rng.gen_range(0..names.len())]), random_body(&mut rng));
            extra += 1;
        }
        let (root_a, root_b, root_c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
        write_tree(&root_a, &a);
        write_tree(&root_b, &b);
        write_tree(&root_c, &a);

        let inv = |root: &Path, t| scan_as_of(&SourceConfig::new(root, BASE), t).map_err(|e| e.to_string());
        let inv_a: Inventory = inv(&root_a, ts("2013-01-01T00:00:00Z"))?;
        let inv_b: Inventory = inv(&root_b, ts("2013-01-02T00:00:00Z"))?;
        let diff = diff_inventories(&inv_a, &inv_b).map_err(|e| e.to_string())?;

        // Apply the diff to a copy of A using B's bytes.
        for e in &diff.entries {
            let rel = decode_path(e.uri.strip_prefix(BASE).ok_or("uri outside base")?).ok_or("bad encoding")?;
            let target = root_c.join(&rel);
            match e.change() {
                Some(ChangeKind::Deleted) => fs::remove_file(&target).map_err(|err| format!("{rel}: {err}"))?,
                Some(ChangeKind::Created | ChangeKind::Updated) => {
                    fs::create_dir_all(target.parent().unwrap()).unwrap();
                    fs::copy(root_b.join(&rel), &target).map_err(|err| format!("{rel}: {err}"))?;
                }
                None => return Err("change entry without kind".into()),
            }
            totals[match e.change().unwrap() {
                ChangeKind::Created => 0,
                ChangeKind::Updated => 1,
                ChangeKind::Deleted => 2,
            }] += 1;
        }
        check!(tree(&root_c) == b, "pair {pair}: applying the diff does not reproduce B");
    }
    Ok(format!("100/100 pairs, {} created {} updated {} deleted", totals[0], totals[1], totals[2]))
}

/// A simulator web root served by `resync serve`, plus a store.
struct Scenario {
    dir: tempfile::TempDir,
    server: Server,
}

impl Scenario {
    fn new(seed: u64, n_initial: usize, rate: f64, max_body: usize) -> Result<Self, String> {
        let dir = tempfile::tempdir().unwrap();
        let server = Server::start(&dir.path().join("sim/web"));
        let config = dir.path().join("sim.toml");
        write_sim_config(&config, seed, n_initial, rate, max_body);
        let s = Scenario { dir, server };
        let r = run(&["simulate", "--config", config.to_str().unwrap(), "--out", &s.out(), "--publish-base", &s.server.url]);
        check!(r.code == 0, "simulate: {}", r.stderr);
        Ok(s)
    }

    fn out(&self) -> String {
        self.dir.path().join("sim").to_str().unwrap().into()
    }

    fn store(&self) -> String {
        self.dir.path().join("store").to_str().unwrap().into()
    }

    fn data(&self) -> std::path::PathBuf {
        self.dir.path().join("sim/web/data")
    }

    fn advance(&self, extra: &[&str]) -> Result<(), String> {
        let out = self.out();
        let mut args = vec!["simulate", "--out", out.as_str(), "--continue"];
        args.extend_from_slice(extra);
        let r = run(&args);
        check!(r.code == 0, "simulate --continue: {}", r.stderr);
        Ok(())
    }

    fn dest(&self, command: &str) -> (i32, serde_json::Value) {
        let store = self.store();
        run_json(&[command, "--source", &self.server.url, "--store", &store])
    }

    fn audit_clean(&self) -> Result<bool, String> {
        let (code, report) = self.dest("audit");
        let r = &report["report"];
        let empty = ["missing", "stale", "extraneous"].iter().all(|k| r[*k].as_array().is_some_and(Vec::is_empty));
        check!((code == 0) == empty, "audit exit {code} disagrees with report {report}");
        Ok(empty)
    }

    fn converged(&self) -> bool {
        tree(&self.data()) == tree(&self.dir.path().join("store/data"))
    }
}

fn count(report: &serde_json::Value, key: &str) -> u64 {
    report["report"][key].as_u64().unwrap_or(u64::MAX)
}

fn end_to_end() -> Outcome {
    let started = Instant::now();
    let s = Scenario::new(2024, 500, 1.4, 4096)?;
    let (code, report) = s.dest("baseline");
    check!(code == 0 && count(&report, "created") == 500, "baseline: {code} {report}");
    let mut applied = 0;
    for step in 0..6 {
        s.advance(&["--duration", "10"])?;
        let (code, report) = s.dest("sync");
        check!(code == 0, "poll {step}: exit {code} {report}");
        applied += count(&report, "created") + count(&report, "updated") + count(&report, "deleted");
    }
    // Quiescence: no more events, keep polling until audit is clean.
    let mut polls = 0;
    let mut clean = s.audit_clean()?;
    while !clean && polls < 2 {
        s.advance(&["--duration", "10"])?;
        let (code, report) = s.dest("sync");
        check!(code == 0, "quiescent poll: exit {code} {report}");
        polls += 1;
        clean = s.audit_clean()?;
    }
    check!(clean, "audit not clean after 2 quiescent polls");
    check!(s.converged(), "store differs from source tree");
    let events = fs::read_to_string(s.dir.path().join("sim/changes.log")).unwrap().lines().count();
    let elapsed = started.elapsed();
    check!(elapsed <= Duration::from_secs(90), "took {elapsed:?}");
    Ok(format!("{events} events over 60 s, {applied} entries applied, clean after {polls} extra polls, {:.1?}", elapsed))
}

fn burst() -> Outcome {
    let s = Scenario::new(1800, 500, 0.0, 2048)?;
    let (code, report) = s.dest("baseline");
    check!(code == 0, "baseline: {report}");
    s.advance(&["--burst", "1800"])?;

    let list = parse_document(&fs::read(s.dir.path().join("sim/web/changelist.xml")).unwrap()).map_err(|e| e.to_string())?;
    check!(list.entries.len() == 1800, "change list holds {} entries", list.entries.len());
    let instants: BTreeSet<_> = list.entries.iter().map(|e| e.lastmod).collect();
    check!(instants.len() == 1, "burst spans {} instants", instants.len());
    let mut histogram = BTreeMap::new();
    for e in &list.entries {
        *histogram.entry(e.change().unwrap().as_str()).or_insert(0u64) += 1;
    }

    let started = Instant::now();
    let (code, report) = s.dest("sync");
    let elapsed = started.elapsed();
    check!(code == 0, "sync: {report}");
    for kind in ["created", "updated", "deleted"] {
        let expected = histogram.get(kind).copied().unwrap_or(0);
        check!(count(&report, kind) == expected, "{kind}: report {} vs list {expected}", count(&report, kind));
    }
    check!(count(&report, "skipped") == 0 && count(&report, "failed") == 0, "{report}");
    check!(s.audit_clean()?, "audit not clean");
    check!(s.converged(), "store differs from source tree");
    check!(elapsed <= Duration::from_secs(60), "sync took {elapsed:?}");
    Ok(format!("1800 entries {histogram:?} applied in {elapsed:.1?}"))
}

fn partitioning() -> Outcome {
    let base = "http://example.com/p/";
    let taken = ts("2013-01-03T09:00:00Z");
    let mut inv = Inventory::new(base, taken);
    let mut rng = StdRng::seed_from_u64(0x5eed_0006);
    for i in 0..120_001u32 {
        let mut md = ResourceMetadata { length: Some(rng.gen_range(0..1 << 20)), ..Default::default() };
        md.insert_digest(digest_bytes(DigestAlgorithm::Md5, &i.to_le_bytes()));
        // Non-monotonic names so ordering is actually exercised.
        let uri = format!("{base}{:08x}/{i}", i.wrapping_mul(2_654_435_761));
        inv.insert(ResourceEntry { uri, lastmod: Some(taken), metadata: md });
    }
    let set = generate_resource_list(&inv, taken, base).map_err(|e| e.to_string())?;
    let index = set.index.as_ref().ok_or("no index produced")?;
    check!(set.members.len() == 3, "{} members", set.members.len());
    check!(index.entries.len() == 3, "index lists {}", index.entries.len());
    check!(set.files().len() == 4, "{} files", set.files().len());

    let mut concatenated = Vec::new();
    for (name, doc) in set.files() {
        let bytes = serialize_document(doc).map_err(|e| format!("{name}: {e}"))?;
        check!(bytes.len() <= MAX_DOCUMENT_BYTES, "{name} is {} bytes", bytes.len());
        let parsed = parse_document(&bytes).map_err(|e| format!("{name}: {e}"))?;
        check!(&parsed == doc, "{name} does not round-trip");
        if parsed.capability == CapabilityKind::ResourceList {
            concatenated.extend(parsed.entries);
        }
    }
    let mut sorted: Vec<ResourceEntry> = inv.items.values().cloned().collect();
    sorted.sort_by(|a, b| a.uri.cmp(&b.uri));
    check!(concatenated == sorted, "concatenated members differ from the sorted inventory");
    let sizes: Vec<usize> = set.members.iter().map(|m| m.entries.len()).collect();
    Ok(format!("members {sizes:?} + 1 index"))
}

/// Every file in the store, reserved names included except the lock.
fn store_bytes(store: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in walkdir::WalkDir::new(store) {
        let e = e.unwrap();
        let rel = e.path().strip_prefix(store).unwrap().to_str().unwrap().to_string();
        if e.file_type().is_file() && rel != ".resync.lock" {
            out.insert(rel, fs::read(e.path()).unwrap());
        }
    }
    out
}

fn idempotence() -> Outcome {
    let s = Scenario::new(7, 200, 2.0, 8192)?;
    let store = s.dir.path().join("store");
    let (code, first) = s.dest("baseline");
    check!(code == 0, "baseline: {first}");
    let before = store_bytes(&store);
    let (code, again) = s.dest("baseline");
    check!(code == 0, "second baseline: {again}");
    check!(count(&again, "created") + count(&again, "updated") == 0, "second baseline transferred: {again}");
    check!(count(&again, "deleted") == 0, "second baseline deleted: {again}");
    check!(store_bytes(&store) == before, "second baseline changed the store");

    s.advance(&["--duration", "30"])?;
    let (code, sync) = s.dest("sync");
    check!(code == 0, "sync: {sync}");
    let after_sync = store_bytes(&store);
    let (code, resync) = s.dest("sync");
    check!(code == 0, "re-sync: {resync}");
    check!(count(&resync, "created") + count(&resync, "updated") == 0, "re-sync transferred: {resync}");
    check!(store_bytes(&store) == after_sync, "re-applying the change list changed the store");
    check!(s.converged(), "store differs from source tree");
    Ok(format!(
        "baseline {} files then 0 transfers; sync {} transfers then 0",
        count(&first, "created"),
        count(&sync, "created") + count(&sync, "updated")
    ))
}

fn digests(files: &BTreeMap<String, Vec<u8>>) -> BTreeMap<String, String> {
    files.iter().map(|(k, v)| (k.clone(), digest_bytes(DigestAlgorithm::Md5, v).hex)).collect()
}

/// Runs a destination command and SIGKILLs it after `delay`. Returns
/// whether it was still running when killed.
fn run_and_kill(command: &str, s: &Scenario, delay: Duration) -> bool {
    let store = s.store();
    let mut child = bin()
        .args([command, "--source", &s.server.url, "--store", &store])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    thread::sleep(delay);
    let running = child.try_wait().unwrap().is_none();
    let _ = child.kill();
    let _ = child.wait();
    running
}

fn crash_safety() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x5eed_0008);
    let mut trials = 0;
    let mut attempts = 0;
    let mut landed = Vec::new();
    while trials < 10 {
        attempts += 1;
        check!(attempts <= 60, "could not land 10 kills mid-sync in {attempts} attempts");
        let s = Scenario::new(800 + attempts, 300, 0.0, 96 * 1024)?;
        let store = s.dir.path().join("store");
        let incremental = trials % 2 == 1;

        let old = digests(&tree(&s.data()));
        let (command, valid): (&str, Vec<BTreeMap<String, String>>) = if incremental {
            let (code, report) = s.dest("baseline");
            check!(code == 0, "baseline: {report}");
            s.advance(&["--burst", "400"])?;
            ("sync", vec![old, digests(&tree(&s.data()))])
        } else {
            ("baseline", vec![old])
        };
        // Time an undisturbed run on a scratch copy of the store.
        let scratch = s.dir.path().join("scratch");
        copy_dir(&store, &scratch);
        let full = {
            let started = Instant::now();
            let r = run(&[command, "--source", &s.server.url, "--store", scratch.to_str().unwrap()]);
            check!(r.code == 0, "scratch {command}: {}", r.stderr);
            started.elapsed()
        };
        let delay = full.mul_f64(rng.gen_range(0.05..0.9));
        if !run_and_kill(command, &s, delay) {
            continue;
        }
        // No final path may hold anything but a published version.
        let present = tree(&store.join("data"));
        landed.push(present.len());
        for (rel, bytes) in present {
            let d = digest_bytes(DigestAlgorithm::Md5, &bytes).hex;
            check!(valid.iter().any(|v| v.get(&rel) == Some(&d)), "trial {trials}: {rel} holds unpublished bytes");
        }
        let (code, report) = s.dest("baseline");
        check!(code == 0, "trial {trials}: recovery baseline {report}");
        check!(s.audit_clean()?, "trial {trials}: audit not clean after recovery");
        check!(s.converged(), "trial {trials}: store differs from source");
        trials += 1;
    }
    Ok(format!("10/10 kills mid-sync recovered ({attempts} attempts, files in place at kill: {landed:?})"))
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    if !from.exists() {
        return;
    }
    for e in walkdir::WalkDir::new(from) {
        let e = e.unwrap();
        let rel = e.path().strip_prefix(from).unwrap();
        if rel.starts_with(".resync.lock") {
            continue;
        }
        let target = to.join(rel);
        if e.file_type().is_dir() {
            fs::create_dir_all(&target).unwrap();
        } else if e.file_type().is_file() {
            fs::copy(e.path(), &target).unwrap();
        }
    }
}

fn audit_sensitivity() -> Outcome {
    let s = Scenario::new(9, 50, 0.0, 1024)?;
    let store = s.dir.path().join("store");
    let (code, report) = s.dest("baseline");
    check!(code == 0, "baseline: {report}");
    check!(s.audit_clean()?, "fresh store not clean");

    let files: Vec<String> = tree(&store.join("data")).into_iter().filter(|(_, v)| !v.is_empty()).map(|(k, _)| k).collect();
    let uri = |rel: &str| format!("{}data/{rel}", s.server.url);
    let expect = |category: &str, uri: String| -> Result<(), String> {
        let (code, report) = s.dest("audit");
        check!(code == 1, "audit exit {code}");
        for k in ["missing", "stale", "extraneous"] {
            let got: Vec<&str> = report["report"][k].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
            let want: Vec<&str> = if k == category { vec![uri.as_str()] } else { vec![] };
            check!(got == want, "{category} case: {k} = {got:?}");
        }
        Ok(())
    };

    let target = store.join("data").join(&files[0]);
    let mut bytes = fs::read(&target).unwrap();
    let original = bytes.clone();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    fs::write(&target, &bytes).unwrap();
    expect("stale", uri(&files[0]))?;
    fs::write(&target, &original).unwrap();
    check!(s.audit_clean()?, "restored byte not clean");

    let target = store.join("data").join(&files[1]);
    let original = fs::read(&target).unwrap();
    fs::remove_file(&target).unwrap();
    expect("missing", uri(&files[1]))?;
    fs::write(&target, &original).unwrap();
    check!(s.audit_clean()?, "restored file not clean");

    fs::write(store.join("data/extra file.bin"), b"x").unwrap();
    expect("extraneous", uri("extra%20file.bin"))?;
    Ok("corruption -> stale, deletion -> missing, extra file -> extraneous".into())
}

/// Central 99% interval of a Poisson distribution with mean `lambda`.
fn poisson_band(lambda: f64) -> (usize, usize) {
    let mut cdf = 0.0;
    let mut log_pmf = -lambda;
    let (mut lo, mut hi) = (None, None);
    for k in 0..10_000usize {
        if k > 0 {
            log_pmf += lambda.ln() - (k as f64).ln();
        }
        cdf += log_pmf.exp();
        if lo.is_none() && cdf >= 0.005 {
            lo = Some(k);
        }
        if cdf >= 0.995 {
            hi = Some(k);
            break;
        }
    }
    (lo.unwrap(), hi.unwrap())
}

fn simulator_statistics() -> Outcome {
    let lambda = 1.4 * 60.0;
    let (lo, hi) = poisson_band(lambda);
    let dir = tempfile::tempdir().unwrap();
    let mut counts = Vec::new();
    for seed in 0..20u64 {
        let config = SimConfig {
            seed,
            n_initial: 20,
            event_rate: 1.4,
            duration: 60.0,
            body_size_min: 0,
            body_size_max: 256,
            ..Default::default()
        };
        let run_once = |name: &str| {
            let root = dir.path().join(format!("{seed}-{name}"));
            let mut sim = Simulator::create(config.clone(), &root).unwrap();
            sim.step(config.duration).unwrap();
            (sim.log().records().to_vec(), tree(&root))
        };
        let (log_a, tree_a) = run_once("a");
        let (log_b, tree_b) = run_once("b");
        check!(log_a == log_b && tree_a == tree_b, "seed {seed} is not reproducible");
        check!((lo..=hi).contains(&log_a.len()), "seed {seed}: {} events outside [{lo}, {hi}]", log_a.len());
        counts.push(log_a.len());
    }
    let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
    Ok(format!("band [{lo}, {hi}], counts {}..{} (mean {mean:.1}), all reproducible", counts.iter().min().unwrap(), counts.iter().max().unwrap()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("golden-file fidelity", golden_listings),
        ("codec round-trip", codec_round_trip),
        ("diff/apply oracle", diff_apply_oracle),
        ("end-to-end convergence", end_to_end),
        ("burst mode", burst),
        ("partitioning", partitioning),
        ("idempotence", idempotence),
        ("crash safety", crash_safety),
        ("audit sensitivity", audit_sensitivity),
        ("simulator statistics", simulator_statistics),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let started = Instant::now();
    let mut failed = 0;
    for (i, (name, criterion)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(criterion)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail}) [{:.1?}]", i + 1, t.elapsed()),
            Err(reason) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({reason}) [{:.1?}]", i + 1, t.elapsed());
            }
        }
    }
    println!("acceptance: {} failed, total {:.1?}", failed, started.elapsed());
    if failed > 0 {
        std::process::exit(1);
    }
}
