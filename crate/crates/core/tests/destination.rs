use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Duration;

use resync::destination::{load_state, save_state, Destination, StoreLock, SyncError, SyncPolicy, STATE_FILE};
use resync::digest::digest_bytes;
use resync::model::{DestinationState, DigestAlgorithm, LocalRecord, Timestamp};
use resync::simulator::{SimConfig, Simulator};
use resync::transport::{serve, HttpClient, TransportConfig};

fn ts(s: &str) -> Timestamp {
    s.parse().unwrap()
}

fn client() -> HttpClient {
    HttpClient::new(TransportConfig { retries: 0, backoff: Duration::from_millis(10), ..Default::default() })
}

/// Relative path to content for every regular file, ignoring reserved names.
fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in walkdir::WalkDir::new(root) {
        let e = e.unwrap();
        let rel = e.path().strip_prefix(root).unwrap().to_str().unwrap().to_string();
        if e.file_type().is_file() && !rel.starts_with(".resync") {
            out.insert(rel, fs::read(e.path()).unwrap());
        }
    }
    out
}

const CHANGELIST: &str = r#"<?xml version="1.0" encoding="UTF-8"?>
<urlset xmlns="http://www.sitemaps.org/schemas/sitemap/0.9"
        xmlns:rs="http://www.openarchives.org/rs/terms/">
  <rs:md capability="changelist"
         modified="2013-01-03T11:00:00Z"/>
  <url>
      <loc>BASEres2.pdf</loc>
      <lastmod>2013-01-02T13:00:00Z</lastmod>
      <rs:md change="updated"/>
  </url>
  <url>
      <loc>BASEres3.tiff</loc>
      <lastmod>2013-01-02T18:00:00Z</lastmod>
      <rs:md change="deleted"/>
  </url>
</urlset>
"#;

#[test]
fn changelist_updates_one_resource_and_deletes_another() {
    let web = tempfile::tempdir().unwrap();
    let store = tempfile::tempdir().unwrap();
    let server = serve(web.path(), "127.0.0.1:0").unwrap();
    let base = server.base_url();
    fs::write(web.path().join("changelist.xml"), CHANGELIST.replace("BASE", &base)).unwrap();
    fs::write(web.path().join("res2.pdf"), b"new pdf").unwrap();

    fs::write(store.path().join("res2.pdf"), b"old pdf").unwrap();
    fs::write(store.path().join("res3.tiff"), b"tiff").unwrap();
    let record = |path: &str, body: &[u8]| LocalRecord {
        digest: digest_bytes(DigestAlgorithm::Md5, body),
        lastmod: ts("2013-01-01T00:00:00Z"),
        local_path: path.into(),
    };
    let mut state = DestinationState {
        source_id: format!("{base}resourcelist.xml"),
        base_uri: Some(base.clone()),
        last_sync: Some(ts("2013-01-02T00:00:00Z")),
        records: [
            (format!("{base}res2.pdf"), record("res2.pdf", b"old pdf")),
            (format!("{base}res3.tiff"), record("res3.tiff", b"tiff")),
        ]
        .into(),
    };

    let dest = Destination::new(client(), store.path(), SyncPolicy::default());
    let report = dest.incremental_sync(&format!("{base}changelist.xml"), &mut state).unwrap();
    assert_eq!((report.created, report.updated, report.deleted, report.failed), (0, 1, 1, 0));
    assert_eq!(fs::read(store.path().join("res2.pdf")).unwrap(), b"new pdf");
    assert!(!store.path().join("res3.tiff").exists());
    assert_eq!(state.last_sync, Some(ts("2013-01-03T11:00:00Z")));
    assert_eq!(state.records.len(), 1);
    assert_eq!(state.records[&format!("{base}res2.pdf")].lastmod, ts("2013-01-02T13:00:00Z"));

    // Applying it again changes nothing.
    let again = dest.incremental_sync(&format!("{base}changelist.xml"), &mut state).unwrap();
    assert_eq!(again.transfers(), 0);
    assert_eq!(again.skipped + again.deleted + again.updated, 0);
}

#[test]
fn sync_requires_baseline() {
    let store = tempfile::tempdir().unwrap();
    let dest = Destination::new(client(), store.path(), SyncPolicy::default());
    let mut state = DestinationState::default();
    let err = dest.incremental_sync("http://127.0.0.1:1/changelist.xml", &mut state).unwrap_err();
    assert!(matches!(err, SyncError::BaselineRequired));
}

#[test]
fn locked_store_is_refused() {
    let store = tempfile::tempdir().unwrap();
    let _held = StoreLock::acquire(store.path()).unwrap();
    let dest = Destination::new(client(), store.path(), SyncPolicy::default());
    let mut state = DestinationState::default();
    let err = dest.baseline_sync("http://127.0.0.1:1/resourcelist.xml", &mut state).unwrap_err();
    assert!(matches!(err, SyncError::Locked(_)));
}

struct Fixture {
    web: tempfile::TempDir,
    store: tempfile::TempDir,
    server: resync::transport::ServerHandle,
    sim: Simulator,
}

impl Fixture {
    fn new(seed: u64, n_initial: usize, rate: f64) -> Self {
        let web = tempfile::tempdir().unwrap();
        let store = tempfile::tempdir().unwrap();
        let server = serve(web.path(), "127.0.0.1:0").unwrap();
        let config = SimConfig {
            seed,
            n_initial,
            event_rate: rate,
            body_size_min: 0,
            body_size_max: 2048,
            base_uri: format!("{}data/", server.base_url()),
            ..Default::default()
        };
        let sim = Simulator::create(config, web.path().join("data")).unwrap();
        let fixture = Fixture { web, store, server, sim };
        fixture.publish();
        fixture
    }

    fn publish(&self) {
        self.sim.publish(self.web.path(), &self.server.base_url(), Duration::from_secs(3600)).unwrap();
    }

    fn uri(&self, name: &str) -> String {
        format!("{}{name}", self.server.base_url())
    }

    fn converged(&self) -> bool {
        tree(&self.web.path().join("data")) == tree(&self.store.path().join("data"))
    }
}

#[test]
fn baseline_sync_and_audit_converge_over_http() {
    let mut f = Fixture::new(11, 40, 0.5);
    let dest = Destination::new(client(), f.store.path(), SyncPolicy::default());
    let mut state = DestinationState::default();

    let report = dest.baseline_sync(&f.uri("resourcelist.xml"), &mut state).unwrap();
    assert_eq!((report.created, report.failed), (40, 0));
    assert!(f.converged());
    assert!(dest.audit(&f.uri("resourcelist.xml"), &state).unwrap().is_consistent());

    let again = dest.baseline_sync(&f.uri("resourcelist.xml"), &mut state).unwrap();
    assert_eq!((again.transfers(), again.skipped), (0, 40));

    for _ in 0..6 {
        f.sim.step(10.0).unwrap();
        f.publish();
        let report = dest.incremental_sync(&f.uri("changelist-index.xml"), &mut state).unwrap();
        assert!(report.is_success(), "{report:?}");
    }
    assert!(!f.sim.log().is_empty());
    assert!(f.converged());
    let audit = dest.audit(&f.uri("resourcelist.xml"), &state).unwrap();
    assert!(audit.is_consistent(), "{audit:?}");

    let state_path = f.store.path().join(STATE_FILE);
    save_state(&state, &state_path).unwrap();
    assert_eq!(load_state(&state_path).unwrap(), state);
}

#[test]
fn deletes_can_be_withheld() {
    let mut f = Fixture::new(5, 10, 0.0);
    let dest = Destination::new(client(), f.store.path(), SyncPolicy::default());
    let mut state = DestinationState::default();
    dest.baseline_sync(&f.uri("resourcelist.xml"), &mut state).unwrap();

    f.sim.apply_burst(30, f.sim.now().plus_seconds(5)).unwrap();
    f.publish();
    let keep = Destination::new(client(), f.store.path(), SyncPolicy { apply_deletes: false, ..Default::default() });
    let report = keep.incremental_sync(&f.uri("changelist.xml"), &mut state).unwrap();
    assert!(report.is_success(), "{report:?}");
    let deleted = f.sim.log().records().iter().filter(|r| r.kind == resync::model::ChangeKind::Deleted).count();
    assert!(deleted > 0);
    let audit = keep.audit(&f.uri("resourcelist.xml"), &state).unwrap();
    assert!(audit.missing.is_empty() && audit.stale.is_empty());
    assert!(!audit.extraneous.is_empty());

    let report = dest.baseline_sync(&f.uri("resourcelist.xml"), &mut state).unwrap();
    assert!(report.deleted > 0);
    assert!(dest.audit(&f.uri("resourcelist.xml"), &state).unwrap().is_consistent());
    assert!(f.converged());
}

#[test]
fn digest_mismatch_fails_the_resource_and_holds_last_sync() {
    let web = tempfile::tempdir().unwrap();
    let store = tempfile::tempdir().unwrap();
    let server = serve(web.path(), "127.0.0.1:0").unwrap();
    let base = server.base_url();
    let wrong = digest_bytes(DigestAlgorithm::Md5, b"something else");
    let list = format!(
        r#"<?xml version="1.0" encoding="UTF-8"?>
<urlset xmlns="http://www.sitemaps.org/schemas/sitemap/0.9" xmlns:rs="http://www.openarchives.org/rs/terms/">
  <rs:md capability="resourcelist" modified="2013-01-03T09:00:00Z"/>
  <url><loc>{base}good</loc><rs:md length="4"/></url>
  <url><loc>{base}bad</loc><rs:md hash="md5:{}"/></url>
</urlset>
"#,
        wrong.hex
    );
    fs::write(web.path().join("resourcelist.xml"), list).unwrap();
    fs::write(web.path().join("good"), b"good").unwrap();
    fs::write(web.path().join("bad"), b"bad").unwrap();

    let dest = Destination::new(client(), store.path(), SyncPolicy::default());
    let mut state = DestinationState::default();
    let report = dest.baseline_sync(&format!("{base}resourcelist.xml"), &mut state).unwrap();
    assert_eq!((report.created, report.failed), (1, 1));
    assert_eq!(report.failures[0].uri, format!("{base}bad"));
    assert!(!store.path().join("bad").exists());
    assert_eq!(state.last_sync, None);
    assert!(!store.path().join(".resync.tmp").exists());

    let audit = dest.audit(&format!("{base}resourcelist.xml"), &state).unwrap();
    assert_eq!(audit.missing, vec![format!("{base}bad")]);
    assert_eq!(audit.in_sync, 1);
}

#[test]
fn stale_entries_are_skipped_unless_policy_says_otherwise() {
    let web = tempfile::tempdir().unwrap();
    let store = tempfile::tempdir().unwrap();
    let server = serve(web.path(), "127.0.0.1:0").unwrap();
    let base = server.base_url();
    fs::write(web.path().join("changelist.xml"), CHANGELIST.replace("BASE", &base)).unwrap();
    fs::write(web.path().join("res2.pdf"), b"new pdf").unwrap();
    fs::write(store.path().join("res2.pdf"), b"newer pdf").unwrap();

    let fresh = LocalRecord {
        digest: digest_bytes(DigestAlgorithm::Md5, b"newer pdf"),
        lastmod: ts("2013-01-02T15:00:00Z"),
        local_path: "res2.pdf".into(),
    };
    let make_state = || DestinationState {
        source_id: format!("{base}resourcelist.xml"),
        base_uri: Some(base.clone()),
        last_sync: Some(ts("2013-01-02T00:00:00Z")),
        records: [(format!("{base}res2.pdf"), fresh.clone())].into(),
    };

    let mut state = make_state();
    let dest = Destination::new(client(), store.path(), SyncPolicy::default());
    let report = dest.incremental_sync(&format!("{base}changelist.xml"), &mut state).unwrap();
    assert_eq!((report.updated, report.skipped, report.deleted), (0, 2, 0));
    assert_eq!(fs::read(store.path().join("res2.pdf")).unwrap(), b"newer pdf");

    let mut state = make_state();
    let eager = Destination::new(client(), store.path(), SyncPolicy { stale_wins: true, ..Default::default() });
    let report = eager.incremental_sync(&format!("{base}changelist.xml"), &mut state).unwrap();
    assert_eq!(report.updated, 1);
    assert_eq!(fs::read(store.path().join("res2.pdf")).unwrap(), b"new pdf");
}
