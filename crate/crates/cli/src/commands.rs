use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc;

use anyhow::{Context, Result};
use log::{info, LevelFilter};
use resync::codec::{parse_document, serialize_document};
use resync::destination::{load_state, save_state, Destination, STATE_FILE};
use resync::fsutil::write_atomic;
use resync::model::{AuditReport, CapabilityKind, Inventory, SyncDocument, SyncReport, Timestamp};
use resync::simulator::Simulator;
use resync::source::{
    common_directory_prefix, covered_until, diff_inventories, emit_changelists_until, generate_resource_list,
    inventory_from_documents, scan_as_of, ChangeLog, SourceConfig, CHANGELIST_FILE, CHANGELIST_INDEX_FILE,
    RESOURCELIST_FILE, RESOURCELIST_INDEX_FILE,
};
use resync::transport::{serve, HttpClient, TransportError};
use serde::Serialize;
use serde_json::json;

use crate::config::{
    check_base, parse_digests, parse_period, DestinationFlags, FileConfig, SimulatorFlags, SIM_DATA_DIR,
};
use crate::{
    exit, AuditArgs, ChangesArgs, Cli, Command, DestinationArgs, Format, ListArgs, ServeArgs, SimulateArgs, SyncArgs,
    UsageError,
};

/// Version of the JSON report layout.
const REPORT_SCHEMA_VERSION: u32 = 1;

const SIM_STATE_FILE: &str = "simulator.json";
const SIM_LOG_FILE: &str = "changes.log";
const SIM_WEB_DIR: &str = "web";

pub fn run(cli: Cli) -> Result<u8> {
    let file = FileConfig::load(cli.config.as_deref())?;
    init_logging(cli.log_level.as_deref().or(file.log.level.as_deref()))?;
    let format = cli.format;
    match cli.command {
        Command::List(args) => list(&file, args, format),
        Command::Changes(args) => changes(&file, args, format),
        Command::Baseline(args) => baseline(&file, args, format),
        Command::Sync(args) => sync(&file, args, format),
        Command::Audit(args) => audit(&file, args, format),
        Command::Serve(args) => serve_dir(args),
        Command::Simulate(args) => simulate(&file, args, format),
    }
}

fn init_logging(level: Option<&str>) -> Result<()> {
    let level = match level {
        Some(l) => LevelFilter::from_str(l).map_err(|_| UsageError::Flag(format!("unknown log level {l:?}")))?,
        None => LevelFilter::Warn,
    };
    env_logger::Builder::new().filter_level(level).target(env_logger::Target::Stderr).init();
    Ok(())
}

fn flag<T>(value: Option<T>, name: &str) -> Result<T, UsageError> {
    value.ok_or_else(|| UsageError::Flag(format!("{name} is required")))
}

fn print_json(command: &str, body: impl Serialize) -> Result<()> {
    let value = json!({ "schema_version": REPORT_SCHEMA_VERSION, "command": command, "report": body });
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, &value)?;
    writeln!(out)?;
    Ok(())
}

fn parse_instant(text: &str) -> Result<Timestamp, UsageError> {
    text.parse().map_err(|e| UsageError::Flag(format!("bad instant {text:?}: {e}")))
}

fn write_document(path: &Path, doc: &SyncDocument) -> Result<()> {
    let bytes = serialize_document(doc)?;
    write_atomic(path, &bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn list(file: &FileConfig, args: ListArgs, format: Format) -> Result<u8> {
    let src = &file.source;
    let root = flag(args.root.or_else(|| src.root.clone()), "--root")?;
    let base = flag(args.base_uri.or_else(|| src.base_uri.clone()), "--base-uri")?;
    check_base("--base-uri", &base)?;
    let list_base = args.list_base.or_else(|| src.list_base.clone()).unwrap_or_else(|| base.clone());
    check_base("--list-base", &list_base)?;
    let labels = if args.digest.is_empty() { src.digests.clone().unwrap_or_else(|| vec!["md5".into()]) } else { args.digest };
    let exclude = if args.exclude.is_empty() { src.exclude.clone().unwrap_or_default() } else { args.exclude };

    let mut config = SourceConfig::new(root, base);
    config.digest_algorithms = parse_digests(&labels)?;
    config.exclude_patterns = exclude;
    let as_of = Timestamp::now();
    let inventory = scan_as_of(&config, as_of)?;
    let set = generate_resource_list(&inventory, covered_until(as_of), &list_base)?;

    let Some(out) = args.out else {
        if set.index.is_some() {
            return Err(UsageError::Flag(format!("{} entries need an index and members; use --out", inventory.len())).into());
        }
        let bytes = serialize_document(&set.members[0])?;
        io::stdout().lock().write_all(&bytes)?;
        eprintln!("{} entries", inventory.len());
        return Ok(exit::OK);
    };
    let mut written = Vec::new();
    for (name, doc) in set.files() {
        write_document(&out.join(&name), doc)?;
        written.push(name);
    }
    let stale = if set.index.is_some() { RESOURCELIST_FILE } else { RESOURCELIST_INDEX_FILE };
    let _ = fs::remove_file(out.join(stale));
    match format {
        Format::Json => print_json("list", json!({ "entries": inventory.len(), "files": written }))?,
        Format::Text => println!("{} entries in {} documents", inventory.len(), written.len()),
    }
    Ok(exit::OK)
}

/// Reads a resource list file, following an index to member files that sit
/// next to it.
fn load_snapshot(path: &Path) -> Result<Vec<SyncDocument>> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    let doc = parse_document(&bytes).with_context(|| format!("{}", path.display()))?;
    if doc.capability != CapabilityKind::ResourceListIndex {
        return Ok(vec![doc]);
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    doc.entries
        .iter()
        .map(|member| {
            let name = member.uri.rsplit('/').next().unwrap_or_default();
            let member_path = dir.join(name);
            let bytes = fs::read(&member_path).with_context(|| format!("cannot read {}", member_path.display()))?;
            parse_document(&bytes).with_context(|| format!("{}", member_path.display()))
        })
        .collect()
}

fn changes(file: &FileConfig, args: ChangesArgs, format: Format) -> Result<u8> {
    if let (Some(old), Some(new)) = (&args.old, &args.new) {
        let old_docs = load_snapshot(old)?;
        let new_docs = load_snapshot(new)?;
        let all = old_docs.iter().chain(&new_docs).flat_map(|d| d.entries.iter().map(|e| e.uri.as_str()));
        let base = common_directory_prefix(all).unwrap_or_default();
        let mut a: Inventory = inventory_from_documents(&old_docs, Some(&base))?;
        let mut b: Inventory = inventory_from_documents(&new_docs, Some(&base))?;
        a.base_uri = base.clone();
        b.base_uri = base;
        let doc = diff_inventories(&a, &b)?;
        match &args.out {
            Some(path) => write_document(path, &doc)?,
            None => io::stdout().lock().write_all(&serialize_document(&doc)?)?,
        }
        let summary = json!({ "entries": doc.entries.len(), "modified": doc.modified.to_string() });
        match (format, &args.out) {
            (Format::Json, Some(_)) => print_json("changes", summary)?,
            _ => eprintln!("{} changes", doc.entries.len()),
        }
        return Ok(exit::OK);
    }

    let log_path = flag(args.log, "--log")?;
    let out = flag(args.out, "--out")?;
    let period = parse_period(
        args.period.as_deref().or(file.source.changelist_period.as_deref()).unwrap_or("1d"),
    )?;
    let list_base = flag(
        args.list_base.or_else(|| file.source.list_base.clone()).or_else(|| file.source.base_uri.clone()),
        "--list-base",
    )?;
    check_base("--list-base", &list_base)?;
    let as_of = args.as_of.as_deref().map(parse_instant).transpose()?.unwrap_or_else(Timestamp::now);

    let log = ChangeLog::load(&log_path)?;
    let windows = emit_changelists_until(&log, period, as_of)?;
    let mut index = SyncDocument::new(CapabilityKind::ChangeListIndex, covered_until(as_of));
    let mut written = Vec::new();
    for w in &windows {
        let name = w.file_name(period);
        write_document(&out.join(&name), &w.document)?;
        if w.open {
            write_document(&out.join(CHANGELIST_FILE), &w.document)?;
            written.push(CHANGELIST_FILE.to_string());
        }
        index.entries.push(resync::model::ResourceEntry::new(format!("{list_base}{name}")).with_lastmod(w.document.modified));
        written.push(name);
    }
    write_document(&out.join(CHANGELIST_INDEX_FILE), &index)?;
    written.push(CHANGELIST_INDEX_FILE.into());
    match format {
        Format::Json => print_json("changes", json!({ "entries": log.len(), "files": written }))?,
        Format::Text => println!("{} changes in {} windows", log.len(), windows.len()),
    }
    Ok(exit::OK)
}

struct Prepared {
    dest: Destination,
    client: HttpClient,
    state_path: PathBuf,
}

fn prepare(file: &FileConfig, args: &DestinationArgs, flags: DestinationFlags) -> Result<Prepared> {
    let flags = DestinationFlags { timeout: args.timeout.clone(), retries: args.retries, ..flags };
    let (policy, transport) = file.destination.resolve(&flags)?;
    if resync::model::validate_uri(&args.source).is_err() {
        return Err(UsageError::Flag(format!("--source must be an absolute URL, got {:?}", args.source)).into());
    }
    let client = HttpClient::new(transport);
    let state_path = args.state.clone().unwrap_or_else(|| args.store.join(STATE_FILE));
    Ok(Prepared { dest: Destination::new(client.clone(), &args.store, policy), client, state_path })
}

fn sync_flags(args: &SyncArgs) -> DestinationFlags {
    DestinationFlags {
        keep_deletes: args.keep_deletes,
        no_verify: args.no_verify,
        stale_wins: args.stale_wins,
        parallel: args.parallel,
        ..Default::default()
    }
}

fn directory_of(uri: &str) -> String {
    match uri.rfind('/') {
        Some(i) if i > uri.find("://").map_or(0, |j| j + 2) => uri[..=i].to_string(),
        _ => format!("{uri}/"),
    }
}

/// The first of `names` under `dir` that the server has.
fn probe(client: &HttpClient, dir: &str, names: &[&str]) -> Result<String> {
    let mut last = None;
    for name in names {
        let uri = format!("{dir}{name}");
        match client.fetch(&uri, None) {
            Ok(_) => return Ok(uri),
            Err(e @ TransportError::Status { status: 404, .. }) => last = Some(e),
            Err(e) => return Err(e.into()),
        }
    }
    Err(last.expect("at least one name probed").into())
}

/// A resource list URL, or the directory that holds one.
fn resolve_resource_list(client: &HttpClient, source: &str) -> Result<String> {
    if source.ends_with('/') {
        probe(client, source, &[RESOURCELIST_FILE, RESOURCELIST_INDEX_FILE])
    } else {
        Ok(source.to_string())
    }
}

/// A change list or change list index URL; any other document or a
/// directory is looked up beside it.
fn resolve_changelist(client: &HttpClient, source: &str) -> Result<String> {
    let dir = if source.ends_with('/') {
        source.to_string()
    } else {
        let fetched = client.fetch(source, None)?;
        let doc = parse_document(&fetched.body).with_context(|| source.to_string())?;
        if matches!(doc.capability, CapabilityKind::ChangeList | CapabilityKind::ChangeListIndex) {
            return Ok(source.to_string());
        }
        directory_of(source)
    };
    probe(client, &dir, &[CHANGELIST_INDEX_FILE, CHANGELIST_FILE])
}

fn print_sync(command: &str, report: &SyncReport, format: Format) -> Result<()> {
    match format {
        Format::Json => print_json(command, report),
        Format::Text => {
            let mut out = io::stdout().lock();
            writeln!(out, "created {}", report.created)?;
            writeln!(out, "updated {}", report.updated)?;
            writeln!(out, "deleted {}", report.deleted)?;
            writeln!(out, "skipped {}", report.skipped)?;
            writeln!(out, "failed {}", report.failed)?;
            writeln!(out, "bytes_transferred {}", report.bytes_transferred)?;
            for f in &report.failures {
                writeln!(out, "failure {} {}", f.uri, f.reason)?;
            }
            Ok(())
        }
    }
}

fn sync_exit(report: &SyncReport) -> u8 {
    if report.is_success() {
        exit::OK
    } else {
        exit::PARTIAL
    }
}

fn baseline(file: &FileConfig, args: SyncArgs, format: Format) -> Result<u8> {
    let Prepared { mut dest, client, state_path } = prepare(file, &args.dest, sync_flags(&args))?;
    dest.hold_lock()?;
    let mut state = load_state(&state_path)?;
    let list = resolve_resource_list(&client, &args.dest.source)?;
    let report = dest.baseline_sync(&list, &mut state)?;
    save_state(&state, &state_path)?;
    print_sync("baseline", &report, format)?;
    Ok(sync_exit(&report))
}

fn sync(file: &FileConfig, args: SyncArgs, format: Format) -> Result<u8> {
    let Prepared { mut dest, client, state_path } = prepare(file, &args.dest, sync_flags(&args))?;
    dest.hold_lock()?;
    let mut state = load_state(&state_path)?;
    if state.last_sync.is_none() {
        return Err(resync::destination::SyncError::BaselineRequired.into());
    }
    let changelist = resolve_changelist(&client, &args.dest.source)?;
    let report = dest.incremental_sync(&changelist, &mut state)?;
    save_state(&state, &state_path)?;
    print_sync("sync", &report, format)?;
    Ok(sync_exit(&report))
}

fn render_audit(report: &AuditReport) -> String {
    let mut text = format!("in_sync {}\n", report.in_sync);
    for (label, uris) in [("missing", &report.missing), ("stale", &report.stale), ("extraneous", &report.extraneous)] {
        text.push_str(&format!("{label} {}\n", uris.len()));
        for u in uris {
            text.push_str(&format!("  {u}\n"));
        }
    }
    text
}

fn audit(file: &FileConfig, args: AuditArgs, format: Format) -> Result<u8> {
    let Prepared { dest, client, state_path } = prepare(file, &args.dest, DestinationFlags::default())?;
    let state = load_state(&state_path)?;
    let list = resolve_resource_list(&client, &args.dest.source)?;
    let report = dest.audit(&list, &state)?;
    match format {
        Format::Json => print_json("audit", &report)?,
        Format::Text => io::stdout().lock().write_all(render_audit(&report).as_bytes())?,
    }
    if let Some(path) = &args.report {
        let body = match format {
            Format::Json => {
                let value = json!({ "schema_version": REPORT_SCHEMA_VERSION, "command": "audit", "report": report });
                let mut s = serde_json::to_string_pretty(&value)?;
                s.push('\n');
                s
            }
            Format::Text => render_audit(&report),
        };
        write_atomic(path, body.as_bytes()).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(if report.is_consistent() { exit::OK } else { exit::OUT_OF_SYNC })
}

fn serve_dir(args: ServeArgs) -> Result<u8> {
    if !args.root.is_dir() {
        return Err(UsageError::Flag(format!("--root {} is not a directory", args.root.display())).into());
    }
    let handle = serve(&args.root, &args.bind)?;
    let (tx, rx) = mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = tx.send(());
    })
    .context("cannot install signal handler")?;
    {
        let mut out = io::stdout().lock();
        writeln!(out, "listening on {}", handle.base_url())?;
        out.flush()?;
    }
    let _ = rx.recv();
    info!("shutting down");
    handle.shutdown();
    Ok(exit::OK)
}

fn simulate(file: &FileConfig, args: SimulateArgs, format: Format) -> Result<u8> {
    let web = args.out.join(SIM_WEB_DIR);
    let data = web.join(SIM_DATA_DIR);
    let state_path = args.out.join(SIM_STATE_FILE);
    let log_path = args.out.join(SIM_LOG_FILE);
    let flags = SimulatorFlags {
        seed: args.seed,
        duration: args.duration,
        publish_base: args.publish_base.clone(),
        period: args.period.clone(),
    };
    if let Some(d) = args.duration {
        if !d.is_finite() || d < 0.0 {
            return Err(UsageError::Flag(format!("--duration must be non-negative, got {d}")).into());
        }
    }

    let (mut sim, publish_base, period, logged_before) = if args.resume {
        if args.seed.is_some() || args.publish_base.is_some() {
            return Err(UsageError::Flag("--seed and --publish-base cannot change a resumed simulation".into()).into());
        }
        let period =
            parse_period(args.period.as_deref().or(file.simulator.changelist_period.as_deref()).unwrap_or("1d"))?;
        let sim = Simulator::load(&data, &state_path, &log_path)?;
        let publish_base = sim
            .config()
            .base_uri
            .strip_suffix(&format!("{SIM_DATA_DIR}/"))
            .context("saved simulator base URI does not end in the data directory")?
            .to_string();
        let before = sim.log().len();
        (sim, publish_base, period, before)
    } else {
        let resolved = file.simulator.resolve(&flags)?;
        if state_path.exists() {
            return Err(UsageError::Flag(format!("{} already holds a simulation; use --continue", args.out.display())).into());
        }
        let sim = Simulator::create(resolved.config, &data)?;
        (sim, resolved.publish_base, resolved.period, 0)
    };

    let duration = args.duration.unwrap_or(if args.resume { 0.0 } else { sim.config().duration });
    sim.step(duration)?;
    if let Some(n) = args.burst {
        let at = sim.now().plus_seconds(1);
        sim.apply_burst(n, at)?;
    }
    sim.publish(&web, &publish_base, period)?;
    sim.save(&state_path, &log_path)?;

    let events = sim.log().len() - logged_before;
    let summary = json!({
        "events": events,
        "total_events": sim.log().len(),
        "live": sim.live_count(),
        "as_of": sim.now().to_string(),
        "web_root": web.display().to_string(),
    });
    match format {
        Format::Json => print_json("simulate", summary)?,
        Format::Text => println!(
            "{events} events ({} total), {} live resources, as of {}",
            sim.log().len(),
            sim.live_count(),
            sim.now()
        ),
    }
    Ok(exit::OK)
}
