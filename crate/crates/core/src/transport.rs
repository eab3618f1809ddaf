//! HTTP retrieval for destinations and a minimal static server for sources.

use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use chrono::{DateTime, Utc};
use log::{debug, warn};
use percent_encoding::percent_decode_str;
use thiserror::Error;
use tiny_http::{Header, Method, Request, Response, Server, StatusCode};

use crate::digest::{self, Hasher};
use crate::model::{Digest, DigestAlgorithm, Timestamp, MAX_DOCUMENT_BYTES};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("{uri}: request timed out")]
    Timeout { uri: String },
    #[error("{uri}: too many redirects")]
    TooManyRedirects { uri: String },
    #[error("{uri}: HTTP status {status}")]
    Status { uri: String, status: u16 },
    #[error("{uri}: {detail}")]
    Transport { uri: String, detail: String },
    #[error("{uri}: body exceeds {limit} bytes")]
    BodyTooLarge { uri: String, limit: usize },
    #[error("{uri}: digest mismatch, expected {expected}, got {actual}")]
    DigestMismatch { uri: String, expected: Digest, actual: Digest },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("cannot bind {addr}: {detail}")]
    Bind { addr: String, detail: String },
}

impl TransportError {
    /// Status and transport failures worth another attempt.
    fn is_retryable(&self) -> bool {
        match self {
            TransportError::Status { status, .. } => *status >= 500,
            TransportError::Timeout { .. } | TransportError::Transport { .. } => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransportConfig {
    pub timeout: Duration,
    pub max_redirects: u32,
    pub retries: u32,
    /// Delay before the first retry; doubles for each later one.
    pub backoff: Duration,
    pub max_document_bytes: usize,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            timeout: Duration::from_secs(30),
            max_redirects: 5,
            retries: 2,
            backoff: Duration::from_secs(1),
            max_document_bytes: MAX_DOCUMENT_BYTES,
        }
    }
}

/// Validators and body from an earlier successful fetch.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CacheEntry {
    pub etag: Option<String>,
    pub last_modified: Option<String>,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchResult {
    pub status: u16,
    pub body: Vec<u8>,
    pub etag: Option<String>,
    pub last_modified: Option<Timestamp>,
    pub from_cache: bool,
    last_modified_raw: Option<String>,
}

impl FetchResult {
    /// Cache entry for a later conditional request.
    pub fn cache_entry(&self) -> CacheEntry {
        CacheEntry { etag: self.etag.clone(), last_modified: self.last_modified_raw.clone(), body: self.body.clone() }
    }
}

pub fn format_http_date(t: Timestamp) -> String {
    t.as_datetime().format("%a, %d %b %Y %H:%M:%S GMT").to_string()
}

pub fn parse_http_date(s: &str) -> Option<Timestamp> {
    DateTime::parse_from_rfc2822(s.trim()).ok().map(|d| Timestamp::from_datetime(d.with_timezone(&Utc)))
}

#[derive(Clone)]
pub struct HttpClient {
    agent: ureq::Agent,
    config: TransportConfig,
}

impl Default for HttpClient {
    fn default() -> Self {
        Self::new(TransportConfig::default())
    }
}

impl HttpClient {
    pub fn new(config: TransportConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(config.timeout)
            // ureq counts the final response against its limit.
            .redirects(config.max_redirects + 1)
            .build();
        HttpClient { agent, config }
    }

    pub fn config(&self) -> &TransportConfig {
        &self.config
    }

    fn with_retries<T>(&self, uri: &str, mut attempt: impl FnMut() -> Result<T, TransportError>) -> Result<T, TransportError> {
        let mut delay = self.config.backoff;
        let mut tries = 0;
        loop {
            match attempt() {
                Err(e) if e.is_retryable() && tries < self.config.retries => {
                    tries += 1;
                    debug!("retrying {uri} after {e} (attempt {tries})");
                    thread::sleep(delay);
                    delay *= 2;
                }
                other => return other,
            }
        }
    }

    fn get(&self, uri: &str, headers: &[(&str, &str)]) -> Result<ureq::Response, TransportError> {
        let mut req = self.agent.get(uri);
        for (k, v) in headers {
            req = req.set(k, v);
        }
        match req.call() {
            Ok(resp) => {
                let status = resp.status();
                if (300..400).contains(&status) && status != 304 {
                    return Err(TransportError::TooManyRedirects { uri: uri.to_string() });
                }
                Ok(resp)
            }
            Err(ureq::Error::Status(status, _)) => Err(TransportError::Status { uri: uri.to_string(), status }),
            Err(ureq::Error::Transport(t)) => Err(classify_transport(uri, &t)),
        }
    }

    /// GET `uri`, conditionally when `cache` carries a validator.
    pub fn fetch(&self, uri: &str, cache: Option<&CacheEntry>) -> Result<FetchResult, TransportError> {
        let mut headers = Vec::new();
        if let Some(c) = cache {
            if let Some(etag) = &c.etag {
                headers.push(("If-None-Match", etag.as_str()));
            }
            if let Some(lm) = &c.last_modified {
                headers.push(("If-Modified-Since", lm.as_str()));
            }
        }
        self.with_retries(uri, || {
            let resp = self.get(uri, &headers)?;
            let status = resp.status();
            let etag = resp.header("etag").map(str::to_string);
            let last_modified_raw = resp.header("last-modified").map(str::to_string);
            let last_modified = last_modified_raw.as_deref().and_then(parse_http_date);
            if status == 304 {
                if let Some(c) = cache {
                    return Ok(FetchResult {
                        status,
                        body: c.body.clone(),
                        etag: etag.or_else(|| c.etag.clone()),
                        last_modified: last_modified.or_else(|| c.last_modified.as_deref().and_then(parse_http_date)),
                        from_cache: true,
                        last_modified_raw: last_modified_raw.or_else(|| c.last_modified.clone()),
                    });
                }
            }
            let limit = self.config.max_document_bytes;
            let mut body = Vec::new();
            resp.into_reader()
                .take(limit as u64 + 1)
                .read_to_end(&mut body)
                .map_err(|e| io_transport(uri, e))?;
            if body.len() > limit {
                return Err(TransportError::BodyTooLarge { uri: uri.to_string(), limit });
            }
            Ok(FetchResult { status, body, etag, last_modified, from_cache: false, last_modified_raw })
        })
    }

    /// Streams `uri` into `temp_path`, hashing as it goes. With an
    /// expected digest the body is verified using that digest's algorithm;
    /// otherwise `algorithm` is used. The temp file is removed on error.
    pub fn download_to(
        &self,
        uri: &str,
        temp_path: &Path,
        expected: Option<&Digest>,
        algorithm: DigestAlgorithm,
    ) -> Result<(u64, Digest), TransportError> {
        let algorithm = expected.map_or(algorithm, |d| d.algorithm);
        let result = self.with_retries(uri, || {
            let resp = self.get(uri, &[])?;
            let mut file = File::create(temp_path).map_err(|source| TransportError::Io { path: temp_path.into(), source })?;
            let mut reader = resp.into_reader();
            let mut hasher = Hasher::new(algorithm);
            let mut buf = vec![0u8; 64 * 1024];
            let mut total = 0u64;
            loop {
                let n = match reader.read(&mut buf) {
                    Ok(0) => break,
                    Ok(n) => n,
                    Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                    Err(e) => return Err(io_transport(uri, e)),
                };
                hasher.update(&buf[..n]);
                file.write_all(&buf[..n]).map_err(|source| TransportError::Io { path: temp_path.into(), source })?;
                total += n as u64;
            }
            file.sync_all().map_err(|source| TransportError::Io { path: temp_path.into(), source })?;
            Ok((total, hasher.finish()))
        });
        let result = result.and_then(|(len, actual)| match expected {
            Some(exp) if *exp != actual => {
                Err(TransportError::DigestMismatch { uri: uri.to_string(), expected: exp.clone(), actual })
            }
            _ => Ok((len, actual)),
        });
        if result.is_err() {
            let _ = fs::remove_file(temp_path);
        }
        result
    }
}

fn io_transport(uri: &str, e: io::Error) -> TransportError {
    if e.kind() == io::ErrorKind::TimedOut {
        TransportError::Timeout { uri: uri.to_string() }
    } else {
        TransportError::Transport { uri: uri.to_string(), detail: e.to_string() }
    }
}

fn classify_transport(uri: &str, t: &ureq::Transport) -> TransportError {
    if t.kind() == ureq::ErrorKind::TooManyRedirects {
        return TransportError::TooManyRedirects { uri: uri.to_string() };
    }
    let mut source = std::error::Error::source(t);
    while let Some(err) = source {
        if let Some(io) = err.downcast_ref::<io::Error>() {
            if matches!(io.kind(), io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock) {
                return TransportError::Timeout { uri: uri.to_string() };
            }
        }
        source = err.source();
    }
    TransportError::Transport { uri: uri.to_string(), detail: t.to_string() }
}

/// Handle to a running static file server; shuts down on drop.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// `http://<addr>/`
    pub fn base_url(&self) -> String {
        format!("http://{}/", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop_workers();
    }

    fn stop_workers(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_workers();
    }
}

const SERVER_WORKERS: usize = 8;

/// Serves the files under `root_dir` with strong digest-based ETags,
/// Last-Modified, and conditional GET support.
pub fn serve(root_dir: &Path, bind_address: &str) -> Result<ServerHandle, TransportError> {
    let root = root_dir
        .canonicalize()
        .map_err(|source| TransportError::Io { path: root_dir.to_path_buf(), source })?;
    let server = Server::http(bind_address)
        .map_err(|e| TransportError::Bind { addr: bind_address.to_string(), detail: e.to_string() })?;
    let addr = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| TransportError::Bind { addr: bind_address.to_string(), detail: "not an IP socket".into() })?;
    let server = Arc::new(server);
    let stop = Arc::new(AtomicBool::new(false));
    let workers = (0..SERVER_WORKERS)
        .map(|_| {
            let server = Arc::clone(&server);
            let stop = Arc::clone(&stop);
            let root = root.clone();
            thread::spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    match server.recv_timeout(Duration::from_millis(50)) {
                        Ok(Some(req)) => handle(&root, req),
                        Ok(None) => {}
                        Err(e) => {
                            warn!("accept failed: {e}");
                            thread::sleep(Duration::from_millis(50));
                        }
                    }
                }
            })
        })
        .collect();
    Ok(ServerHandle { addr, stop, workers })
}

fn header(name: &str, value: &str) -> Header {
    Header::from_bytes(name.as_bytes(), value.as_bytes()).expect("static header names are valid")
}

fn empty(status: u16) -> Response<io::Empty> {
    Response::new(StatusCode(status), vec![], io::empty(), Some(0), None)
}

fn request_header<'r>(req: &'r Request, name: &str) -> Option<&'r str> {
    req.headers().iter().find(|h| h.field.as_str().as_str().eq_ignore_ascii_case(name)).map(|h| h.value.as_str())
}

/// Maps a request target to a file below `root`, or an HTTP status.
fn resolve(root: &Path, target: &str) -> Result<PathBuf, u16> {
    let path = target.split(['?', '#']).next().unwrap_or("");
    let decoded = percent_decode_str(path).decode_utf8().map_err(|_| 400u16)?;
    let mut out = root.to_path_buf();
    for seg in decoded.split('/') {
        match seg {
            "" | "." => continue,
            ".." => return Err(403),
            s if s.contains('\\') || s.contains('\0') => return Err(403),
            s => out.push(s),
        }
    }
    let canonical = out.canonicalize().map_err(|_| 404u16)?;
    if !canonical.starts_with(root) {
        return Err(403);
    }
    if !canonical.is_file() {
        return Err(404);
    }
    Ok(canonical)
}

fn handle(root: &Path, req: Request) {
    let result = respond(root, &req);
    let sent = match result {
        Ok(resp) => req.respond(resp),
        Err(status) => req.respond(empty(status).boxed()),
    };
    if let Err(e) = sent {
        debug!("client went away: {e}");
    }
}

fn respond(root: &Path, req: &Request) -> Result<Response<Box<dyn Read + Send>>, u16> {
    let head = match req.method() {
        Method::Get => false,
        Method::Head => true,
        _ => return Err(405),
    };
    let path = resolve(root, req.url())?;
    let body = fs::read(&path).map_err(|_| 404u16)?;
    let mtime = fs::metadata(&path)
        .and_then(|m| m.modified())
        .map(|t| Timestamp::from_datetime(t.into()))
        .map_err(|_| 500u16)?;
    let etag = format!("\"{}\"", digest::digest_bytes(DigestAlgorithm::Md5, &body).hex);
    let last_modified = format_http_date(mtime);
    let validators = vec![header("ETag", &etag), header("Last-Modified", &last_modified)];

    let not_modified = match request_header(req, "If-None-Match") {
        Some(inm) => inm.split(',').map(str::trim).any(|t| t == "*" || t == etag || t.strip_prefix("W/") == Some(&etag)),
        None => request_header(req, "If-Modified-Since").and_then(parse_http_date).is_some_and(|ims| mtime <= ims),
    };
    if not_modified {
        let mut resp = empty(304).boxed();
        for h in validators {
            resp.add_header(h);
        }
        return Ok(resp);
    }
    let mime = mime_guess::from_path(&path).first_or_octet_stream();
    let len = body.len();
    let reader: Box<dyn Read + Send> = if head { Box::new(io::empty()) } else { Box::new(io::Cursor::new(body)) };
    let mut headers = validators;
    headers.push(header("Content-Type", mime.essence_str()));
    Ok(Response::new(StatusCode(200), headers, reader, Some(len), None))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn http_dates() {
        let t: Timestamp = "1994-11-06T08:49:37Z".parse().unwrap();
        assert_eq!(format_http_date(t), "Sun, 06 Nov 1994 08:49:37 GMT");
        assert_eq!(parse_http_date("Sun, 06 Nov 1994 08:49:37 GMT"), Some(t));
        assert_eq!(parse_http_date("yesterday"), None);
    }

    #[test]
    fn resolve_guards_traversal() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().canonicalize().unwrap();
        fs::create_dir(root.join("sub")).unwrap();
        fs::write(root.join("sub/a b.txt"), b"x").unwrap();
        assert_eq!(resolve(&root, "/sub/a%20b.txt?x=1"), Ok(root.join("sub/a b.txt")));
        assert_eq!(resolve(&root, "/../etc/passwd"), Err(403));
        assert_eq!(resolve(&root, "/sub/%2e%2e/%2e%2e/etc/passwd"), Err(403));
        assert_eq!(resolve(&root, "/sub"), Err(404));
        assert_eq!(resolve(&root, "/missing"), Err(404));
    }
}
