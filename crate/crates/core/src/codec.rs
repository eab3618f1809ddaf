//! Reading and writing resource lists, change lists and their indexes as
//! Sitemap XML extended with the `rs` namespace.
//!
//! Output is canonical: equal documents serialize to identical bytes.
//! Input is lenient about anything the model does not use: unknown
//! elements, attributes and digest algorithms are skipped.

use std::fmt;

use quick_xml::escape::escape;
use quick_xml::events::{BytesStart, Event};
use quick_xml::name::{Namespace, ResolveResult};
use quick_xml::NsReader;
use thiserror::Error;

use crate::model::{
    CapabilityKind, ChangeKind, DigestAlgorithm, ModelError, ResourceEntry, ResourceMetadata, SyncDocument, Timestamp,
    MAX_DOCUMENT_BYTES, MAX_DOCUMENT_ENTRIES,
};

pub const SITEMAP_NS: &str = "http://www.sitemaps.org/schemas/sitemap/0.9";
pub const RS_NS: &str = "http://www.openarchives.org/rs/terms/";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecErrorKind {
    MalformedXml,
    MissingCapability,
    UnknownCapability,
    BadDatetime,
    BadUri,
    DuplicateUri,
    OversizeDocument,
    EntryInIndex,
    BadMetadata,
    Unordered,
}

impl CodecErrorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CodecErrorKind::MalformedXml => "malformed_xml",
            CodecErrorKind::MissingCapability => "missing_capability",
            CodecErrorKind::UnknownCapability => "unknown_capability",
            CodecErrorKind::BadDatetime => "bad_datetime",
            CodecErrorKind::BadUri => "bad_uri",
            CodecErrorKind::DuplicateUri => "duplicate_uri",
            CodecErrorKind::OversizeDocument => "oversize_document",
            CodecErrorKind::EntryInIndex => "entry_in_index",
            CodecErrorKind::BadMetadata => "bad_metadata",
            CodecErrorKind::Unordered => "unordered",
        }
    }
}

impl fmt::Display for CodecErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind}: {detail}")]
pub struct CodecError {
    pub kind: CodecErrorKind,
    pub detail: String,
}

impl CodecError {
    fn new(kind: CodecErrorKind, detail: impl Into<String>) -> Self {
        CodecError { kind, detail: detail.into() }
    }
}

impl From<ModelError> for CodecError {
    fn from(e: ModelError) -> Self {
        let kind = match &e {
            ModelError::BadUri(_) => CodecErrorKind::BadUri,
            ModelError::DuplicateUri(_) => CodecErrorKind::DuplicateUri,
            ModelError::Oversize(_) => CodecErrorKind::OversizeDocument,
            ModelError::EntryInIndex(_) => CodecErrorKind::EntryInIndex,
            ModelError::Unordered(_) => CodecErrorKind::Unordered,
            ModelError::BadMetadata(_) | ModelError::Inventory(_) | ModelError::State(_) => CodecErrorKind::BadMetadata,
        };
        CodecError::new(kind, e.to_string())
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Root {
    UrlSet,
    SitemapIndex,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Field {
    Loc,
    Lastmod,
}

#[derive(Default)]
struct PendingEntry {
    loc: Option<String>,
    lastmod: Option<String>,
    metadata: ResourceMetadata,
    md_seen: bool,
    resource_attrs: bool,
}

fn ns_is(res: &ResolveResult, uri: &str) -> bool {
    matches!(res, ResolveResult::Bound(Namespace(ns)) if *ns == uri.as_bytes())
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Ns {
    Sitemap,
    Rs,
    Other,
}

impl Ns {
    fn of(res: &ResolveResult) -> Ns {
        // Documents without a default namespace are tolerated.
        if ns_is(res, SITEMAP_NS) || matches!(res, ResolveResult::Unbound) {
            Ns::Sitemap
        } else if ns_is(res, RS_NS) {
            Ns::Rs
        } else {
            Ns::Other
        }
    }
}

/// Parses a resource list, change list, or index document.
pub fn parse_document(bytes: &[u8]) -> Result<SyncDocument, CodecError> {
    if bytes.len() > MAX_DOCUMENT_BYTES {
        return Err(CodecError::new(
            CodecErrorKind::OversizeDocument,
            format!("{} bytes exceeds the {MAX_DOCUMENT_BYTES} byte limit", bytes.len()),
        ));
    }
    let text = std::str::from_utf8(bytes)
        .map_err(|e| CodecError::new(CodecErrorKind::MalformedXml, format!("not UTF-8 at byte {}", e.valid_up_to())))?;
    Parser::new(text).run()
}

/// Parses a document that must be an index.
pub fn parse_index(bytes: &[u8]) -> Result<SyncDocument, CodecError> {
    let doc = parse_document(bytes)?;
    if !doc.capability.is_index() {
        return Err(CodecError::new(
            CodecErrorKind::UnknownCapability,
            format!("expected an index document, found {}", doc.capability),
        ));
    }
    Ok(doc)
}

struct Parser<'a> {
    reader: NsReader<&'a [u8]>,
    root: Option<Root>,
    capability: Option<CapabilityKind>,
    modified: Option<Timestamp>,
    entries: Vec<ResourceEntry>,
    depth: usize,
    // Whether the first child of the root has been seen.
    first_child_seen: bool,
    entry: Option<PendingEntry>,
    field: Option<Field>,
    text: String,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        let mut reader = NsReader::from_str(text);
        reader.config_mut().trim_text(false);
        Parser {
            reader,
            root: None,
            capability: None,
            modified: None,
            entries: Vec::new(),
            depth: 0,
            first_child_seen: false,
            entry: None,
            field: None,
            text: String::new(),
        }
    }

    fn err(&self, kind: CodecErrorKind, detail: impl fmt::Display) -> CodecError {
        CodecError::new(kind, format!("{detail} (at byte {})", self.reader.buffer_position()))
    }

    fn run(mut self) -> Result<SyncDocument, CodecError> {
        loop {
            let (ns, event) = match self.reader.read_resolved_event() {
                Ok((res, event)) => (Ns::of(&res), event.into_owned()),
                Err(e) => return Err(self.err(CodecErrorKind::MalformedXml, e)),
            };
            match event {
                Event::Start(start) => {
                    self.open(ns, &start)?;
                    self.depth += 1;
                }
                Event::Empty(start) => {
                    self.open(ns, &start)?;
                    self.depth += 1;
                    self.close()?;
                    self.depth -= 1;
                }
                Event::End(_) => {
                    self.close()?;
                    self.depth -= 1;
                }
                Event::Text(t) => {
                    if self.field.is_some() {
                        let s = t.unescape().map_err(|e| self.err(CodecErrorKind::MalformedXml, e))?;
                        self.text.push_str(&s);
                    } else if self.depth == 0 && !t.iter().all(u8::is_ascii_whitespace) {
                        return Err(self.err(CodecErrorKind::MalformedXml, "text outside the root element"));
                    }
                }
                Event::CData(t) => {
                    if self.field.is_some() {
                        let s = std::str::from_utf8(&t).map_err(|e| self.err(CodecErrorKind::MalformedXml, e))?;
                        self.text.push_str(s);
                    }
                }
                Event::Eof => break,
                _ => {}
            }
        }
        let root = self.root.ok_or_else(|| CodecError::new(CodecErrorKind::MalformedXml, "no root element"))?;
        if self.depth != 0 {
            return Err(CodecError::new(CodecErrorKind::MalformedXml, "unexpected end of document"));
        }
        let capability = self
            .capability
            .ok_or_else(|| CodecError::new(CodecErrorKind::MissingCapability, "no document-level rs:md element"))?;
        let modified = self.modified.expect("set together with capability");
        match (root, capability.is_index()) {
            (Root::UrlSet, true) | (Root::SitemapIndex, false) => {
                return Err(CodecError::new(
                    CodecErrorKind::UnknownCapability,
                    format!(
                        "capability {capability} is not valid on <{}>",
                        if root == Root::UrlSet { "urlset" } else { "sitemapindex" }
                    ),
                ));
            }
            _ => {}
        }
        let doc = SyncDocument { capability, modified, entries: self.entries };
        doc.validate()?;
        Ok(doc)
    }

    fn open(&mut self, ns: Ns, start: &BytesStart) -> Result<(), CodecError> {
        let local = start.local_name();
        let local = local.as_ref();
        match self.depth {
            0 => {
                if self.root.is_some() {
                    return Err(self.err(CodecErrorKind::MalformedXml, "multiple root elements"));
                }
                self.root = match local {
                    b"urlset" if ns == Ns::Sitemap => Some(Root::UrlSet),
                    b"sitemapindex" if ns == Ns::Sitemap => Some(Root::SitemapIndex),
                    _ => {
                        return Err(self.err(
                            CodecErrorKind::MalformedXml,
                            format!("root element <{}> is not a Sitemap", String::from_utf8_lossy(local)),
                        ))
                    }
                };
            }
            1 => {
                let first = !self.first_child_seen;
                self.first_child_seen = true;
                let is_md = local == b"md" && ns == Ns::Rs;
                if first {
                    if !is_md {
                        return Err(self.err(CodecErrorKind::MissingCapability, "first child of the root is not rs:md"));
                    }
                    return self.document_md(start);
                }
                if is_md {
                    return Err(self.err(CodecErrorKind::BadMetadata, "repeated document-level rs:md"));
                }
                let root = self.root.expect("depth 1 implies a root");
                match (root, local) {
                    (Root::UrlSet, b"url") | (Root::SitemapIndex, b"sitemap") if ns == Ns::Sitemap => {
                        self.entry = Some(PendingEntry::default());
                    }
                    (Root::SitemapIndex, b"url") if ns == Ns::Sitemap => {
                        return Err(self.err(CodecErrorKind::EntryInIndex, "<url> inside <sitemapindex>"));
                    }
                    _ => {}
                }
            }
            2 if self.entry.is_some() => {
                if ns == Ns::Sitemap && local == b"loc" {
                    self.field = Some(Field::Loc);
                    self.text.clear();
                } else if ns == Ns::Sitemap && local == b"lastmod" {
                    self.field = Some(Field::Lastmod);
                    self.text.clear();
                } else if ns == Ns::Rs && local == b"md" {
                    self.entry_md(start)?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn close(&mut self) -> Result<(), CodecError> {
        match self.depth {
            2 => {
                if self.entry.is_some() {
                    self.finish_entry()?;
                }
                self.entry = None;
            }
            3 => {
                if let (Some(field), Some(entry)) = (self.field.take(), self.entry.as_mut()) {
                    let value = self.text.trim().to_string();
                    let slot = match field {
                        Field::Loc => &mut entry.loc,
                        Field::Lastmod => &mut entry.lastmod,
                    };
                    if slot.is_some() {
                        return Err(self.err(CodecErrorKind::MalformedXml, "repeated <loc> or <lastmod>"));
                    }
                    *slot = Some(value);
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn attrs(&self, start: &BytesStart) -> Result<Vec<(String, String)>, CodecError> {
        let mut out = Vec::new();
        for attr in start.attributes() {
            let attr = attr.map_err(|e| self.err(CodecErrorKind::MalformedXml, e))?;
            let (res, local) = self.reader.resolve_attribute(attr.key);
            // Namespaced attributes other than rs: belong to other vocabularies.
            if !(matches!(res, ResolveResult::Unbound) || ns_is(&res, RS_NS)) {
                continue;
            }
            let key = String::from_utf8_lossy(local.as_ref()).into_owned();
            let value = attr
                .unescape_value()
                .map_err(|e| self.err(CodecErrorKind::MalformedXml, e))?
                .into_owned();
            out.push((key, value));
        }
        Ok(out)
    }

    fn document_md(&mut self, start: &BytesStart) -> Result<(), CodecError> {
        let mut capability = None;
        let mut modified = None;
        for (key, value) in self.attrs(start)? {
            match key.as_str() {
                "capability" => {
                    capability = Some(CapabilityKind::parse(&value).ok_or_else(|| {
                        self.err(CodecErrorKind::UnknownCapability, format!("unknown capability {value:?}"))
                    })?)
                }
                "modified" => {
                    modified = Some(Timestamp::parse_w3c(&value).map_err(|e| self.err(CodecErrorKind::BadDatetime, e))?)
                }
                _ => {}
            }
        }
        let capability =
            capability.ok_or_else(|| self.err(CodecErrorKind::MissingCapability, "rs:md lacks a capability attribute"))?;
        let modified =
            modified.ok_or_else(|| self.err(CodecErrorKind::MissingCapability, "rs:md lacks a modified attribute"))?;
        self.capability = Some(capability);
        self.modified = Some(modified);
        Ok(())
    }

    fn entry_md(&mut self, start: &BytesStart) -> Result<(), CodecError> {
        let attrs = self.attrs(start)?;
        let mut metadata = ResourceMetadata::default();
        let mut resource_attrs = false;
        for (key, value) in attrs {
            match key.as_str() {
                "change" => {
                    resource_attrs = true;
                    metadata.change = Some(
                        ChangeKind::parse(&value)
                            .ok_or_else(|| self.err(CodecErrorKind::BadMetadata, format!("unknown change {value:?}")))?,
                    );
                }
                "hash" => {
                    resource_attrs = true;
                    for token in value.split_whitespace() {
                        let Some((algo, hex)) = token.split_once(':') else {
                            return Err(self.err(CodecErrorKind::BadMetadata, format!("hash token {token:?}")));
                        };
                        let Some(algo) = DigestAlgorithm::from_label(algo) else {
                            continue;
                        };
                        if metadata.digests.insert(algo, hex.to_ascii_lowercase()).is_some() {
                            return Err(self.err(CodecErrorKind::BadMetadata, format!("repeated {algo} digest")));
                        }
                    }
                }
                "length" => {
                    resource_attrs = true;
                    metadata.length = Some(
                        value
                            .trim()
                            .parse::<u64>()
                            .map_err(|_| self.err(CodecErrorKind::BadMetadata, format!("length {value:?}")))?,
                    );
                }
                "type" => {
                    resource_attrs = true;
                    metadata.mime_type = Some(value);
                }
                _ => {}
            }
        }
        let in_index = self.root == Some(Root::SitemapIndex);
        if in_index && resource_attrs {
            return Err(self.err(CodecErrorKind::EntryInIndex, "index member carries resource metadata"));
        }
        let err = self.err(CodecErrorKind::BadMetadata, "repeated rs:md in one entry");
        let entry = self.entry.as_mut().expect("caller checked");
        if entry.md_seen {
            return Err(err);
        }
        entry.md_seen = true;
        entry.resource_attrs = resource_attrs;
        entry.metadata = metadata;
        Ok(())
    }

    fn finish_entry(&mut self) -> Result<(), CodecError> {
        let pending = self.entry.take().expect("caller checked");
        let uri = pending.loc.ok_or_else(|| self.err(CodecErrorKind::BadUri, "entry without <loc>"))?;
        let lastmod = match pending.lastmod {
            Some(s) => Some(Timestamp::parse_w3c(&s).map_err(|e| self.err(CodecErrorKind::BadDatetime, e))?),
            None => None,
        };
        if self.entries.len() >= MAX_DOCUMENT_ENTRIES {
            return Err(self.err(
                CodecErrorKind::OversizeDocument,
                format!("more than {MAX_DOCUMENT_ENTRIES} entries"),
            ));
        }
        self.entries.push(ResourceEntry { uri, lastmod, metadata: pending.metadata });
        Ok(())
    }
}

/// Writes `doc` as canonical UTF-8 XML.
pub fn serialize_document(doc: &SyncDocument) -> Result<Vec<u8>, CodecError> {
    doc.validate()?;
    let index = doc.capability.is_index();
    let (root, item) = if index { ("sitemapindex", "sitemap") } else { ("urlset", "url") };
    let mut out = String::with_capacity(256 + doc.entries.len() * 160);
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    out.push_str(&format!("<{root} xmlns=\"{SITEMAP_NS}\" xmlns:rs=\"{RS_NS}\">\n"));
    out.push_str(&format!(
        "  <rs:md capability=\"{}\" modified=\"{}\"/>\n",
        doc.capability, doc.modified
    ));
    for entry in &doc.entries {
        out.push_str(&format!("  <{item}>\n    <loc>{}</loc>\n", escape(entry.uri.as_str())));
        if let Some(lastmod) = entry.lastmod {
            out.push_str(&format!("    <lastmod>{lastmod}</lastmod>\n"));
        }
        let md = &entry.metadata;
        if !md.is_empty() {
            out.push_str("    <rs:md");
            if let Some(change) = md.change {
                out.push_str(&format!(" change=\"{change}\""));
            }
            if !md.digests.is_empty() {
                let tokens: Vec<String> = md.digests.iter().map(|(a, h)| format!("{a}:{h}")).collect();
                out.push_str(&format!(" hash=\"{}\"", tokens.join(" ")));
            }
            if let Some(length) = md.length {
                out.push_str(&format!(" length=\"{length}\""));
            }
            if let Some(t) = &md.mime_type {
                out.push_str(&format!(" type=\"{}\"", escape(t.as_str())));
            }
            out.push_str("/>\n");
        }
        out.push_str(&format!("  </{item}>\n"));
    }
    out.push_str(&format!("</{root}>\n"));
    if out.len() > MAX_DOCUMENT_BYTES {
        return Err(CodecError::new(
            CodecErrorKind::OversizeDocument,
            format!("serialized size {} exceeds {MAX_DOCUMENT_BYTES} bytes", out.len()),
        ));
    }
    Ok(out.into_bytes())
}

/// Writes an index document; rejects non-index capabilities.
pub fn serialize_index(doc: &SyncDocument) -> Result<Vec<u8>, CodecError> {
    if !doc.capability.is_index() {
        return Err(CodecError::new(
            CodecErrorKind::UnknownCapability,
            format!("expected an index document, found {}", doc.capability),
        ));
    }
    serialize_document(doc)
}
