//! Document discovery, streaming loaders, passage splitting and the
//! line-delimited passage store.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("input path does not exist: {0}")]
    NotFound(PathBuf),
    #[error("invalid splitter config: {0}")]
    InvalidConfig(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed passage record at {path}:{line}: {message}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub source_path: String,
    pub text: String,
    /// Number of invalid UTF-8 sequences replaced with U+FFFD while decoding.
    pub replaced_sequences: usize,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        let doc_id = doc_id.into();
        Document {
            source_path: doc_id.clone(),
            doc_id,
            text: text.into(),
            replaced_sequences: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Passage {
    pub passage_id: String,
    pub doc_id: String,
    pub ordinal: u64,
    pub char_start: u64,
    pub char_end: u64,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SplitUnit {
    #[default]
    Word,
    Character,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitterConfig {
    pub chunk_len: usize,
    pub overlap: usize,
    pub split_unit: SplitUnit,
}

impl Default for SplitterConfig {
    fn default() -> Self {
        SplitterConfig {
            chunk_len: 128,
            overlap: 16,
            split_unit: SplitUnit::Word,
        }
    }
}

impl SplitterConfig {
    pub fn new(chunk_len: usize, overlap: usize, split_unit: SplitUnit) -> Self {
        SplitterConfig {
            chunk_len,
            overlap,
            split_unit,
        }
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.chunk_len == 0 {
            return Err(IngestError::InvalidConfig("chunk_len must be positive".into()));
        }
        if self.overlap >= self.chunk_len {
            return Err(IngestError::InvalidConfig(format!(
                "overlap ({}) must be smaller than chunk_len ({})",
                self.overlap, self.chunk_len
            )));
        }
        Ok(())
    }

    fn stride(&self) -> usize {
        self.chunk_len - self.overlap
    }
}

/// A file selected for ingestion, with the document id derived from its
/// path relative to the root it was discovered under.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceFile {
    pub path: PathBuf,
    pub doc_id: String,
}

fn has_extension(path: &Path, extensions: &[String]) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| extensions.iter().any(|x| x.eq_ignore_ascii_case(e)))
        .unwrap_or(false)
}

fn doc_id_for(rel: &Path) -> String {
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("__")
}

/// Expand files and directories into the ordered list of ingestible files.
///
/// Directories are walked recursively. Output is sorted lexicographically by
/// path and filtered to `extensions` (case-insensitive, without the dot).
pub fn discover<P: AsRef<Path>>(
    paths: &[P],
    extensions: &[String],
) -> Result<Vec<SourceFile>, IngestError> {
    let mut found: Vec<SourceFile> = Vec::new();
    for root in paths {
        let root = root.as_ref();
        if !root.exists() {
            return Err(IngestError::NotFound(root.to_path_buf()));
        }
        if root.is_file() {
            if has_extension(root, extensions) {
                let name = root.file_name().map(PathBuf::from).unwrap_or_default();
                found.push(SourceFile {
                    path: root.to_path_buf(),
                    doc_id: doc_id_for(&name),
                });
            }
            continue;
        }
        for entry in walkdir::WalkDir::new(root).follow_links(true) {
            let entry = entry.map_err(|e| IngestError::Io {
                path: root.to_path_buf(),
                source: e.into(),
            })?;
            if !entry.file_type().is_file() || !has_extension(entry.path(), extensions) {
                continue;
            }
            let rel = entry.path().strip_prefix(root).unwrap_or(entry.path());
            found.push(SourceFile {
                path: entry.path().to_path_buf(),
                doc_id: doc_id_for(rel),
            });
        }
    }
    found.sort_by(|a, b| a.path.to_string_lossy().cmp(&b.path.to_string_lossy()));
    found.dedup_by(|a, b| a.path == b.path);

    // Same relative path under two roots: suffix later ones to keep ids unique.
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for f in &mut found {
        let n = seen.entry(f.doc_id.clone()).or_insert(0);
        *n += 1;
        if *n > 1 {
            f.doc_id = format!("{}~{}", f.doc_id, n);
        }
    }
    Ok(found)
}

/// Converts decoded file contents into document text.
pub trait Loader: Send + Sync {
    fn extract(&self, raw: &str) -> Result<String, String>;
}

struct PlainText;

impl Loader for PlainText {
    fn extract(&self, raw: &str) -> Result<String, String> {
        Ok(raw.to_string())
    }
}

struct CsvRows;

impl Loader for CsvRows {
    fn extract(&self, raw: &str) -> Result<String, String> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(raw.as_bytes());
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| e.to_string())?;
            rows.push(rec.iter().collect::<Vec<_>>().join(","));
        }
        Ok(rows.join("\n"))
    }
}

struct HtmlText;

const BLOCK_TAGS: &[&str] = &[
    "address", "article", "aside", "blockquote", "br", "dd", "div", "dl", "dt", "footer",
    "h1", "h2", "h3", "h4", "h5", "h6", "header", "hr", "li", "main", "nav", "ol", "p", "pre",
    "section", "table", "td", "th", "title", "tr", "ul",
];

impl Loader for HtmlText {
    fn extract(&self, raw: &str) -> Result<String, String> {
        Ok(strip_html(raw))
    }
}

/// Structural tag stripping: tags removed, entities decoded, script/style
/// bodies dropped, block elements turned into line breaks.
pub fn strip_html(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut rest = raw;
    while let Some(lt) = rest.find('<') {
        out.push_str(&rest[..lt]);
        rest = &rest[lt..];
        if let Some(body) = rest.strip_prefix("<!--") {
            rest = match body.find("-->") {
                Some(end) => &body[end + 3..],
                None => "",
            };
            continue;
        }
        // Find the closing '>' while respecting quoted attribute values.
        let mut quote: Option<char> = None;
        let mut close = None;
        for (i, c) in rest.char_indices().skip(1) {
            match quote {
                Some(q) if c == q => quote = None,
                Some(_) => {}
                None if c == '"' || c == '\'' => quote = Some(c),
                None if c == '>' => {
                    close = Some(i);
                    break;
                }
                None => {}
            }
        }
        let Some(close) = close else {
            // Unterminated tag: keep the rest as text.
            out.push_str(rest);
            rest = "";
            break;
        };
        let inner = &rest[1..close];
        rest = &rest[close + 1..];
        let is_end = inner.starts_with('/');
        let name: String = inner
            .trim_start_matches('/')
            .chars()
            .take_while(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        if !is_end && (name == "script" || name == "style") && !inner.ends_with('/') {
            let needle = format!("</{name}");
            let lower = rest.to_ascii_lowercase();
            rest = match lower.find(&needle) {
                Some(pos) => match rest[pos..].find('>') {
                    Some(gt) => &rest[pos + gt + 1..],
                    None => "",
                },
                None => "",
            };
            continue;
        }
        if BLOCK_TAGS.contains(&name.as_str()) {
            out.push('\n');
        }
    }
    out.push_str(rest);
    let decoded = html_escape::decode_html_entities(&out);
    decoded
        .lines()
        .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("\n")
}

/// Maps file extensions to loaders. Binary formats can be registered here.
#[derive(Clone)]
pub struct LoaderRegistry {
    loaders: BTreeMap<String, Arc<dyn Loader>>,
}

impl Default for LoaderRegistry {
    fn default() -> Self {
        let mut r = LoaderRegistry {
            loaders: BTreeMap::new(),
        };
        let text: Arc<dyn Loader> = Arc::new(PlainText);
        let html: Arc<dyn Loader> = Arc::new(HtmlText);
        for ext in ["txt", "text", "md", "markdown"] {
            r.loaders.insert(ext.into(), text.clone());
        }
        r.loaders.insert("csv".into(), Arc::new(CsvRows));
        r.loaders.insert("html".into(), html.clone());
        r.loaders.insert("htm".into(), html);
        r
    }
}

impl LoaderRegistry {
    pub fn register(&mut self, extension: &str, loader: Arc<dyn Loader>) {
        self.loaders.insert(extension.to_ascii_lowercase(), loader);
    }

    pub fn extensions(&self) -> Vec<String> {
        self.loaders.keys().cloned().collect()
    }

    fn loader_for(&self, path: &Path) -> Option<&Arc<dyn Loader>> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        self.loaders.get(&ext)
    }

    pub fn load(&self, file: &SourceFile) -> Result<Document, LoadFailure> {
        let fail = |reason: String| LoadFailure {
            path: file.path.clone(),
            reason,
        };
        let loader = self
            .loader_for(&file.path)
            .ok_or_else(|| fail("no loader registered for extension".into()))?;
        let bytes = fs::read(&file.path).map_err(|e| fail(e.to_string()))?;
        let (raw, replaced) = decode_lossy(&bytes);
        let text = loader.extract(&raw).map_err(fail)?;
        Ok(Document {
            doc_id: file.doc_id.clone(),
            source_path: file.path.to_string_lossy().into_owned(),
            text,
            replaced_sequences: replaced,
        })
    }
}

/// UTF-8 decode replacing invalid sequences, returning how many were replaced.
pub fn decode_lossy(bytes: &[u8]) -> (String, usize) {
    let mut out = String::with_capacity(bytes.len());
    let mut replaced = 0;
    for chunk in bytes.utf8_chunks() {
        out.push_str(chunk.valid());
        if !chunk.invalid().is_empty() {
            out.push(char::REPLACEMENT_CHARACTER);
            replaced += 1;
        }
    }
    (out, replaced)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadFailure {
    pub path: PathBuf,
    pub reason: String,
}

/// Lazily loads one document at a time. Failures are yielded in place and
/// also retained for the end-of-run summary.
pub struct LoadStream {
    registry: LoaderRegistry,
    files: std::vec::IntoIter<SourceFile>,
    failures: Vec<LoadFailure>,
}

impl LoadStream {
    pub fn failures(&self) -> &[LoadFailure] {
        &self.failures
    }
}

impl Iterator for LoadStream {
    type Item = Result<Document, LoadFailure>;

    fn next(&mut self) -> Option<Self::Item> {
        let file = self.files.next()?;
        let item = self.registry.load(&file);
        if let Err(f) = &item {
            tracing::warn!(path = %f.path.display(), reason = %f.reason, "skipping unreadable document");
            self.failures.push(f.clone());
        }
        Some(item)
    }
}

pub fn load_stream(files: Vec<SourceFile>, registry: LoaderRegistry) -> LoadStream {
    LoadStream {
        registry,
        files: files.into_iter(),
        failures: Vec::new(),
    }
}

fn make_passage(doc: &Document, ordinal: usize, bytes: (usize, usize), chars: (usize, usize)) -> Passage {
    Passage {
        passage_id: format!("{}#{}", doc.doc_id, ordinal),
        doc_id: doc.doc_id.clone(),
        ordinal: ordinal as u64,
        char_start: chars.0 as u64,
        char_end: chars.1 as u64,
        text: doc.text[bytes.0..bytes.1].to_string(),
    }
}

/// Split a document into overlapping passages that together cover the text.
///
/// Window `i` starts at split unit `i * (chunk_len - overlap)`. In word mode a
/// passage runs from its first word up to the first word after the window
/// (or the end of the text), so leading and inter-window whitespace is never
/// lost; the first passage also takes any leading whitespace.
pub fn split(doc: &Document, cfg: &SplitterConfig) -> Result<Vec<Passage>, IngestError> {
    cfg.validate()?;
    let text = &doc.text;
    let total_chars = text.chars().count();
    let stride = cfg.stride();
    let mut out = Vec::new();
    match cfg.split_unit {
        SplitUnit::Word => {
            // (byte, char) position of each word start
            let mut starts: Vec<(usize, usize)> = Vec::new();
            let mut in_word = false;
            for (ci, (bi, ch)) in text.char_indices().enumerate() {
                if ch.is_whitespace() {
                    in_word = false;
                } else if !in_word {
                    starts.push((bi, ci));
                    in_word = true;
                }
            }
            let n = starts.len();
            let mut i = 0;
            loop {
                let first = i * stride;
                if first >= n {
                    break;
                }
                let start = if i == 0 { (0, 0) } else { starts[first] };
                let end_word = first + cfg.chunk_len;
                let end = if end_word >= n {
                    (text.len(), total_chars)
                } else {
                    starts[end_word]
                };
                out.push(make_passage(doc, i, (start.0, end.0), (start.1, end.1)));
                if end_word >= n {
                    break;
                }
                i += 1;
            }
        }
        SplitUnit::Character => {
            let mut bounds: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
            bounds.push(text.len());
            let mut i = 0;
            loop {
                let first = i * stride;
                if first >= total_chars {
                    break;
                }
                let last = (first + cfg.chunk_len).min(total_chars);
                out.push(make_passage(doc, i, (bounds[first], bounds[last]), (first, last)));
                if last >= total_chars {
                    break;
                }
                i += 1;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StoreStats {
    pub documents: usize,
    pub records: usize,
    /// Largest number of passages held in memory at once.
    pub max_resident_passages: usize,
    pub replaced_sequences: usize,
    pub skipped: Vec<LoadFailure>,
}

fn partial_path(out: &Path) -> PathBuf {
    let mut p = out.as_os_str().to_owned();
    p.push(".partial");
    PathBuf::from(p)
}

/// Stream documents through the splitter into a passage store file.
///
/// Records are written to `<out>.partial` and renamed into place once the
/// whole stream succeeded; on a write failure the partial file is removed.
pub fn build_passage_store<I>(docs: I, cfg: &SplitterConfig, out: &Path) -> Result<StoreStats, IngestError>
where
    I: IntoIterator<Item = Result<Document, LoadFailure>>,
{
    cfg.validate()?;
    let tmp = partial_path(out);
    let result = write_store(docs, cfg, &tmp);
    match result {
        Ok(stats) => {
            fs::rename(&tmp, out).map_err(io_err(out))?;
            Ok(stats)
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn write_store<I>(docs: I, cfg: &SplitterConfig, tmp: &Path) -> Result<StoreStats, IngestError>
where
    I: IntoIterator<Item = Result<Document, LoadFailure>>,
{
    let file = File::create(tmp).map_err(io_err(tmp))?;
    let mut w = BufWriter::new(file);
    let mut stats = StoreStats::default();
    for doc in docs {
        let doc = match doc {
            Ok(d) => d,
            Err(f) => {
                stats.skipped.push(f);
                continue;
            }
        };
        stats.documents += 1;
        stats.replaced_sequences += doc.replaced_sequences;
        let passages = split(&doc, cfg)?;
        stats.max_resident_passages = stats.max_resident_passages.max(passages.len());
        for p in &passages {
            write_record(&mut w, p).map_err(io_err(tmp))?;
            stats.records += 1;
        }
    }
    w.flush().map_err(io_err(tmp))?;
    w.get_ref().sync_all().map_err(io_err(tmp))?;
    Ok(stats)
}

fn write_record<W: Write>(w: &mut W, p: &Passage) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, p)?;
    w.write_all(b"\n")
}

/// Streaming reader over a passage store file.
pub struct PassageReader {
    path: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    line: usize,
}

impl PassageReader {
    pub fn open(path: &Path) -> Result<Self, IngestError> {
        let f = File::open(path).map_err(io_err(path))?;
        Ok(PassageReader {
            path: path.to_path_buf(),
            lines: BufReader::new(f).lines(),
            line: 0,
        })
    }
}

impl Iterator for PassageReader {
    type Item = Result<Passage, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        let line = self.lines.next()?;
        self.line += 1;
        Some(match line {
            Err(e) => Err(IngestError::Io {
                path: self.path.clone(),
                source: e,
            }),
            Ok(l) => serde_json::from_str(&l).map_err(|e| IngestError::MalformedRecord {
                path: self.path.clone(),
                line: self.line,
                message: e.to_string(),
            }),
        })
    }
}

/// Fully loaded passage store; row `i` is the `i`-th record of the file and
/// lines up with row `i` of the knowledge base's embedding matrix.
#[derive(Debug, Clone, Default)]
pub struct PassageStore {
    passages: Vec<Passage>,
}

impl PassageStore {
    pub fn open(path: &Path) -> Result<Self, IngestError> {
        let passages = PassageReader::open(path)?.collect::<Result<Vec<_>, _>>()?;
        Ok(PassageStore { passages })
    }

    pub fn from_passages(passages: Vec<Passage>) -> Self {
        PassageStore { passages }
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn get(&self, row: usize) -> Option<&Passage> {
        self.passages.get(row)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Passage> {
        self.passages.iter()
    }
}
