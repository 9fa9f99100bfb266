//! Link extraction and the on-disk page store.
//!
//! Layout under the output directory:
//!
//! ```text
//! manifest.jsonl          one PageRecord per dequeued URL, append-only
//! pages/<sha256>.html     raw body of every distinct page
//! ```

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, SubsecRound, Utc};
use scraper::{Html, Selector};
use serde::{Deserialize, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::frontier::CanonicalUrl;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const PAGES_DIR: &str = "pages";

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("storage failure at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} already holds a crawl manifest; choose a fresh output directory")]
    NotEmpty(PathBuf),
    #[error("malformed manifest line {line}: {source}")]
    Manifest {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StorageError + '_ {
    move |source| StorageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Canonical targets of every `<a href>` in document order, deduplicated.
pub fn extract_links(body: &[u8], base: &CanonicalUrl) -> Vec<CanonicalUrl> {
    let text = String::from_utf8_lossy(body);
    let doc = Html::parse_document(&text);
    let sel = Selector::parse("a[href]").expect("static selector");
    let mut out: Vec<CanonicalUrl> = Vec::new();
    for href in doc.select(&sel).filter_map(|a| a.value().attr("href")) {
        let Ok(url) = base.join(href) else { continue };
        if !out.contains(&url) {
            out.push(url);
        }
    }
    out
}

/// Hex SHA-256 of `body`.
pub fn content_digest(body: &[u8]) -> String {
    hex::encode(Sha256::digest(body))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Downloaded,
    Failed,
    Duplicate,
    Skipped,
}

fn rfc3339<S: Serializer>(ts: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&ts.to_rfc3339_opts(SecondsFormat::Millis, true))
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageRecord {
    pub url: CanonicalUrl,
    pub depth: u32,
    #[serde(rename = "status")]
    pub final_status: u16,
    pub outcome: Outcome,
    #[serde(rename = "digest")]
    pub content_digest: Option<String>,
    #[serde(rename = "path")]
    pub stored_path: Option<String>,
    #[serde(serialize_with = "rfc3339")]
    pub fetched_at: DateTime<Utc>,
    pub elapsed_ms: u64,
    /// Why the page failed or was skipped, e.g. `not_found`,
    /// `captcha_abandoned`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// What the crawler learned about a URL before storing it.
#[derive(Debug, Clone)]
pub struct FetchMeta {
    pub url: CanonicalUrl,
    pub depth: u32,
    pub final_status: u16,
    pub fetched_at: DateTime<Utc>,
    pub elapsed_ms: u64,
    pub disposition: Disposition,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Disposition {
    /// A body was obtained and should be kept.
    Fetched,
    Failed(String),
    Skipped(String),
}

/// Write-once page files plus the append-only manifest. One writer per
/// crawl.
#[derive(Debug)]
pub struct PageStore {
    root: PathBuf,
    manifest: File,
}

impl PageStore {
    /// Prepare `root` for a new crawl. Refuses a directory that already
    /// holds a manifest.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self, StorageError> {
        let root = root.into();
        let pages = root.join(PAGES_DIR);
        std::fs::create_dir_all(&pages).map_err(io_err(&pages))?;
        let manifest_path = root.join(MANIFEST_FILE);
        let manifest = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(&manifest_path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => StorageError::NotEmpty(root.clone()),
                _ => StorageError::Io {
                    path: manifest_path.clone(),
                    source: e,
                },
            })?;
        Ok(Self { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    /// Store one page and append its manifest record.
    ///
    /// A body whose digest file already exists is recorded as a duplicate
    /// and not rewritten.
    pub fn store_page(&mut self, body: &[u8], meta: FetchMeta) -> Result<PageRecord, StorageError> {
        let mut record = PageRecord {
            url: meta.url,
            depth: meta.depth,
            final_status: meta.final_status,
            outcome: Outcome::Failed,
            content_digest: None,
            stored_path: None,
            fetched_at: meta.fetched_at.trunc_subsecs(3),
            elapsed_ms: meta.elapsed_ms,
            reason: None,
        };
        match meta.disposition {
            Disposition::Failed(reason) => record.reason = Some(reason),
            Disposition::Skipped(reason) => {
                record.outcome = Outcome::Skipped;
                record.reason = Some(reason);
            }
            Disposition::Fetched => {
                let digest = content_digest(body);
                let rel = format!("{PAGES_DIR}/{digest}.html");
                let path = self.root.join(&rel);
                match OpenOptions::new().write(true).create_new(true).open(&path) {
                    Ok(mut file) => {
                        file.write_all(body).map_err(io_err(&path))?;
                        record.outcome = Outcome::Downloaded;
                        record.stored_path = Some(rel);
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                        record.outcome = Outcome::Duplicate;
                        record.reason = Some("mirror".into());
                    }
                    Err(e) => return Err(io_err(&path)(e)),
                }
                record.content_digest = Some(digest);
            }
        }
        let mut line = serde_json::to_string(&record).expect("record serializes");
        line.push('\n');
        let manifest_path = self.manifest_path();
        self.manifest
            .write_all(line.as_bytes())
            .and_then(|_| self.manifest.flush())
            .map_err(io_err(&manifest_path))?;
        Ok(record)
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<PageRecord>, StorageError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| StorageError::Manifest { line: n + 1, source })?,
        );
    }
    Ok(out)
}
