//! On-disk persistence: content-addressed image blobs plus an append-only
//! JSON event log that is folded into a snapshot on open.
//!
//! Each log line is one transaction (a list of events) so multi-record
//! changes land together. A torn final line left by a crash is ignored.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use kalchas::train::CurvePoint;
use kalchas::LineBox;
use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

const SNAPSHOT_FILE: &str = "snapshot.json";
const EVENTS_FILE: &str = "events.jsonl";
const BLOB_DIR: &str = "blobs";
/// Transactions appended before the log is folded into the snapshot.
const COMPACT_AFTER: usize = 1000;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("store data: {0}")]
    Json(#[from] serde_json::Error),
    #[error("blob {0} is missing")]
    MissingBlob(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub id: String,
    pub filename: String,
    pub media_type: String,
    /// Blob holding the uploaded file.
    pub source: String,
    pub page_ids: Vec<String>,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageRecord {
    pub id: String,
    pub document_id: String,
    pub index: usize,
    /// Blob holding the image that line boxes refer to.
    pub image: String,
    /// Blob holding the image as uploaded, before any deskew.
    pub original_image: String,
    pub width: usize,
    pub height: usize,
    pub deskew_angle: f64,
    /// Ordered top to bottom.
    pub line_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineStatus {
    Unprocessed,
    OcrDone,
    Corrected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineOrigin {
    Auto,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineRecord {
    pub id: String,
    pub page_id: String,
    #[serde(rename = "box")]
    pub bbox: LineBox,
    pub origin: LineOrigin,
    pub ocr_text: Option<String>,
    pub ocr_confidence: Option<f64>,
    pub ocr_model: Option<String>,
    pub corrected_text: Option<String>,
    /// Characters of `corrected_text` outside the label charset. Flagged
    /// lines are stored but never exported for training.
    #[serde(default)]
    pub flagged_chars: Vec<char>,
    pub status: LineStatus,
}

impl LineRecord {
    pub fn new(page_id: &str, bbox: LineBox, origin: LineOrigin) -> Self {
        LineRecord {
            id: new_id(),
            page_id: page_id.to_string(),
            bbox,
            origin,
            ocr_text: None,
            ocr_confidence: None,
            ocr_model: None,
            corrected_text: None,
            flagged_chars: Vec::new(),
            status: LineStatus::Unprocessed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            JobStatus::Queued => "queued",
            JobStatus::Running => "running",
            JobStatus::Done => "done",
            JobStatus::Failed => "failed",
        }
    }

    pub fn is_active(self) -> bool {
        matches!(self, JobStatus::Queued | JobStatus::Running)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub kind: String,
    pub status: JobStatus,
    pub base_model: String,
    pub documents: Vec<String>,
    pub samples: usize,
    pub epoch: usize,
    pub total_epochs: usize,
    pub curves: Vec<CurvePoint>,
    pub result_model: Option<String>,
    pub error: Option<String>,
    pub created_at: String,
    pub updated_at: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    PutDocument(DocumentRecord),
    PutPage(PageRecord),
    PutLine(LineRecord),
    DeleteLine { id: String },
    PutJob(JobRecord),
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
struct Snapshot {
    documents: BTreeMap<String, DocumentRecord>,
    pages: BTreeMap<String, PageRecord>,
    lines: BTreeMap<String, LineRecord>,
    jobs: BTreeMap<String, JobRecord>,
}

impl Snapshot {
    fn apply(&mut self, event: Event) {
        match event {
            Event::PutDocument(d) => {
                self.documents.insert(d.id.clone(), d);
            }
            Event::PutPage(p) => {
                self.pages.insert(p.id.clone(), p);
            }
            Event::PutLine(l) => {
                self.lines.insert(l.id.clone(), l);
            }
            Event::DeleteLine { id } => {
                self.lines.remove(&id);
            }
            Event::PutJob(j) => {
                self.jobs.insert(j.id.clone(), j);
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Transaction {
    at: String,
    events: Vec<Event>,
}

pub fn new_id() -> String {
    uuid::Uuid::new_v4().simple().to_string()
}

pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

pub struct Store {
    dir: PathBuf,
    state: Snapshot,
    log: File,
    pending: usize,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

impl Store {
    /// Opens or creates a store, replays its log and compacts it.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(dir.join(BLOB_DIR))?;
        let mut state: Snapshot = match fs::read(dir.join(SNAPSHOT_FILE)) {
            Ok(bytes) => serde_json::from_slice(&bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Snapshot::default(),
            Err(e) => return Err(e.into()),
        };
        let events_path = dir.join(EVENTS_FILE);
        if events_path.exists() {
            let lines: Vec<String> = BufReader::new(File::open(&events_path)?).lines().collect::<Result<_, _>>()?;
            let last = lines.len().saturating_sub(1);
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Transaction>(line) {
                    Ok(tx) => tx.events.into_iter().for_each(|e| state.apply(e)),
                    Err(e) if i == last => warn!("ignoring torn final event-log line: {e}"),
                    Err(e) => return Err(e.into()),
                }
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(&events_path)?;
        let mut store = Store {
            dir,
            state,
            log,
            pending: 0,
        };
        store.compact()?;
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes the current state as the snapshot and empties the log.
    pub fn compact(&mut self) -> Result<(), StoreError> {
        write_atomic(&self.dir.join(SNAPSHOT_FILE), &serde_json::to_vec(&self.state)?)?;
        self.log.set_len(0)?;
        self.log.sync_all()?;
        self.pending = 0;
        Ok(())
    }

    /// Durably appends one transaction, then applies it.
    pub fn commit(&mut self, events: Vec<Event>) -> Result<(), StoreError> {
        if events.is_empty() {
            return Ok(());
        }
        let tx = Transaction {
            at: now_rfc3339(),
            events,
        };
        let mut line = serde_json::to_vec(&tx)?;
        line.push(b'\n');
        self.log.write_all(&line)?;
        self.log.sync_data()?;
        tx.events.into_iter().for_each(|e| self.state.apply(e));
        self.pending += 1;
        if self.pending >= COMPACT_AFTER {
            self.compact()?;
        }
        Ok(())
    }

    /// Stores `bytes` under their SHA-256 and returns the hex digest.
    pub fn put_blob(&self, bytes: &[u8]) -> Result<String, StoreError> {
        let hash: String = Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect();
        let path = self.blob_path(&hash);
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        Ok(hash)
    }

    pub fn blob(&self, hash: &str) -> Result<Vec<u8>, StoreError> {
        if !hash.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(StoreError::MissingBlob(hash.to_string()));
        }
        fs::read(self.blob_path(hash)).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => StoreError::MissingBlob(hash.to_string()),
            _ => e.into(),
        })
    }

    fn blob_path(&self, hash: &str) -> PathBuf {
        self.dir.join(BLOB_DIR).join(hash)
    }

    pub fn document(&self, id: &str) -> Option<&DocumentRecord> {
        self.state.documents.get(id)
    }

    pub fn documents(&self) -> impl Iterator<Item = &DocumentRecord> {
        self.state.documents.values()
    }

    pub fn page(&self, id: &str) -> Option<&PageRecord> {
        self.state.pages.get(id)
    }

    pub fn line(&self, id: &str) -> Option<&LineRecord> {
        self.state.lines.get(id)
    }

    /// Lines of a page in the page's order.
    pub fn page_lines(&self, page: &PageRecord) -> Vec<LineRecord> {
        page.line_ids.iter().filter_map(|id| self.state.lines.get(id).cloned()).collect()
    }

    pub fn job(&self, id: &str) -> Option<&JobRecord> {
        self.state.jobs.get(id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &JobRecord> {
        self.state.jobs.values()
    }
}
