//! Shared service state and the blocking operations behind each endpoint.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::SystemTime;

use axum::http::StatusCode;
use image::ImageFormat;
use kalchas::charset::normalize;
use kalchas::dataset::ManifestEntry;
use kalchas::imaging::{decode_gray, deskew, otsu_binarize, prepare_line, segment_lines, GrayImage};
use kalchas::model::registry::Registry;
use kalchas::model::Provenance;
use kalchas::{Charset, CrnnModel, LineBox};
use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tokio::task::JoinHandle;

use crate::config::{ConfigError, ServiceConfig};
use crate::error::{ApiError, ApiResult};
use crate::pdf::{extract_page_images, is_pdf, PdfError};
use crate::store::{
    new_id, now_rfc3339, DocumentRecord, Event, JobStatus, LineOrigin, LineRecord, LineStatus, PageRecord, Store,
    StoreError,
};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("model registry: {0}")]
    Registry(#[from] kalchas::model::io::ModelIoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct CachedModel {
    stamp: (SystemTime, u64),
    model: Arc<CrnnModel<f32>>,
}

pub struct AppState {
    pub config: ServiceConfig,
    store: Mutex<Store>,
    registry: Registry,
    models: Mutex<HashMap<String, CachedModel>>,
    /// Charset that corrected text is checked against.
    label_charset: Charset,
    /// The background fine-tune task, if one has been started.
    pub(crate) job_task: tokio::sync::Mutex<Option<JoinHandle<()>>>,
}

pub type SharedState = Arc<AppState>;

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

/// Options for automatic segmentation.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRequest {
    pub min_gap: Option<usize>,
    pub min_height: Option<usize>,
    /// `true` deskews within the default range; a number sets the range in
    /// degrees.
    pub deskew: Option<DeskewOption>,
    #[serde(default)]
    pub force: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum DeskewOption {
    Enabled(bool),
    MaxAngle(f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct OcrResponse {
    pub text: String,
    pub confidence: f64,
    pub model: String,
    pub line: LineRecord,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelInfo {
    pub name: String,
    pub charset_size: usize,
    pub provenance: Vec<Provenance>,
}

/// A corrected line ready for export or training.
#[derive(Debug, Clone)]
pub struct LabeledLine {
    pub line_id: String,
    pub document_id: String,
    pub text: String,
    pub image: GrayImage,
}

/// A corrected line left out of an export, with the reason.
#[derive(Debug, Clone, Serialize)]
pub struct ExcludedLine {
    pub line_id: String,
    pub page_id: String,
    pub reason: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub chars: Vec<char>,
}

#[derive(Debug, Clone, Default)]
pub struct Labels {
    pub lines: Vec<LabeledLine>,
    pub excluded: Vec<ExcludedLine>,
}

/// Source label written into exported manifests.
pub const EXPORT_SOURCE: &str = "logios";

fn sort_lines(lines: &mut [LineRecord]) {
    lines.sort_by_key(|l| (l.bbox.y, l.bbox.x, l.bbox.height, l.bbox.width));
}

/// Events that replace a page's line set with `lines`.
fn line_set_events(mut page: PageRecord, old: &[LineRecord], mut lines: Vec<LineRecord>) -> Vec<Event> {
    sort_lines(&mut lines);
    let mut events: Vec<Event> = old
        .iter()
        .filter(|o| !lines.iter().any(|l| l.id == o.id))
        .map(|o| Event::DeleteLine { id: o.id.clone() })
        .collect();
    page.line_ids = lines.iter().map(|l| l.id.clone()).collect();
    events.extend(lines.into_iter().filter(|l| !old.contains(l)).map(Event::PutLine));
    events.push(Event::PutPage(page));
    events
}

impl AppState {
    /// Opens the store and registry named by `config`. Jobs left active by
    /// a previous process are marked failed.
    pub fn new(config: ServiceConfig) -> Result<SharedState, ServiceError> {
        config.validate()?;
        let mut store = Store::open(&config.store_dir)?;
        let registry = Registry::create(&config.registry_dir)?;
        let stale: Vec<Event> = store
            .jobs()
            .filter(|j| j.status.is_active())
            .map(|j| {
                let mut j = j.clone();
                j.status = JobStatus::Failed;
                j.error = Some("interrupted by a service restart".into());
                j.updated_at = now_rfc3339();
                Event::PutJob(j)
            })
            .collect();
        store.commit(stale)?;
        Ok(Arc::new(AppState {
            config,
            store: Mutex::new(store),
            registry,
            models: Mutex::new(HashMap::new()),
            label_charset: Charset::polytonic(),
            job_task: tokio::sync::Mutex::new(None),
        }))
    }

    pub fn store(&self) -> MutexGuard<'_, Store> {
        lock(&self.store)
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn label_charset(&self) -> &Charset {
        &self.label_charset
    }

    fn available_models(&self) -> Vec<String> {
        self.registry.list_available_models().unwrap_or_default()
    }

    /// Loads a registry model, reusing the cached copy while the file is
    /// unchanged.
    pub fn model(&self, name: &str) -> ApiResult<Arc<CrnnModel<f32>>> {
        if !self.registry.contains(name) {
            return Err(ApiError::unprocessable(format!("unknown model {name:?}"))
                .with_details(json!({ "available_models": self.available_models() })));
        }
        let path = self.registry.path_for(name);
        let meta = std::fs::metadata(&path).map_err(|e| ApiError::internal(e.to_string()))?;
        let stamp = (meta.modified().unwrap_or(SystemTime::UNIX_EPOCH), meta.len());
        if let Some(c) = lock(&self.models).get(name) {
            if c.stamp == stamp {
                return Ok(c.model.clone());
            }
        }
        let model = Arc::new(
            self.registry
                .load_ocr_model(name)
                .map_err(|e| ApiError::unprocessable(format!("model {name:?} cannot be loaded: {e}")))?,
        );
        lock(&self.models).insert(
            name.to_string(),
            CachedModel {
                stamp,
                model: model.clone(),
            },
        );
        Ok(model)
    }

    pub fn list_models(&self) -> ApiResult<Vec<ModelInfo>> {
        let names = self
            .registry
            .list_available_models()
            .map_err(|e| ApiError::internal(e.to_string()))?;
        let mut out = Vec::with_capacity(names.len());
        for name in names {
            match self.model(&name) {
                Ok(m) => out.push(ModelInfo {
                    charset_size: m.charset().num_chars(),
                    provenance: m.metadata.provenance.clone(),
                    name,
                }),
                Err(e) => warn!("skipping model {name}: {}", e.message),
            }
        }
        Ok(out)
    }

    fn image_blob(&self, hash: &str) -> ApiResult<GrayImage> {
        let bytes = self.store().blob(hash)?;
        decode_gray(&bytes).map_err(|e| ApiError::internal(format!("stored image {hash} unreadable: {e}")))
    }

    pub fn page_image(&self, page: &PageRecord) -> ApiResult<GrayImage> {
        self.image_blob(&page.image)
    }

    pub fn page(&self, id: &str) -> ApiResult<PageRecord> {
        self.store().page(id).cloned().ok_or_else(|| ApiError::not_found("page", id))
    }

    pub fn line(&self, id: &str) -> ApiResult<LineRecord> {
        self.store().line(id).cloned().ok_or_else(|| ApiError::not_found("line", id))
    }

    pub fn document(&self, id: &str) -> ApiResult<DocumentRecord> {
        self.store().document(id).cloned().ok_or_else(|| ApiError::not_found("document", id))
    }

    /// Decodes an upload into page images and persists the document.
    pub fn create_document(&self, filename: &str, bytes: &[u8]) -> ApiResult<DocumentRecord> {
        let (media_type, images) = if is_pdf(bytes) {
            let pages = extract_page_images(bytes).map_err(|e| match e {
                PdfError::NoRasterPages(_) => ApiError::unprocessable(e.to_string()),
                PdfError::Parse(_) => ApiError::unprocessable(e.to_string()),
            })?;
            if !pages.skipped.is_empty() {
                warn!("{filename}: skipped PDF pages without raster images: {:?}", pages.skipped);
            }
            ("application/pdf", pages.images)
        } else {
            let media_type = match image::guess_format(bytes) {
                Ok(ImageFormat::Png) => "image/png",
                Ok(ImageFormat::Jpeg) => "image/jpeg",
                Ok(ImageFormat::Tiff) => "image/tiff",
                _ => {
                    return Err(ApiError::new(
                        StatusCode::UNSUPPORTED_MEDIA_TYPE,
                        "unsupported media; upload PNG, JPEG, TIFF or a PDF of page scans",
                    ))
                }
            };
            let img = decode_gray(bytes).map_err(|e| ApiError::unprocessable(format!("cannot decode image: {e}")))?;
            (media_type, vec![img])
        };
        let store = self.store();
        let source = store.put_blob(bytes)?;
        drop(store);
        let doc_id = new_id();
        let mut events = Vec::new();
        let mut page_ids = Vec::new();
        for (index, img) in images.iter().enumerate() {
            let png = img.encode_png().map_err(|e| ApiError::internal(e.to_string()))?;
            let blob = self.store().put_blob(&png)?;
            let page = PageRecord {
                id: new_id(),
                document_id: doc_id.clone(),
                index,
                image: blob.clone(),
                original_image: blob,
                width: img.width(),
                height: img.height(),
                deskew_angle: 0.0,
                line_ids: Vec::new(),
            };
            page_ids.push(page.id.clone());
            events.push(Event::PutPage(page));
        }
        let doc = DocumentRecord {
            id: doc_id,
            filename: filename.to_string(),
            media_type: media_type.to_string(),
            source,
            page_ids,
            created_at: now_rfc3339(),
        };
        events.push(Event::PutDocument(doc.clone()));
        self.store().commit(events)?;
        Ok(doc)
    }

    /// Automatic segmentation. Lines that are corrected, OCRed or manually
    /// drawn are kept; only unprocessed automatic lines are replaced, and new
    /// boxes overlapping a kept line are dropped.
    pub fn segment_page(&self, page_id: &str, req: &SegmentRequest) -> ApiResult<Vec<LineRecord>> {
        let min_gap = req.min_gap.unwrap_or(kalchas::imaging::DEFAULT_MIN_GAP);
        let min_height = req.min_height.unwrap_or(kalchas::imaging::DEFAULT_MIN_HEIGHT);
        if min_gap == 0 || min_height == 0 {
            return Err(ApiError::unprocessable("min_gap and min_height must be at least 1"));
        }
        let max_angle = match req.deskew {
            None | Some(DeskewOption::Enabled(false)) => None,
            Some(DeskewOption::Enabled(true)) => Some(kalchas::imaging::DEFAULT_MAX_ANGLE),
            Some(DeskewOption::MaxAngle(a)) if a > 0.0 && a <= 15.0 => Some(a),
            Some(DeskewOption::MaxAngle(a)) => {
                return Err(ApiError::unprocessable(format!("deskew range {a} must lie in (0, 15] degrees")))
            }
        };
        let (page, lines) = {
            let store = self.store();
            let page = store.page(page_id).cloned().ok_or_else(|| ApiError::not_found("page", page_id))?;
            let lines = store.page_lines(&page);
            (page, lines)
        };
        if !req.force && !lines.is_empty() && lines.iter().all(|l| l.status == LineStatus::Corrected) {
            return Err(ApiError::conflict(
                "every line on this page is corrected; pass \"force\": true to add new lines around them",
            ));
        }
        let mut binary = otsu_binarize(&self.page_image(&page)?);
        let mut angle = 0.0;
        if let Some(max) = max_angle {
            let (rotated, a) = deskew(&binary, max);
            binary = rotated;
            angle = a;
        }
        let boxes = segment_lines(&binary, min_gap, min_height);
        let new_image = if angle != 0.0 {
            let png = binary.as_gray().encode_png().map_err(|e| ApiError::internal(e.to_string()))?;
            Some(self.store().put_blob(&png)?)
        } else {
            None
        };

        let mut store = self.store();
        let mut page = store.page(page_id).cloned().ok_or_else(|| ApiError::not_found("page", page_id))?;
        let old = store.page_lines(&page);
        let kept: Vec<LineRecord> = old
            .iter()
            .filter(|l| !(l.origin == LineOrigin::Auto && l.status == LineStatus::Unprocessed))
            .cloned()
            .collect();
        if let Some(image) = new_image {
            if !kept.is_empty() {
                return Err(ApiError::conflict(format!(
                    "deskewing by {angle} degrees would move {} kept line(s); segment without deskew",
                    kept.len()
                )));
            }
            page.image = image;
            page.deskew_angle += angle;
        }
        let mut next = kept.clone();
        for b in boxes {
            if !kept.iter().any(|k| k.bbox.overlaps(&b)) {
                next.push(LineRecord::new(page_id, b, LineOrigin::Auto));
            }
        }
        let events = line_set_events(page.clone(), &old, next);
        store.commit(events)?;
        let page = store.page(page_id).cloned().expect("page just written");
        Ok(store.page_lines(&page))
    }

    /// Replaces the page's lines with user boxes. A box identical to an
    /// existing line keeps that line unchanged, including its OCR text and
    /// correction; other boxes become new manual lines.
    pub fn replace_lines(&self, page_id: &str, boxes: &[LineBox]) -> ApiResult<Vec<LineRecord>> {
        let mut store = self.store();
        let page = store.page(page_id).cloned().ok_or_else(|| ApiError::not_found("page", page_id))?;
        for (i, b) in boxes.iter().enumerate() {
            b.check_within(page.width, page.height).map_err(|e| {
                ApiError::unprocessable(format!("box {i}: {e}")).with_details(json!({ "index": i }))
            })?;
        }
        let old = store.page_lines(&page);
        let mut unused: Vec<&LineRecord> = old.iter().collect();
        let mut next = Vec::with_capacity(boxes.len());
        for b in boxes {
            // An unchanged box covers the same pixels, so its OCR result and
            // correction stay valid.
            let line = match unused.iter().position(|l| l.bbox == *b) {
                Some(pos) => unused.remove(pos).clone(),
                None => LineRecord::new(page_id, *b, LineOrigin::Manual),
            };
            next.push(line);
        }
        store.commit(line_set_events(page.clone(), &old, next))?;
        let page = store.page(page_id).cloned().expect("page just written");
        Ok(store.page_lines(&page))
    }

    /// Recognizes one line. The status only moves forward, so a corrected
    /// line keeps its correction and status.
    pub fn ocr_line(&self, line_id: &str, model_name: Option<&str>) -> ApiResult<OcrResponse> {
        let name = model_name.unwrap_or(&self.config.default_model).to_string();
        let line = self.line(line_id)?;
        let page = self.page(&line.page_id)?;
        let model = self.model(&name)?;
        let input = prepare_line(&self.page_image(&page)?, &line.bbox)
            .map_err(|e| ApiError::unprocessable(format!("line {line_id}: {e}")))?;
        let (text, confidence) = model.ocr(std::slice::from_ref(&input)).pop().expect("one result per line");
        let text = normalize(&text);

        let mut store = self.store();
        let mut fresh = store.line(line_id).cloned().ok_or_else(|| ApiError::not_found("line", line_id))?;
        let fresh_page = store.page(&page.id).map(|p| p.image.clone());
        if fresh.bbox != line.bbox || fresh_page.as_deref() != Some(page.image.as_str()) {
            return Err(ApiError::conflict("line changed during recognition; retry"));
        }
        fresh.ocr_text = Some(text.clone());
        fresh.ocr_confidence = Some(confidence);
        fresh.ocr_model = Some(name.clone());
        fresh.status = fresh.status.max(LineStatus::OcrDone);
        store.commit(vec![Event::PutLine(fresh.clone())])?;
        Ok(OcrResponse {
            text,
            confidence,
            model: name,
            line: fresh,
        })
    }

    /// Stores a human transcription. Characters outside the label charset
    /// are accepted and recorded in `flagged_chars`.
    pub fn correct_line(&self, line_id: &str, text: &str) -> ApiResult<LineRecord> {
        let text = normalize(text);
        let mut store = self.store();
        let mut line = store.line(line_id).cloned().ok_or_else(|| ApiError::not_found("line", line_id))?;
        line.flagged_chars = self.label_charset.missing_chars(&text);
        line.corrected_text = Some(text);
        line.status = LineStatus::Corrected;
        store.commit(vec![Event::PutLine(line.clone())])?;
        Ok(line)
    }

    /// Corrected lines of the given documents, cropped from their pages.
    /// Lines whose text `charset` cannot encode are excluded and listed.
    pub fn collect_labels(&self, document_ids: &[String], charset: &Charset) -> ApiResult<Labels> {
        let mut pages = Vec::new();
        {
            let store = self.store();
            for doc_id in document_ids {
                let doc = store.document(doc_id).ok_or_else(|| ApiError::not_found("document", doc_id))?;
                for pid in &doc.page_ids {
                    let page = store.page(pid).cloned().ok_or_else(|| ApiError::internal(format!("page {pid} missing")))?;
                    let lines = store.page_lines(&page);
                    pages.push((doc_id.clone(), page, lines));
                }
            }
        }
        let mut labels = Labels::default();
        for (doc_id, page, lines) in pages {
            let corrected: Vec<LineRecord> = lines.into_iter().filter(|l| l.status == LineStatus::Corrected).collect();
            if corrected.is_empty() {
                continue;
            }
            let image = self.page_image(&page)?;
            for l in corrected {
                let text = l.corrected_text.clone().unwrap_or_default();
                let missing = charset.missing_chars(&text);
                if !l.flagged_chars.is_empty() || !missing.is_empty() {
                    let mut chars = l.flagged_chars.clone();
                    chars.extend(missing.into_iter().filter(|c| !l.flagged_chars.contains(c)));
                    labels.excluded.push(ExcludedLine {
                        line_id: l.id,
                        page_id: page.id.clone(),
                        reason: "characters outside the charset".into(),
                        chars,
                    });
                    continue;
                }
                let crop = image
                    .crop(&l.bbox)
                    .map_err(|e| ApiError::internal(format!("line {}: {e}", l.id)))?;
                labels.lines.push(LabeledLine {
                    line_id: l.id,
                    document_id: doc_id.clone(),
                    text,
                    image: crop,
                });
            }
        }
        Ok(labels)
    }

    /// Builds the export archive: `manifest.jsonl`, `images/<line>.png` and
    /// `report.json`.
    pub fn export_archive(&self, document_id: &str) -> ApiResult<Vec<u8>> {
        let labels = self.collect_labels(&[document_id.to_string()], &self.label_charset)?;
        let mut manifest = Vec::new();
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        for l in &labels.lines {
            let path = format!("images/{}.png", l.line_id);
            let entry = ManifestEntry {
                image: path.clone().into(),
                text: l.text.clone(),
                source: EXPORT_SOURCE.into(),
                split: None,
            };
            serde_json::to_writer(&mut manifest, &entry).map_err(|e| ApiError::internal(e.to_string()))?;
            manifest.push(b'\n');
            files.push((path, l.image.encode_png().map_err(|e| ApiError::internal(e.to_string()))?));
        }
        let report = json!({
            "document_id": document_id,
            "status": "corrected",
            "exported": labels.lines.len(),
            "excluded": labels.excluded,
        });
        let mut builder = tar::Builder::new(Vec::new());
        let mut add = |path: &str, data: &[u8]| -> std::io::Result<()> {
            let mut header = tar::Header::new_gnu();
            header.set_size(data.len() as u64);
            header.set_mode(0o644);
            header.set_mtime(0);
            header.set_cksum();
            builder.append_data(&mut header, path, data)
        };
        let io = |e: std::io::Error| ApiError::internal(e.to_string());
        add("manifest.jsonl", &manifest).map_err(io)?;
        for (path, data) in &files {
            add(path, data).map_err(io)?;
        }
        add("report.json", &serde_json::to_vec_pretty(&report).expect("report serializes")).map_err(io)?;
        builder.into_inner().map_err(io)
    }
}
