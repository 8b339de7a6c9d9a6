//! Line-level datasets: manifests, ingestion into training samples, and a
//! synthetic line generator.
//!
//! Two on-disk layouts are understood. A JSONL manifest holds one object per
//! line, `{"image": "<relative path>", "text": "...", "source": "..."}`. A
//! directory of parallel files pairs `X.png` with `X.gt.txt`; an image named
//! `X.bin.png` also pairs with `X.gt.txt`.

mod atlas;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use atlas::{
    render_line, render_page, Glyph, GlyphAtlas, PageLine, RenderStyle, RenderedLine, RenderedPage, MAX_BASELINE_JITTER,
};

use crate::charset::{normalize, Charset, CharsetError, LabelSeq};
use crate::ctc::ctc_feasible;
use crate::imaging::{load_gray, prepare_whole, ImagingError, LineImage};

/// Built-in polytonic sentences used when no text list is given.
pub const SAMPLE_TEXTS: &str = include_str!("../../assets/sample_texts.txt");

pub const SOURCE_SYNTHETIC: &str = "synthetic";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("dataset {0} has no valid entries")]
    Empty(String),
    #[error("sample {index} ({id}): {reason}")]
    Sample { index: usize, id: String, reason: String },
    #[error("sample {index} ({id}) uses characters outside the model charset: {chars:?}")]
    OutOfCharset { index: usize, id: String, chars: Vec<char> },
    #[error("glyph atlas: {0}")]
    Atlas(String),
    #[error("no glyph for {0:?}")]
    Unrenderable(char),
    #[error("render: {0}")]
    Render(String),
}

/// One labeled line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub text: String,
    #[serde(default)]
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

/// A per-entry problem found while loading; not fatal.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryError {
    pub location: String,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    /// Entries with image paths resolved, sorted by path.
    pub entries: Vec<ManifestEntry>,
    pub errors: Vec<EntryError>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn image_ok(path: &Path) -> Result<(), String> {
    if !path.is_file() {
        return Err(format!("image {} not found", path.display()));
    }
    image::image_dimensions(path)
        .map(|_| ())
        .map_err(|e| format!("image {} unreadable: {e}", path.display()))
}

/// Loads a JSONL manifest or a parallel-file directory. Bad entries are
/// collected in [`Manifest::errors`] with warnings; the call fails only if
/// nothing valid remains.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, DatasetError> {
    let path = path.as_ref();
    let mut m = if path.is_dir() {
        load_dir(path)?
    } else {
        load_jsonl(path)?
    };
    for e in &m.errors {
        warn!("{}: {}", e.location, e.message);
    }
    if m.entries.is_empty() {
        return Err(DatasetError::Empty(path.display().to_string()));
    }
    m.entries.sort_by(|a, b| a.image.cmp(&b.image));
    Ok(m)
}

fn load_jsonl(path: &Path) -> Result<Manifest, DatasetError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(path)?;
    let mut m = Manifest::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("{}:{}", path.display(), i + 1);
        let mut entry: ManifestEntry = match serde_json::from_str(line) {
            Ok(e) => e,
            Err(e) => {
                m.errors.push(EntryError {
                    location,
                    message: format!("malformed entry: {e}"),
                });
                continue;
            }
        };
        entry.text = normalize(entry.text.trim_end_matches(['\r', '\n']));
        if entry.image.is_relative() {
            entry.image = base.join(&entry.image);
        }
        if entry.text.trim().is_empty() {
            m.errors.push(EntryError {
                location,
                message: "empty transcript".into(),
            });
            continue;
        }
        if let Err(message) = image_ok(&entry.image) {
            m.errors.push(EntryError { location, message });
            continue;
        }
        m.entries.push(entry);
    }
    Ok(m)
}

/// `X.gt.txt` for `X.png` or `X.bin.png`.
fn transcript_path(image: &Path) -> Option<PathBuf> {
    let name = image.file_name()?.to_str()?;
    let stem = name.strip_suffix(".png")?;
    let stem = stem.strip_suffix(".bin").unwrap_or(stem);
    Some(image.with_file_name(format!("{stem}.gt.txt")))
}

fn load_dir(dir: &Path) -> Result<Manifest, DatasetError> {
    let mut images: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().and_then(|e| e.to_str()) == Some("png"))
        .collect();
    images.sort();
    let mut m = Manifest::default();
    for image in images {
        let location = image.display().to_string();
        let Some(gt) = transcript_path(&image).filter(|p| p.is_file()) else {
            m.errors.push(EntryError {
                location,
                message: "missing .gt.txt transcript".into(),
            });
            continue;
        };
        let text = match fs::read_to_string(&gt) {
            Ok(t) => normalize(t.lines().next().unwrap_or("").trim_end()),
            Err(e) => {
                m.errors.push(EntryError {
                    location,
                    message: format!("unreadable transcript: {e}"),
                });
                continue;
            }
        };
        if text.trim().is_empty() {
            m.errors.push(EntryError {
                location,
                message: "empty transcript".into(),
            });
            continue;
        }
        if let Err(message) = image_ok(&image) {
            m.errors.push(EntryError { location, message });
            continue;
        }
        m.entries.push(ManifestEntry {
            image,
            text,
            source: String::new(),
            split: None,
        });
    }
    Ok(m)
}

/// Writes entries as JSONL with image paths relative to the manifest's
/// directory where possible.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for e in entries {
        let mut e = e.clone();
        if let Ok(rel) = e.image.strip_prefix(base) {
            e.image = rel.to_path_buf();
        }
        serde_json::to_writer(&mut out, &e).expect("entry serializes");
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// A prepared line plus its encoded transcript.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub text: String,
    pub labels: LabelSeq,
    pub image: LineImage,
}

/// Encodes and CTC-checks a transcript; `Err` carries the rejection.
pub fn check_transcript(cs: &Charset, timesteps: usize, index: usize, id: &str, text: &str) -> Result<LabelSeq, DatasetError> {
    let labels = cs.encode(text).map_err(|e| match e {
        CharsetError::OutOfCharset { .. } => DatasetError::OutOfCharset {
            index,
            id: id.to_string(),
            chars: cs.missing_chars(text),
        },
        other => DatasetError::Sample {
            index,
            id: id.to_string(),
            reason: other.to_string(),
        },
    })?;
    if !ctc_feasible(timesteps, &labels) {
        return Err(DatasetError::Sample {
            index,
            id: id.to_string(),
            reason: format!("transcript of {} symbols cannot align to {timesteps} frames", labels.len()),
        });
    }
    Ok(labels)
}

/// Loads and prepares every entry. The first unencodable, infeasible or
/// unreadable entry aborts ingestion with its index.
pub fn load_samples(entries: &[ManifestEntry], cs: &Charset, timesteps: usize) -> Result<Vec<Sample>, DatasetError> {
    entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let id = e.image.display().to_string();
            let labels = check_transcript(cs, timesteps, i, &id, &e.text)?;
            let page = load_gray(&e.image).map_err(|err| DatasetError::Sample {
                index: i,
                id: id.clone(),
                reason: err.to_string(),
            })?;
            Ok(Sample {
                id,
                text: normalize(&e.text),
                labels,
                image: prepare_whole(&page),
            })
        })
        .collect()
}

/// Builds a sample from an in-memory line image.
pub fn sample_from_image(
    id: &str,
    img: &crate::imaging::GrayImage,
    text: &str,
    cs: &Charset,
    timesteps: usize,
) -> Result<Sample, DatasetError> {
    let labels = check_transcript(cs, timesteps, 0, id, text)?;
    Ok(Sample {
        id: id.to_string(),
        text: normalize(text),
        labels,
        image: prepare_whole(img),
    })
}

/// Inclusive ranges from which each synthetic line's style is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StyleRanges {
    pub spacing: (i32, i32),
    pub spacing_jitter: (u32, u32),
    pub baseline_jitter: (u32, u32),
    pub noise: (f64, f64),
    pub contrast: (f64, f64),
}

impl Default for StyleRanges {
    /// Every range collapsed onto the clean default style.
    fn default() -> Self {
        let d = RenderStyle::default();
        StyleRanges {
            spacing: (d.spacing, d.spacing),
            spacing_jitter: (0, 0),
            baseline_jitter: (0, 0),
            noise: (0.0, 0.0),
            contrast: (1.0, 1.0),
        }
    }
}

impl StyleRanges {
    pub fn sample(&self, rng: &mut impl Rng) -> RenderStyle {
        fn pick_f(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        }
        RenderStyle {
            spacing: rng.random_range(self.spacing.0..=self.spacing.1.max(self.spacing.0)),
            spacing_jitter: rng.random_range(self.spacing_jitter.0..=self.spacing_jitter.1.max(self.spacing_jitter.0)),
            baseline_jitter: rng
                .random_range(self.baseline_jitter.0..=self.baseline_jitter.1.max(self.baseline_jitter.0))
                .min(MAX_BASELINE_JITTER),
            noise: pick_f(rng, self.noise),
            contrast: pick_f(rng, self.contrast),
            ..RenderStyle::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusReport {
    pub manifest: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub errors: Vec<EntryError>,
}

/// Renders each text to `out_dir/line_NNNNN.png` and writes
/// `out_dir/manifest.jsonl`. Failures are collected per entry.
pub fn generate_corpus(
    atlas: &GlyphAtlas,
    texts: &[String],
    ranges: &StyleRanges,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<CorpusReport, DatasetError> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(texts.len());
    let mut errors = Vec::new();
    for (i, text) in texts.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let style = ranges.sample(&mut rng);
        let file = out_dir.join(format!("line_{i:05}.png"));
        let result = render_line(atlas, text, &style, rng.random())
            .and_then(|r| r.image.save_png(&file).map(|_| r).map_err(DatasetError::from));
        match result {
            Ok(r) => entries.push(ManifestEntry {
                image: file,
                text: r.text,
                source: SOURCE_SYNTHETIC.into(),
                split: None,
            }),
            Err(e) => errors.push(EntryError {
                location: format!("text {i}"),
                message: e.to_string(),
            }),
        }
    }
    let manifest = out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &entries)?;
    Ok(CorpusReport {
        manifest,
        entries,
        errors,
    })
}

/// Non-empty lines of [`SAMPLE_TEXTS`].
pub fn sample_texts() -> Vec<String> {
    SAMPLE_TEXTS.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect()
}
