//! Extraction of embedded raster page images from PDF files.
//!
//! Only pages that carry an image XObject are recovered; the largest image on
//! each page is taken as the page scan. Vector content is never rendered.

use kalchas::imaging::{decode_gray, to_grayscale, GrayImage};
use log::warn;
use lopdf::{Document, Object, Stream};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PdfError {
    #[error("unreadable PDF: {0}")]
    Parse(String),
    #[error("PDF has no extractable raster page images ({0}); only embedded page scans are supported, vector content is not rendered")]
    NoRasterPages(String),
}

/// Result of extraction: the page images in document order plus the
/// 1-based numbers of pages that carried no usable image.
#[derive(Debug)]
pub struct PdfPages {
    pub images: Vec<GrayImage>,
    pub skipped: Vec<u32>,
}

pub fn is_pdf(bytes: &[u8]) -> bool {
    bytes.starts_with(b"%PDF-")
}

pub fn extract_page_images(bytes: &[u8]) -> Result<PdfPages, PdfError> {
    let doc = Document::load_mem(bytes).map_err(|e| PdfError::Parse(e.to_string()))?;
    let pages = doc.get_pages();
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    let mut reasons = Vec::new();
    for (&number, &page_id) in &pages {
        match largest_page_image(&doc, page_id) {
            Ok(img) => images.push(img),
            Err(reason) => {
                warn!("PDF page {number}: {reason}");
                reasons.push(format!("page {number}: {reason}"));
                skipped.push(number);
            }
        }
    }
    if images.is_empty() {
        let detail = if pages.is_empty() {
            "document has no pages".to_string()
        } else {
            reasons.join("; ")
        };
        return Err(PdfError::NoRasterPages(detail));
    }
    Ok(PdfPages { images, skipped })
}

fn largest_page_image(doc: &Document, page_id: lopdf::ObjectId) -> Result<GrayImage, String> {
    let candidates = doc.get_page_images(page_id).map_err(|_| "no image resources".to_string())?;
    let best = candidates
        .iter()
        .filter(|img| img.width > 0 && img.height > 0)
        .max_by_key(|img| img.width * img.height)
        .ok_or_else(|| "no image resources".to_string())?;
    let stream = doc
        .get_object(best.id)
        .and_then(Object::as_stream)
        .map_err(|e| e.to_string())?;
    decode_image_stream(stream, best.width as usize, best.height as usize)
}

fn name_list(obj: Option<&Object>) -> Vec<Vec<u8>> {
    match obj {
        Some(Object::Name(n)) => vec![n.clone()],
        Some(Object::Array(a)) => a.iter().filter_map(|o| o.as_name().ok().map(<[u8]>::to_vec)).collect(),
        _ => Vec::new(),
    }
}

fn decode_image_stream(stream: &Stream, width: usize, height: usize) -> Result<GrayImage, String> {
    let dict = &stream.dict;
    if dict.get(b"ImageMask").and_then(Object::as_bool).unwrap_or(false) {
        return Err("image is a stencil mask".into());
    }
    let filters = name_list(dict.get(b"Filter").ok());
    let last = filters.last().map(Vec::as_slice);
    if matches!(last, Some(b"DCTDecode")) {
        let mut content = stream.clone();
        if filters.len() > 1 {
            content.dict.set("Filter", Object::Array(filters[..filters.len() - 1].iter().map(|f| Object::Name(f.clone())).collect()));
            content.content = content.decompressed_content().map_err(|e| e.to_string())?;
        }
        return decode_gray(&content.content).map_err(|e| format!("embedded JPEG: {e}"));
    }
    let data = if filters.is_empty() {
        stream.content.clone()
    } else {
        stream.decompressed_content().map_err(|e| {
            let names: Vec<String> = filters.iter().map(|f| String::from_utf8_lossy(f).into_owned()).collect();
            format!("unsupported image encoding {names:?}: {e}")
        })?
    };
    let bpc = dict.get(b"BitsPerComponent").and_then(Object::as_i64).unwrap_or(8);
    let inverted = dict
        .get(b"Decode")
        .and_then(Object::as_array)
        .ok()
        .and_then(|a| a.first())
        .and_then(|o| o.as_float().ok().or_else(|| o.as_i64().ok().map(|v| v as f32)))
        .is_some_and(|v| v > 0.5);
    let mut img = match bpc {
        1 => unpack_bilevel(&data, width, height)?,
        8 => decode_8bit(&data, width, height)?,
        other => return Err(format!("unsupported bit depth {other}")),
    };
    if inverted {
        img.data_mut().iter_mut().for_each(|v| *v = 255 - *v);
    }
    Ok(img)
}

fn unpack_bilevel(data: &[u8], width: usize, height: usize) -> Result<GrayImage, String> {
    let stride = width.div_ceil(8);
    if data.len() < stride * height {
        return Err(format!("1-bit image data holds {} bytes, {width}x{height} needs {}", data.len(), stride * height));
    }
    let mut out = GrayImage::filled(width, height, 255);
    for y in 0..height {
        for x in 0..width {
            let bit = data[y * stride + x / 8] >> (7 - x % 8) & 1;
            out.set(x, y, if bit == 1 { 255 } else { 0 });
        }
    }
    Ok(out)
}

fn decode_8bit(data: &[u8], width: usize, height: usize) -> Result<GrayImage, String> {
    let pixels = width * height;
    let channels = data.len().checked_div(pixels).unwrap_or(0);
    let used = &data[..(pixels * channels).min(data.len())];
    match channels {
        1 | 3 => to_grayscale(width, height, channels, used).map_err(|e| e.to_string()),
        4 => {
            let gray: Vec<u8> = used
                .chunks_exact(4)
                .map(|p| {
                    let [c, m, y, k] = [p[0], p[1], p[2], p[3]].map(f64::from);
                    let ink = (0.299 * c + 0.587 * m + 0.114 * y + k).min(255.0);
                    (255.0 - ink).round() as u8
                })
                .collect();
            GrayImage::new(width, height, gray).map_err(|e| e.to_string())
        }
        _ => Err(format!("image data holds {} bytes, not a multiple of {width}x{height} pixels", data.len())),
    }
}
