use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetError;
use crate::charset::{normalize, Charset};
use crate::imaging::{GrayImage, LineBox};

const ATLAS_PNG: &[u8] = include_bytes!("../../assets/polytonic_atlas.png");
const ATLAS_JSON: &str = include_str!("../../assets/polytonic_atlas.json");

#[derive(Debug, Deserialize)]
struct AtlasIndex {
    cell_width: usize,
    cell_height: usize,
    baseline: usize,
    columns: usize,
    glyphs: Vec<GlyphEntry>,
}

#[derive(Debug, Deserialize)]
struct GlyphEntry {
    char: String,
    cell: usize,
    width: usize,
}

/// Ink bitmap of one character: `height` rows of `width` luminance values.
#[derive(Debug, Clone)]
pub struct Glyph {
    pub width: usize,
    pub pixels: Vec<u8>,
}

/// Pre-rendered glyph bitmaps sharing one line height and baseline.
#[derive(Debug, Clone)]
pub struct GlyphAtlas {
    height: usize,
    baseline: usize,
    glyphs: HashMap<char, Glyph>,
}

impl GlyphAtlas {
    /// The built-in polytonic atlas (serif face, 64 px line height).
    pub fn polytonic() -> Self {
        let sheet = crate::imaging::decode_gray(ATLAS_PNG).expect("embedded atlas decodes");
        Self::from_sheet(&sheet, ATLAS_JSON).expect("embedded atlas is consistent")
    }

    /// Loads a PNG grid plus its JSON index.
    pub fn load(png: impl AsRef<Path>, index: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let sheet = crate::imaging::load_gray(png)?;
        let json = std::fs::read_to_string(index)?;
        Self::from_sheet(&sheet, &json)
    }

    /// Loads `<stem>.png` and `<stem>.json` given either path.
    pub fn load_pair(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let p = path.as_ref();
        Self::load(p.with_extension("png"), p.with_extension("json"))
    }

    pub fn from_sheet(sheet: &GrayImage, index_json: &str) -> Result<Self, DatasetError> {
        let index: AtlasIndex =
            serde_json::from_str(index_json).map_err(|e| DatasetError::Atlas(format!("bad index: {e}")))?;
        if index.columns == 0 || index.cell_width == 0 || index.cell_height == 0 || index.baseline > index.cell_height {
            return Err(DatasetError::Atlas("degenerate cell geometry".into()));
        }
        let mut glyphs = HashMap::with_capacity(index.glyphs.len());
        for g in index.glyphs {
            let mut chars = g.char.chars();
            let (Some(ch), None) = (chars.next(), chars.next()) else {
                return Err(DatasetError::Atlas(format!("entry {:?} is not one character", g.char)));
            };
            let (cx, cy) = ((g.cell % index.columns) * index.cell_width, (g.cell / index.columns) * index.cell_height);
            if g.width == 0 || g.width > index.cell_width || cx + index.cell_width > sheet.width() || cy + index.cell_height > sheet.height() {
                return Err(DatasetError::Atlas(format!("glyph {ch:?} lies outside the sheet")));
            }
            let mut pixels = Vec::with_capacity(g.width * index.cell_height);
            for y in 0..index.cell_height {
                for x in 0..g.width {
                    pixels.push(sheet.get(cx + x, cy + y));
                }
            }
            glyphs.insert(ch, Glyph { width: g.width, pixels });
        }
        Ok(GlyphAtlas {
            height: index.cell_height,
            baseline: index.baseline,
            glyphs,
        })
    }

    pub fn line_height(&self) -> usize {
        self.height
    }

    pub fn baseline(&self) -> usize {
        self.baseline
    }

    pub fn glyph(&self, ch: char) -> Option<&Glyph> {
        self.glyphs.get(&ch)
    }

    /// Charset characters with no glyph.
    pub fn missing(&self, cs: &Charset) -> Vec<char> {
        cs.chars().iter().copied().filter(|c| !self.glyphs.contains_key(c)).collect()
    }
}

/// Rendering parameters. The default is clean: fixed spacing, no jitter,
/// no noise, full contrast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderStyle {
    /// Pixels between consecutive glyphs.
    pub spacing: i32,
    /// Each gap varies uniformly in `±spacing_jitter`.
    pub spacing_jitter: u32,
    /// Each glyph shifts vertically by up to this many pixels (at most 2).
    pub baseline_jitter: u32,
    /// Salt-and-pepper probability per pixel.
    pub noise: f64,
    /// Ink darkness in `(0, 1]`; ink luminance is `255 * (1 - contrast)`.
    pub contrast: f64,
    /// White border around the text.
    pub margin: usize,
    /// Widest canvas accepted.
    pub max_width: usize,
}

impl Default for RenderStyle {
    fn default() -> Self {
        RenderStyle {
            spacing: 1,
            spacing_jitter: 0,
            baseline_jitter: 0,
            noise: 0.0,
            contrast: 1.0,
            margin: 8,
            max_width: 6000,
        }
    }
}

/// Largest supported baseline jitter in pixels.
pub const MAX_BASELINE_JITTER: u32 = 2;

impl RenderStyle {
    fn validate(&self) -> Result<(), DatasetError> {
        if self.baseline_jitter > MAX_BASELINE_JITTER {
            return Err(DatasetError::Render(format!(
                "baseline jitter {} exceeds {MAX_BASELINE_JITTER}",
                self.baseline_jitter
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) || !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(DatasetError::Render("noise must lie in [0,1] and contrast in (0,1]".into()));
        }
        Ok(())
    }
}

/// A rendered line with where its text landed.
#[derive(Debug, Clone)]
pub struct RenderedLine {
    pub image: GrayImage,
    pub text: String,
    /// Row of the (unjittered) baseline.
    pub baseline: usize,
}

/// Composites atlas glyphs left to right on a white canvas.
pub fn render_line(atlas: &GlyphAtlas, text: &str, style: &RenderStyle, seed: u64) -> Result<RenderedLine, DatasetError> {
    style.validate()?;
    let text = normalize(text);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let glyphs: Vec<&Glyph> = text
        .chars()
        .map(|c| atlas.glyph(c).ok_or(DatasetError::Unrenderable(c)))
        .collect::<Result<_, _>>()?;
    let mut gaps = Vec::with_capacity(glyphs.len());
    let mut offsets = Vec::with_capacity(glyphs.len());
    for i in 0..glyphs.len() {
        let jitter = if style.spacing_jitter > 0 {
            rng.random_range(-(style.spacing_jitter as i32)..=style.spacing_jitter as i32)
        } else {
            0
        };
        gaps.push(if i == 0 { 0 } else { style.spacing + jitter });
        let dy = if style.baseline_jitter > 0 {
            rng.random_range(-(style.baseline_jitter as i32)..=style.baseline_jitter as i32)
        } else {
            0
        };
        offsets.push(dy);
    }
    let pad_y = MAX_BASELINE_JITTER as usize;
    let mut x = style.margin as i64;
    let mut positions = Vec::with_capacity(glyphs.len());
    for (g, gap) in glyphs.iter().zip(&gaps) {
        x = (x + *gap as i64).max(0);
        positions.push(x as usize);
        x += g.width as i64;
    }
    let width = (x as usize + style.margin).max(1);
    if width > style.max_width {
        return Err(DatasetError::Render(format!(
            "text needs {width} px, more than the {} px limit",
            style.max_width
        )));
    }
    let height = atlas.height + 2 * (style.margin + pad_y);
    let mut canvas = GrayImage::filled(width, height, 255);
    let ink_level = 255.0 * (1.0 - style.contrast);
    for ((g, &px), &dy) in glyphs.iter().zip(&positions).zip(&offsets) {
        let top = (style.margin + pad_y) as i64 + dy as i64;
        for gy in 0..atlas.height {
            let y = (top + gy as i64) as usize;
            for gx in 0..g.width {
                let v = g.pixels[gy * g.width + gx];
                let v = if style.contrast < 1.0 {
                    (ink_level + (v as f64) * style.contrast).round() as u8
                } else {
                    v
                };
                let cur = canvas.get(px + gx, y);
                canvas.set(px + gx, y, cur.min(v));
            }
        }
    }
    if style.noise > 0.0 {
        for v in canvas.data_mut() {
            if rng.random_bool(style.noise) {
                *v = if rng.random_bool(0.5) { 0 } else { 255 };
            }
        }
    }
    Ok(RenderedLine {
        image: canvas,
        text,
        baseline: style.margin + pad_y + atlas.baseline,
    })
}

/// One line of a rendered page.
#[derive(Debug, Clone)]
pub struct PageLine {
    pub text: String,
    /// Where the line's canvas was pasted.
    pub region: LineBox,
    /// Absolute baseline row.
    pub baseline: usize,
}

#[derive(Debug, Clone)]
pub struct RenderedPage {
    pub image: GrayImage,
    pub lines: Vec<PageLine>,
}

/// Stacks rendered lines vertically with `line_gap` extra white rows
/// between them, left aligned.
pub fn render_page(
    atlas: &GlyphAtlas,
    texts: &[&str],
    style: &RenderStyle,
    seed: u64,
    line_gap: usize,
) -> Result<RenderedPage, DatasetError> {
    let mut rendered = Vec::with_capacity(texts.len());
    for (i, t) in texts.iter().enumerate() {
        rendered.push(render_line(atlas, t, style, seed.wrapping_add(i as u64))?);
    }
    let width = rendered.iter().map(|r| r.image.width()).max().unwrap_or(1);
    let height = rendered.iter().map(|r| r.image.height() + line_gap).sum::<usize>().max(1);
    let mut page = GrayImage::filled(width, height, 255);
    let mut lines = Vec::with_capacity(rendered.len());
    let mut y0 = 0;
    for r in rendered {
        for y in 0..r.image.height() {
            for x in 0..r.image.width() {
                page.set(x, y0 + y, r.image.get(x, y));
            }
        }
        lines.push(PageLine {
            region: LineBox::new(0, y0, r.image.width(), r.image.height()),
            baseline: y0 + r.baseline,
            text: r.text,
        });
        y0 += r.image.height() + line_gap;
    }
    Ok(RenderedPage { image: page, lines })
}
