//! Page images to normalized line images.
//!
//! Pipeline: grayscale, Otsu binarization, optional deskew, projection-profile
//! line segmentation, then per line: crop, binarize, bicubic resize to
//! 760x80 and map ink to 1.0.

mod binarize;
mod deskew;
mod resize;
mod segment;

use std::path::Path;

use image::DynamicImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use binarize::{otsu_binarize, otsu_threshold};
pub use deskew::{deskew, rotate, ANGLE_STEP, DEFAULT_MAX_ANGLE};
pub use resize::{bicubic_resize, cubic_weight, FloatImage};
pub use segment::{ink_row_threshold, segment_lines, DEFAULT_MIN_GAP, DEFAULT_MIN_HEIGHT};

/// Line image height fed to the recognizer.
pub const LINE_HEIGHT: usize = 80;
/// Line image width fed to the recognizer.
pub const LINE_WIDTH: usize = 760;

pub const INK: u8 = 0;
pub const BACKGROUND: u8 = 255;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    Channels(usize),
    #[error("image buffer holds {got} bytes, expected {want}")]
    BufferSize { got: usize, want: usize },
    #[error("image dimensions must be at least 1x1")]
    Empty,
    #[error("box {bx:?} lies outside the {width}x{height} page")]
    OutOfBounds { bx: LineBox, width: usize, height: usize },
    #[error("cannot decode image: {0}")]
    Decode(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 8-bit luminance raster, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for GrayImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "GrayImage({}x{})", self.width, self.height)
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::Empty);
        }
        if data.len() != width * height {
            return Err(ImagingError::BufferSize {
                got: data.len(),
                want: width * height,
            });
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self::new(width, height, vec![value; width * height]).expect("non-empty")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn crop(&self, bx: &LineBox) -> Result<GrayImage, ImagingError> {
        bx.check_within(self.width, self.height)?;
        let mut out = Vec::with_capacity(bx.width * bx.height);
        for y in bx.y..bx.y + bx.height {
            out.extend_from_slice(&self.data[y * self.width + bx.x..y * self.width + bx.x + bx.width]);
        }
        GrayImage::new(bx.width, bx.height, out)
    }

    pub fn to_image(&self) -> image::GrayImage {
        image::GrayImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer size matches")
    }

    pub fn from_image(img: &image::GrayImage) -> Self {
        Self::new(img.width() as usize, img.height() as usize, img.as_raw().clone()).expect("decoded image is non-empty")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImagingError> {
        self.to_image().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ImagingError> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_image().write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }
}

/// Two-level raster: 0 = ink, 255 = background.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct BinaryImage(GrayImage);

impl BinaryImage {
    /// Wraps a gray image, mapping every value `< 128` to ink.
    pub fn from_gray_threshold(img: &GrayImage) -> Self {
        let data = img.data().iter().map(|&v| if v < 128 { INK } else { BACKGROUND }).collect();
        BinaryImage(GrayImage::new(img.width(), img.height(), data).expect("same geometry"))
    }

    pub fn blank(width: usize, height: usize) -> Self {
        BinaryImage(GrayImage::filled(width, height, BACKGROUND))
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn data(&self) -> &[u8] {
        &self.0.data
    }

    #[inline]
    pub fn is_ink(&self, x: usize, y: usize) -> bool {
        self.0.get(x, y) == INK
    }

    pub fn set_ink(&mut self, x: usize, y: usize, ink: bool) {
        self.0.set(x, y, if ink { INK } else { BACKGROUND });
    }

    pub fn as_gray(&self) -> &GrayImage {
        &self.0
    }

    pub fn into_gray(self) -> GrayImage {
        self.0
    }

    pub fn ink_count(&self) -> usize {
        self.0.data.iter().filter(|&&v| v == INK).count()
    }
}

/// Pixel rectangle within a page image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LineBox {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl LineBox {
    pub fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        LineBox { x, y, width, height }
    }

    pub fn full(width: usize, height: usize) -> Self {
        LineBox::new(0, 0, width, height)
    }

    pub fn check_within(&self, width: usize, height: usize) -> Result<(), ImagingError> {
        if self.width == 0
            || self.height == 0
            || self.x.checked_add(self.width).map_or(true, |r| r > width)
            || self.y.checked_add(self.height).map_or(true, |b| b > height)
        {
            return Err(ImagingError::OutOfBounds {
                bx: *self,
                width,
                height,
            });
        }
        Ok(())
    }

    pub fn bottom(&self) -> usize {
        self.y + self.height
    }

    pub fn overlaps(&self, other: &LineBox) -> bool {
        self.x < other.x + other.width
            && other.x < self.x + self.width
            && self.y < other.y + other.height
            && other.y < self.y + self.height
    }
}

/// Recognizer input: 80 rows x 760 columns in `[0, 1]`, ink near 1.
#[derive(Clone, PartialEq)]
pub struct LineImage {
    data: Vec<f32>,
}

impl std::fmt::Debug for LineImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "LineImage(ink={:.3})", self.ink_fraction())
    }
}

impl LineImage {
    pub fn from_vec(data: Vec<f32>) -> Result<Self, ImagingError> {
        if data.len() != LINE_HEIGHT * LINE_WIDTH {
            return Err(ImagingError::BufferSize {
                got: data.len(),
                want: LINE_HEIGHT * LINE_WIDTH,
            });
        }
        Ok(LineImage {
            data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn zeros() -> Self {
        LineImage {
            data: vec![0.0; LINE_HEIGHT * LINE_WIDTH],
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * LINE_WIDTH + x]
    }

    /// Mean pixel value, i.e. the fraction of the line covered by ink.
    pub fn ink_fraction(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Back to an 8-bit image (ink black) for inspection.
    pub fn to_gray(&self) -> GrayImage {
        let data = self.data.iter().map(|&v| (255.0 - v * 255.0).round() as u8).collect();
        GrayImage::new(LINE_WIDTH, LINE_HEIGHT, data).expect("fixed geometry")
    }
}

/// Luminance from an interleaved 8-bit buffer with 1 or 3 channels:
/// `round(0.299 R + 0.587 G + 0.114 B)`.
pub fn to_grayscale(width: usize, height: usize, channels: usize, data: &[u8]) -> Result<GrayImage, ImagingError> {
    if channels != 1 && channels != 3 {
        return Err(ImagingError::Channels(channels));
    }
    if data.len() != width * height * channels {
        return Err(ImagingError::BufferSize {
            got: data.len(),
            want: width * height * channels,
        });
    }
    if channels == 1 {
        return GrayImage::new(width, height, data.to_vec());
    }
    let gray = data
        .chunks_exact(3)
        .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).round().min(255.0) as u8)
        .collect();
    GrayImage::new(width, height, gray)
}

/// Converts a decoded image to grayscale; alpha is discarded.
pub fn gray_from_dynamic(img: &DynamicImage) -> Result<GrayImage, ImagingError> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(g) => to_grayscale(w, h, 1, g.as_raw()),
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            to_grayscale(w, h, 1, img.to_luma8().as_raw())
        }
        _ => to_grayscale(w, h, 3, img.to_rgb8().as_raw()),
    }
}

/// Decodes PNG/JPEG/TIFF bytes to grayscale.
pub fn decode_gray(bytes: &[u8]) -> Result<GrayImage, ImagingError> {
    let img = image::load_from_memory(bytes)?;
    gray_from_dynamic(&img)
}

pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage, ImagingError> {
    let bytes = std::fs::read(path)?;
    decode_gray(&bytes)
}

/// Crop, binarize, resize to 760x80 and map ink to 1.0.
pub fn prepare_line(page: &GrayImage, bx: &LineBox) -> Result<LineImage, ImagingError> {
    let crop = page.crop(bx)?;
    let bin = otsu_binarize(&crop);
    // Resampling is linear, so mapping to ink space before the resize equals
    // mapping after it, and keeps empty regions at exactly zero.
    let ink: Vec<f64> = bin.data().iter().map(|&v| if v == INK { 1.0 } else { 0.0 }).collect();
    let data = resize::resize_plane(&ink, bin.width(), bin.height(), LINE_WIDTH, LINE_HEIGHT)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0) as f32)
        .collect();
    Ok(LineImage { data })
}

/// [`prepare_line`] over the whole image (for inputs that are already line crops).
pub fn prepare_whole(img: &GrayImage) -> LineImage {
    prepare_line(img, &LineBox::full(img.width(), img.height())).expect("full box is in bounds")
}
