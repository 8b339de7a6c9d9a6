use super::{BinaryImage, GrayImage};

/// Spacing of the candidate angle grid in degrees.
pub const ANGLE_STEP: f64 = 0.25;
/// Default search half-range in degrees.
pub const DEFAULT_MAX_ANGLE: f64 = 5.0;

/// Pixel-center coordinates relative to the image center.
fn centered(x: usize, y: usize, w: usize, h: usize) -> (f64, f64) {
    (x as f64 + 0.5 - w as f64 / 2.0, y as f64 + 0.5 - h as f64 / 2.0)
}

/// Sum of squared projection-profile bins after rotating the ink by `deg`.
/// With fixed total ink this ranks angles exactly as the profile variance does.
fn profile_energy(ink: &[(f64, f64)], deg: f64, h: usize, reach: usize) -> u64 {
    let (s, c) = deg.to_radians().sin_cos();
    let mut bins = vec![0u64; h + 2 * reach + 1];
    for &(dx, dy) in ink {
        let row = (s * dx + c * dy + h as f64 / 2.0).floor() as i64 + reach as i64;
        let row = row.clamp(0, bins.len() as i64 - 1) as usize;
        bins[row] += 1;
    }
    bins.iter().map(|&b| b * b).sum()
}

/// Estimates skew by projection-profile search over `[-max_deg, max_deg]`
/// in [`ANGLE_STEP`] increments and rotates the page to undo it.
///
/// Returns the corrected image and the applied rotation in degrees (the
/// negated skew). Ties go to the smallest magnitude, so blank pages are
/// returned unrotated.
pub fn deskew(img: &BinaryImage, max_deg: f64) -> (BinaryImage, f64) {
    let (w, h) = (img.width(), img.height());
    let mut ink = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if img.is_ink(x, y) {
                ink.push(centered(x, y, w, h));
            }
        }
    }
    let steps = (max_deg.max(0.0) / ANGLE_STEP).floor() as i64;
    let reach = w + h;
    let mut best = (0.0f64, profile_energy(&ink, 0.0, h, reach));
    for k in 1..=steps {
        for deg in [-(k as f64) * ANGLE_STEP, k as f64 * ANGLE_STEP] {
            let e = profile_energy(&ink, deg, h, reach);
            if e > best.1 {
                best = (deg, e);
            }
        }
    }
    if best.0 == 0.0 {
        return (img.clone(), 0.0);
    }
    (rotate(img, best.0), best.0)
}

/// Rotates about the image center by `deg` degrees, positive turning +x
/// toward +y. Bilinear sampling with background outside the source, then
/// re-thresholded at 128.
pub fn rotate(img: &BinaryImage, deg: f64) -> BinaryImage {
    let (w, h) = (img.width(), img.height());
    let src = img.as_gray();
    let (s, c) = deg.to_radians().sin_cos();
    let sample = |x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            255.0
        } else {
            src.get(x as usize, y as usize) as f64
        }
    };
    let mut out = vec![255u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = centered(x, y, w, h);
            // inverse map: rotate by -deg
            let sx = c * dx + s * dy + w as f64 / 2.0 - 0.5;
            let sy = -s * dx + c * dy + h as f64 / 2.0 - 0.5;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let v = (1.0 - fy) * ((1.0 - fx) * sample(x0, y0) + fx * sample(x0 + 1, y0))
                + fy * ((1.0 - fx) * sample(x0, y0 + 1) + fx * sample(x0 + 1, y0 + 1));
            out[y * w + x] = if v < 128.0 { 0 } else { 255 };
        }
    }
    BinaryImage::from_gray_threshold(&GrayImage::new(w, h, out).expect("same geometry"))
}
