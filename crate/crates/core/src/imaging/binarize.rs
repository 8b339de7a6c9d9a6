use super::{BinaryImage, GrayImage, BACKGROUND, INK};

/// Otsu's threshold: the `t` maximizing between-class variance where the
/// dark class is `v <= t`. The first maximum wins. Returns `None` when no
/// split has both classes non-empty (constant images).
pub fn otsu_threshold(img: &GrayImage) -> Option<u8> {
    let mut hist = [0u64; 256];
    for &v in img.data() {
        hist[v as usize] += 1;
    }
    let total = img.data().len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(v, &c)| v as f64 * c as f64).sum();
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    let mut best: Option<(u8, f64)> = None;
    for t in 0..255usize {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if best.map_or(true, |(_, b)| var > b) {
            best = Some((t as u8, var));
        }
    }
    best.map(|(t, _)| t)
}

/// Pixels at or below the Otsu threshold become ink (0), the rest 255.
/// A constant image has no foreground and maps to all background.
pub fn otsu_binarize(img: &GrayImage) -> BinaryImage {
    let mut out = BinaryImage::blank(img.width(), img.height());
    if let Some(t) = otsu_threshold(img) {
        let data: Vec<u8> = img.data().iter().map(|&v| if v <= t { INK } else { BACKGROUND }).collect();
        out = BinaryImage::from_gray_threshold(&GrayImage::new(img.width(), img.height(), data).expect("same geometry"));
    }
    out
}
