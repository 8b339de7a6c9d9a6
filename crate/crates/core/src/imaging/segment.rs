use super::{BinaryImage, LineBox};

/// Horizontal margin added on each side of a line's ink extent.
pub const MARGIN: usize = 2;

/// Default blank-row gap separating two lines.
pub const DEFAULT_MIN_GAP: usize = 4;
/// Default minimum line height in rows.
pub const DEFAULT_MIN_HEIGHT: usize = 8;

/// A row is ink when its ink-pixel count exceeds this value.
pub fn ink_row_threshold(width: usize) -> f64 {
    (0.005 * width as f64).max(2.0)
}

/// Projection-profile line segmentation.
///
/// Runs of ink rows separated by fewer than `min_gap` blank rows are merged;
/// merged runs shorter than `min_height` rows are dropped. Each box spans its
/// run vertically and the ink extent (plus a 2px margin) horizontally.
/// Boxes come back top to bottom and never overlap.
pub fn segment_lines(img: &BinaryImage, min_gap: usize, min_height: usize) -> Vec<LineBox> {
    let (w, h) = (img.width(), img.height());
    let min_gap = min_gap.max(1);
    let floor = ink_row_threshold(w);
    let is_ink_row: Vec<bool> = (0..h)
        .map(|y| (0..w).filter(|&x| img.is_ink(x, y)).count() as f64 > floor)
        .collect();

    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut y = 0;
    while y < h {
        if !is_ink_row[y] {
            y += 1;
            continue;
        }
        let start = y;
        while y < h && is_ink_row[y] {
            y += 1;
        }
        match runs.last_mut() {
            Some(last) if start - last.1 < min_gap => last.1 = y,
            _ => runs.push((start, y)),
        }
    }

    runs.into_iter()
        .filter(|&(a, b)| b - a >= min_height)
        .filter_map(|(a, b)| {
            let cols: Vec<usize> = (0..w).filter(|&x| (a..b).any(|y| img.is_ink(x, y))).collect();
            let (&lo, &hi) = (cols.first()?, cols.last()?);
            let x0 = lo.saturating_sub(MARGIN);
            let x1 = (hi + 1 + MARGIN).min(w);
            Some(LineBox::new(x0, a, x1 - x0, b - a))
        })
        .collect()
}
