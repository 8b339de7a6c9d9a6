use super::GrayImage;

/// Cubic convolution kernel parameter.
pub const CUBIC_A: f64 = -0.5;

/// Float-valued raster produced by resampling.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl FloatImage {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Rounds to the nearest 8-bit value.
    pub fn to_gray(&self) -> GrayImage {
        let data = self.data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
        GrayImage::new(self.width, self.height, data).expect("non-empty")
    }
}

/// Keys cubic kernel with `a = -0.5`.
pub fn cubic_weight(t: f64) -> f64 {
    let a = CUBIC_A;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((t - 5.0) * t + 8.0) * t * a - 4.0 * a
    } else {
        0.0
    }
}

/// Four taps (clamped source indices and weights) for every output coordinate.
fn taps(input: usize, output: usize) -> Vec<[(usize, f64); 4]> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let frac = src - base;
            let mut t = [(0usize, 0.0f64); 4];
            for (k, slot) in t.iter_mut().enumerate() {
                let offset = k as i64 - 1;
                let idx = (base as i64 + offset).clamp(0, input as i64 - 1) as usize;
                *slot = (idx, cubic_weight(frac - offset as f64));
            }
            t
        })
        .collect()
}

/// Separable bicubic resampling of a row-major plane, unclamped.
pub(crate) fn resize_plane(src: &[f64], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let tx = taps(w, out_w);
    let ty = taps(h, out_h);
    let mut horiz = vec![0.0; out_w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for (x, t) in tx.iter().enumerate() {
            horiz[y * out_w + x] = t.iter().map(|&(i, wt)| wt * row[i]).sum();
        }
    }
    let mut out = vec![0.0; out_w * out_h];
    for (y, t) in ty.iter().enumerate() {
        for x in 0..out_w {
            out[y * out_w + x] = t.iter().map(|&(i, wt)| wt * horiz[i * out_w + x]).sum();
        }
    }
    out
}

/// Bicubic resize with edge clamping; output values clamped to `[0, 255]`.
///
/// Output pixel centers map to source coordinates `(x + 0.5) * in / out - 0.5`.
///
/// # Panics
/// If `out_w` or `out_h` is zero.
pub fn bicubic_resize(img: &GrayImage, out_w: usize, out_h: usize) -> FloatImage {
    assert!(out_w > 0 && out_h > 0, "output dimensions must be positive");
    let src: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let data = resize_plane(&src, img.width(), img.height(), out_w, out_h)
        .into_iter()
        .map(|v| v.clamp(0.0, 255.0))
        .collect();
    FloatImage {
        width: out_w,
        height: out_h,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        assert_eq!(cubic_weight(0.0), 1.0);
        assert_eq!(cubic_weight(1.0), 0.0);
        assert_eq!(cubic_weight(2.0), 0.0);
        assert!((cubic_weight(0.5) - 0.5625).abs() < 1e-12);
        assert!((cubic_weight(1.5) + 0.0625).abs() < 1e-12);
    }

    #[test]
    fn identity_geometry() {
        let data: Vec<u8> = (0..35).map(|v| (v * 7 % 256) as u8).collect();
        let img = GrayImage::new(7, 5, data.clone()).unwrap();
        let out = bicubic_resize(&img, 7, 5);
        let back: Vec<u8> = out.data().iter().map(|&v| v as u8).collect();
        assert_eq!(back, data);
        assert!(out.data().iter().all(|v| v.fract() == 0.0));
    }

    #[test]
    fn constant_stays_constant() {
        let img = GrayImage::filled(9, 4, 117);
        for (w, h) in [(1, 1), (30, 3), (760, 80)] {
            let out = bicubic_resize(&img, w, h);
            assert!(out.data().iter().all(|&v| (v - 117.0).abs() < 1e-9));
        }
    }

    #[test]
    fn ramp_against_direct_kernel_sum() {
        let data: Vec<u8> = (0..16).map(|i| ((i % 4) * 60 + (i / 4) * 5) as u8).collect();
        let img = GrayImage::new(4, 4, data).unwrap();
        let out = bicubic_resize(&img, 8, 8);
        for oy in 0..8 {
            for ox in 0..8 {
                let sx = (ox as f64 + 0.5) * 0.5 - 0.5;
                let sy = (oy as f64 + 0.5) * 0.5 - 0.5;
                let mut acc = 0.0;
                for j in -3i64..=6 {
                    for i in -3i64..=6 {
                        let w = cubic_weight(sx - i as f64) * cubic_weight(sy - j as f64);
                        let v = img.get(i.clamp(0, 3) as usize, j.clamp(0, 3) as usize) as f64;
                        acc += w * v;
                    }
                }
                assert!((out.get(ox, oy) - acc.clamp(0.0, 255.0)).abs() < 1e-9);
            }
        }
    }
}
