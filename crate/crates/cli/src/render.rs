//! Windowing real images into 8-bit pixels.

use ndarray::{Array2, Array3};

/// Linear map of `[lo, hi]` onto `0..=255`, clamped. NaN renders black.
pub fn to_gray(img: &Array2<f64>, lo: f64, hi: f64) -> Vec<u8> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    img.iter()
        .map(|&v| {
            if v.is_nan() {
                0
            } else {
                (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8
            }
        })
        .collect()
}

/// `(n1, n2, 3)` values in `[0, 1]` to interleaved RGB.
pub fn to_rgb(img: &Array3<f64>) -> Vec<u8> {
    img.iter()
        .map(|&v| if v.is_nan() { 0 } else { (v.clamp(0.0, 1.0) * 255.0).round() as u8 })
        .collect()
}

/// `[0, max]` of the finite values, `[0, 1]` for an empty or flat image.
pub fn auto_window(img: &Array2<f64>) -> (f64, f64) {
    let hi = img.iter().filter(|v| v.is_finite()).fold(0.0f64, |m, &v| m.max(v));
    (0.0, if hi > 0.0 { hi } else { 1.0 })
}

pub fn parse_window(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("window {s:?} is not LO,HI"))?;
    let lo: f64 = a.trim().parse().map_err(|e| format!("window low: {e}"))?;
    let hi: f64 = b.trim().parse().map_err(|e| format!("window high: {e}"))?;
    if hi <= lo {
        return Err(format!("window high {hi} must exceed low {lo}"));
    }
    Ok((lo, hi))
}
