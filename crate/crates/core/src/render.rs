//! Static overlay figures: a grayscale base image with ground-truth
//! contours drawn in red and predicted contours in green.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Result, SegError};

/// Boundary pixels of a mask: foreground with at least one 4-neighborhood
/// background or out-of-bounds neighbor. Matches the surface definition
/// the distance metrics use, so overlays trace the same outline.
pub fn contour_pixels(mask: &Array2<bool>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] {
                continue;
            }
            let at_edge = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            if at_edge
                || !mask[[y - 1, x]]
                || !mask[[y + 1, x]]
                || !mask[[y, x - 1]]
                || !mask[[y, x + 1]]
            {
                out.push((y, x));
            }
        }
    }
    out
}

/// Compose an RGB overlay `(h, w, 3)` from a grayscale base in [0, 255].
/// Ground truth is outlined in red, the prediction in green; where the two
/// coincide the prediction wins so disagreement stays visible.
pub fn overlay(
    base: &Array2<f64>,
    gt: Option<&Array2<bool>>,
    pred: Option<&Array2<bool>>,
) -> Result<Array3<u8>> {
    let (h, w) = base.dim();
    for m in [gt, pred].into_iter().flatten() {
        if m.dim() != (h, w) {
            return Err(SegError::input(format!(
                "overlay mask shape {:?} does not match base {:?}",
                m.dim(),
                (h, w)
            )));
        }
    }
    let mut rgb = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let v = base[[y, x]].clamp(0.0, 255.0).round() as u8;
            for c in 0..3 {
                rgb[[y, x, c]] = v;
            }
        }
    }
    if let Some(m) = gt {
        for (y, x) in contour_pixels(m) {
            rgb[[y, x, 0]] = 255;
            rgb[[y, x, 1]] = 0;
            rgb[[y, x, 2]] = 0;
        }
    }
    if let Some(m) = pred {
        for (y, x) in contour_pixels(m) {
            rgb[[y, x, 0]] = 0;
            rgb[[y, x, 1]] = 255;
            rgb[[y, x, 2]] = 0;
        }
    }
    Ok(rgb)
}

pub fn save_rgb_png(path: &Path, rgb: &Array3<u8>) -> Result<()> {
    let (h, w, c) = rgb.dim();
    if c != 3 {
        return Err(SegError::input(format!("expected 3 color channels, got {c}")));
    }
    let mut raw = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                raw.push(rgb[[y, x, ch]]);
            }
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| SegError::input("overlay buffer size mismatch"))?;
    img.save(path)
        .map_err(|e| SegError::Io(std::io::Error::other(format!("{}: {e}", path.display()))))?;
    Ok(())
}
