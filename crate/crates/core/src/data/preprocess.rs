//! Intensity preprocessing, QC filtering, and grid resampling.

use serde::{Deserialize, Serialize};
use ndarray::{Array, Array2, Array3, Dimension};

use super::{Roi, Volume};
use crate::error::{Result, SegError};

/// QC thresholds: lesions below either are excluded from training cohorts.
pub const QC_MIN_VOLUME_CC: f64 = 3.0;
pub const QC_MIN_SUV: f64 = 3.0;

/// Default CT window for the fine-tuning (lung) data, HU.
pub const LUNG_WINDOW: (f64, f64) = (-1350.0, 150.0);
/// Default CT window for the pre-training data, HU.
pub const PRETRAIN_WINDOW: (f64, f64) = (-1200.0, 200.0);

/// Clamp HU values to `[lo, hi]` and map the window linearly onto `[0, 255]`.
pub fn window_ct<D: Dimension>(hu: &Array<f64, D>, lo: f64, hi: f64) -> Result<Array<f64, D>> {
    if !(lo < hi) {
        return Err(SegError::config(format!("CT window lower bound {lo} must be below {hi}")));
    }
    let span = hi - lo;
    // Divide before scaling so the window bounds land exactly on 0 and 255.
    Ok(hu.mapv(|v| (v.clamp(lo, hi) - lo) / span * 255.0))
}

/// Scale SUV by the ROI-specific maximum, clamp to `[0, 1]`, map to `[0, 255]`.
/// High-uptake structures outside the ROI (heart, liver) saturate at 255
/// instead of compressing the tumor's dynamic range.
pub fn normalize_pet<D: Dimension>(suv: &Array<f64, D>, roi: &Roi) -> Result<Array<f64, D>> {
    normalize_pet_by(suv, roi.suv_max)
}

pub fn normalize_pet_by<D: Dimension>(suv: &Array<f64, D>, suv_max: f64) -> Result<Array<f64, D>> {
    if !(suv_max > 0.0) {
        return Err(SegError::data(format!("ROI suv_max must be positive, got {suv_max}")));
    }
    Ok(suv.mapv(|v| (v / suv_max).clamp(0.0, 1.0) * 255.0))
}

/// Why an ROI failed quality control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QcReason {
    Volume { volume_cc: f64 },
    Suv { suv_max: f64 },
}

impl std::fmt::Display for QcReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QcReason::Volume { volume_cc } => {
                write!(f, "volume {volume_cc:.2} cc below {QC_MIN_VOLUME_CC} cc")
            }
            QcReason::Suv { suv_max } => {
                write!(f, "SUVmax {suv_max:.2} below {QC_MIN_SUV}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QcDecision {
    Accept,
    Reject(QcReason),
}

impl QcDecision {
    pub fn is_accept(&self) -> bool {
        matches!(self, QcDecision::Accept)
    }
}

/// Accept an ROI iff volume >= 3.0 cc and SUVmax >= 3.0. Volume is checked
/// first, so a lesion failing both reports the volume reason.
pub fn qc_filter(roi: &Roi) -> QcDecision {
    qc_filter_values(roi.volume_cc, roi.suv_max)
}

pub fn qc_filter_values(volume_cc: f64, suv_max: f64) -> QcDecision {
    if volume_cc < QC_MIN_VOLUME_CC {
        QcDecision::Reject(QcReason::Volume { volume_cc })
    } else if suv_max < QC_MIN_SUV {
        QcDecision::Reject(QcReason::Suv { suv_max })
    } else {
        QcDecision::Accept
    }
}

/// Trilinear resampling of a volume onto a target grid, used to bring PET
/// onto the CT grid. Physical coordinates follow `index * spacing`; samples
/// outside the source grid clamp to the border.
pub fn resample_to_grid(
    src: &Volume,
    target_dims: (usize, usize, usize),
    target_spacing: [f64; 3],
) -> Result<Volume> {
    let (snz, sny, snx) = src.dims();
    let (nz, ny, nx) = target_dims;
    let mut out = Array3::zeros(target_dims);
    for z in 0..nz {
        let zf = ((z as f64 * target_spacing[2]) / src.spacing_mm[2]).clamp(0.0, (snz - 1) as f64);
        let z0 = zf.floor() as usize;
        let z1 = (z0 + 1).min(snz - 1);
        let tz = zf - z0 as f64;
        for y in 0..ny {
            let yf =
                ((y as f64 * target_spacing[1]) / src.spacing_mm[1]).clamp(0.0, (sny - 1) as f64);
            let y0 = yf.floor() as usize;
            let y1 = (y0 + 1).min(sny - 1);
            let ty = yf - y0 as f64;
            for x in 0..nx {
                let xf = ((x as f64 * target_spacing[0]) / src.spacing_mm[0])
                    .clamp(0.0, (snx - 1) as f64);
                let x0 = xf.floor() as usize;
                let x1 = (x0 + 1).min(snx - 1);
                let tx = xf - x0 as f64;
                let c00 = src.values[[z0, y0, x0]] * (1.0 - tx) + src.values[[z0, y0, x1]] * tx;
                let c01 = src.values[[z0, y1, x0]] * (1.0 - tx) + src.values[[z0, y1, x1]] * tx;
                let c10 = src.values[[z1, y0, x0]] * (1.0 - tx) + src.values[[z1, y0, x1]] * tx;
                let c11 = src.values[[z1, y1, x0]] * (1.0 - tx) + src.values[[z1, y1, x1]] * tx;
                let c0 = c00 * (1.0 - ty) + c01 * ty;
                let c1 = c10 * (1.0 - ty) + c11 * ty;
                out[[z, y, x]] = c0 * (1.0 - tz) + c1 * tz;
            }
        }
    }
    Volume::new(out, target_spacing)
}

/// Bilinear resize of a 2D image to `(oh, ow)`, pixel centers aligned via the
/// half-pixel convention.
pub fn bilinear_resize2(a: &Array2<f64>, oh: usize, ow: usize) -> Array2<f64> {
    let (h, w) = a.dim();
    let mut out = Array2::zeros((oh, ow));
    for oy in 0..oh {
        let yf = (((oy as f64 + 0.5) * h as f64 / oh as f64) - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = yf.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = yf - y0 as f64;
        for ox in 0..ow {
            let xf = (((ox as f64 + 0.5) * w as f64 / ow as f64) - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = xf.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = xf - x0 as f64;
            let top = a[[y0, x0]] * (1.0 - tx) + a[[y0, x1]] * tx;
            let bot = a[[y1, x0]] * (1.0 - tx) + a[[y1, x1]] * tx;
            out[[oy, ox]] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Nearest-neighbor resize, used for masks so they stay binary.
pub fn nearest_resize2(a: &Array2<f64>, oh: usize, ow: usize) -> Array2<f64> {
    let (h, w) = a.dim();
    let mut out = Array2::zeros((oh, ow));
    for oy in 0..oh {
        let yf = (((oy as f64 + 0.5) * h as f64 / oh as f64) - 0.5).clamp(0.0, (h - 1) as f64);
        let y = yf.round() as usize;
        for ox in 0..ow {
            let xf = (((ox as f64 + 0.5) * w as f64 / ow as f64) - 0.5).clamp(0.0, (w - 1) as f64);
            let x = xf.round() as usize;
            out[[oy, ox]] = a[[y.min(h - 1), x.min(w - 1)]];
        }
    }
    out
}
